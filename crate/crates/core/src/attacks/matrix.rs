use std::fmt::Write as _;

use serde::Serialize;

use super::adjacency::{adjacency_attack, AdjacencyConfig};
use super::leaks::pointer_leak_attack;
use super::oracle::{allocation_oracle_attack, OracleConfig};
use super::probe::{brute_force_probe, ProbeConfig, Spray};
use super::victim::VictimConfig;
use super::{AttackError, AttackReport, SchemeKind, SchemeLayout};
use crate::arch::Arch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatrixConfig {
    pub arch: Arch,
    pub seed: u64,
    /// Effective entropy of the scaled layouts used for thread spraying.
    pub probe_bits: u32,
    /// Effective entropy of the scaled layouts used for stack spraying.
    pub spray_bits: u32,
    pub trials: usize,
    pub threads_sprayed: usize,
    /// Probes allowed for the stack-spraying search.
    pub spray_budget: u64,
}

impl MatrixConfig {
    pub fn new(arch: Arch, seed: u64) -> Self {
        MatrixConfig { arch, seed, probe_bits: 12, spray_bits: 8, trials: 64, threads_sprayed: 200, spray_budget: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatrixRow {
    pub key: &'static str,
    pub label: &'static str,
    /// One rendered cell per column.
    pub cells: Vec<String>,
    /// For attack rows: whether each scheme withstood the attack.
    pub resilient: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreadSprayStats {
    pub scheme: SchemeKind,
    pub threads: usize,
    pub single_mean: Option<f64>,
    pub sprayed_mean: Option<f64>,
    /// Effective entropy left after spraying at the default layout.
    pub full_scale_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResilienceMatrix {
    pub schema: u32,
    pub config: MatrixConfig,
    pub columns: Vec<SchemeKind>,
    pub rows: Vec<MatrixRow>,
    pub thread_spraying: Vec<ThreadSprayStats>,
    pub reports: Vec<AttackReport>,
}

const MARK_OK: &str = "✓";
const MARK_BAD: &str = "✗";

fn attack_row(key: &'static str, label: &'static str, resilient: Vec<bool>) -> MatrixRow {
    let cells = resilient.iter().map(|&r| if r { MARK_OK } else { MARK_BAD }.to_string()).collect();
    MatrixRow { key, label, cells, resilient: Some(resilient) }
}

fn pair(main: u32, child: u32) -> String {
    if main == child {
        main.to_string()
    } else {
        format!("{main}/{child}")
    }
}

/// Runs every attack against every dual-stack scheme.
pub fn resilience_matrix(cfg: &MatrixConfig) -> Result<ResilienceMatrix, AttackError> {
    let arch = cfg.arch;
    let columns = SchemeKind::DUAL.to_vec();
    let layouts: Vec<SchemeLayout> = columns.iter().map(|&k| SchemeLayout::of(k)).collect();
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let base = |k| VictimConfig::new(arch, k).seed(cfg.seed);

    let mut leaks = Vec::new();
    for &k in &columns {
        let r = pointer_leak_attack(&base(k))?;
        leaks.push(!r.success);
        reports.push(r);
    }
    rows.push(attack_row("pointer_leaks", "Pointer Leaks", leaks));

    rows.push(MatrixRow {
        key: "entropy",
        label: "(ASLR) Entropy",
        cells: layouts.iter().map(|l| pair(l.placement_entropy(arch).0, l.placement_entropy(arch).1)).collect(),
        resilient: None,
    });
    rows.push(MatrixRow {
        key: "max_size",
        label: "Max. Size (pages)",
        cells: layouts.iter().map(|l| format!("2^{}", l.stack_log2.unwrap_or(0))).collect(),
        resilient: None,
    });
    rows.push(MatrixRow {
        key: "effective_entropy",
        label: "Effective Entropy",
        cells: layouts
            .iter()
            .map(|l| l.effective_entropy(arch).map_or_else(|| "-".into(), |(m, c)| pair(m, c)))
            .collect(),
        resilient: None,
    });

    let mut adjacency = Vec::new();
    for &k in &columns {
        let r = adjacency_attack(&AdjacencyConfig::new(base(k), 4))?;
        adjacency.push(!r.success);
        reports.push(r);
    }
    rows.push(attack_row("spatial_adjacency", "Spatial Adjacency", adjacency));

    let mut threads = Vec::new();
    let mut spray_stats = Vec::new();
    for (&k, l) in columns.iter().zip(&layouts) {
        let probe = ProbeConfig::new(base(k).scaled(Some(cfg.probe_bits)), cfg.trials);
        let single = brute_force_probe(&probe)?;
        let sprayed = brute_force_probe(&ProbeConfig {
            spray: Spray { threads: cfg.threads_sprayed, stack: false },
            ..probe
        })?;
        // the sprayed search must be at least twice as fast to count
        let helped = match (single.mean, sprayed.mean) {
            (Some(s), Some(t)) => t < s / 2.0,
            _ => false,
        };
        threads.push(!helped);
        let stacks = (cfg.threads_sprayed + 1 + l.region_placement as usize) as f64;
        let child = l.placement_entropy(arch).1 as f64;
        spray_stats.push(ThreadSprayStats {
            scheme: k,
            threads: cfg.threads_sprayed,
            single_mean: single.mean,
            sprayed_mean: sprayed.mean,
            full_scale_bits: child - (stacks * l.stack_pages() as f64).log2(),
        });
        reports.push(single);
        reports.push(sprayed);
    }
    rows.push(attack_row("thread_spraying", "Thread Spraying", threads));

    let mut stack_spray = Vec::new();
    for &k in &columns {
        let mut p = ProbeConfig::new(base(k).scaled(Some(cfg.spray_bits)), 1);
        p.spray = Spray { threads: 0, stack: true };
        p.budget = cfg.spray_budget;
        let r = brute_force_probe(&p)?;
        stack_spray.push(!r.success);
        reports.push(r);
    }
    rows.push(attack_row("stack_spraying", "Stack Spraying", stack_spray));

    let mut oracle = Vec::new();
    for &k in &columns {
        let r = allocation_oracle_attack(&OracleConfig::new(base(k).threads(7)))?;
        oracle.push(!r.success);
        reports.push(r);
    }
    rows.push(attack_row("allocation_oracles", "Allocation Oracles", oracle));

    Ok(ResilienceMatrix { schema: 1, config: *cfg, columns, rows, thread_spraying: spray_stats, reports })
}

impl ResilienceMatrix {
    pub fn row(&self, key: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    /// Text table; contains nothing that depends on the seed.
    pub fn render_text(&self) -> String {
        let w0 = 24;
        let w = 14;
        let mut out = format!("Resilience against information disclosure ({})\n", self.config.arch);
        let _ = write!(out, "{:w0$}", "");
        for c in &self.columns {
            let _ = write!(out, "{:<w$}", c.title());
        }
        out = out.trim_end().to_string() + "\n";
        for r in &self.rows {
            let label = match r.key {
                "pointer_leaks" | "allocation_oracles" => r.label.to_string(),
                _ => format!("  {}", r.label),
            };
            if r.key == "entropy" {
                out.push_str("Brute-Force Probing\n");
            }
            let mut line = format!("{label:w0$}");
            for c in &r.cells {
                let _ = write!(line, "{c:<w$}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_formatting() {
        assert_eq!(pair(22, 28), "22/28");
        assert_eq!(pair(32, 32), "32");
    }

    #[test]
    fn arm_matrix_has_the_same_pattern() {
        let m = resilience_matrix(&MatrixConfig { trials: 24, ..MatrixConfig::new(Arch::Arm64, 2) }).unwrap();
        let pattern: Vec<Vec<bool>> = m.rows.iter().filter_map(|r| r.resilient.clone()).collect();
        assert_eq!(
            pattern,
            [
                [false, false, true],
                [false, false, true],
                [false, false, false],
                [false, true, true],
                [false, false, true],
            ]
        );
        assert_eq!(m.row("entropy").unwrap().cells, ["18", "18", "32"]);
        assert_eq!(m.row("effective_entropy").unwrap().cells, ["7", "7", "29"]);
    }
}
