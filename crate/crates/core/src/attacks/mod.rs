//! Information-disclosure attacks against hidden stacks.
//!
//! A [`Victim`] is a booted machine laid out according to a [`SchemeLayout`].
//! Attackers see it only through an [`AttackSurface`]: word reads, write
//! probes, allocation oracles and the public scheme constants. Their claims
//! are checked against the victim's ground truth afterwards.

mod adjacency;
mod leaks;
mod matrix;
mod oracle;
mod probe;
mod surface;
mod victim;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::arch::Arch;
use crate::machine::{MachineError, Scheme};
use crate::space::{LayoutConfig, LayoutError};
use crate::space::SpaceError;

pub use adjacency::{adjacency_attack, AdjacencyConfig, ADJACENCY_WINDOW};
pub use leaks::{pointer_leak_attack, scan_pointer_leaks, LeakHit};
pub use matrix::{resilience_matrix, MatrixConfig, MatrixRow, ResilienceMatrix, ThreadSprayStats};
pub use oracle::{allocation_oracle, allocation_oracle_attack, largest_hole, HoleFinding, OracleConfig, OracleOutcome};
pub use probe::{brute_force_probe, ProbeConfig, ProbeStrategy, Spray, SPRAY_DEPTH, SPRAY_LOCALS, SPRAY_SIGNATURE};
pub use surface::{AttackSurface, Cost, PublicInfo};
pub use victim::{Victim, VictimConfig};

/// log2 of the 8 MiB default safe-stack size, in pages.
pub const SAFE_STACK_LOG2: u32 = 11;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid attack configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    /// No hidden stacks at all.
    Regular,
    SafeStack,
    AgStack,
    ReturnStack,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [SchemeKind::Regular, SchemeKind::SafeStack, SchemeKind::AgStack, SchemeKind::ReturnStack];
    /// The three dual-stack schemes compared in the resilience matrix.
    pub const DUAL: [SchemeKind; 3] = [SchemeKind::SafeStack, SchemeKind::AgStack, SchemeKind::ReturnStack];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Regular => "regular",
            SchemeKind::SafeStack => "safestack",
            SchemeKind::AgStack => "agstack",
            SchemeKind::ReturnStack => "returnstack",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SchemeKind::Regular => "Regular",
            SchemeKind::SafeStack => "SafeStack",
            SchemeKind::AgStack => "AG-Stack",
            SchemeKind::ReturnStack => "Return Stack",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown scheme `{s}` (expected regular, safestack, agstack or returnstack)"))
    }
}

/// How a scheme places and fills its hidden stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SchemeLayout {
    pub kind: SchemeKind,
    #[serde(skip)]
    pub machine_scheme: Scheme,
    /// Locals share the hidden stack with return addresses.
    pub locals_on_safe_stack: bool,
    /// The thread control block records the hidden stack's bounds.
    pub tcb_leak: bool,
    /// `setjmp` stores the hidden stack pointer in its buffer.
    pub setjmp_spill: bool,
    /// The unwinder's context records hidden stack pointers.
    pub unwinder_spill: bool,
    pub return_addresses_only: bool,
    /// Hidden stacks come from the return-stack region, not `mmap`.
    pub region_placement: bool,
    /// log2 of the hidden stack size in pages; `None` without hidden stacks.
    pub stack_log2: Option<u32>,
}

impl SchemeLayout {
    pub fn of(kind: SchemeKind) -> SchemeLayout {
        let dual = SchemeLayout {
            kind,
            machine_scheme: Scheme::SafeStackStyle,
            locals_on_safe_stack: true,
            tcb_leak: true,
            setjmp_spill: true,
            unwinder_spill: true,
            return_addresses_only: false,
            region_placement: false,
            stack_log2: Some(SAFE_STACK_LOG2),
        };
        match kind {
            SchemeKind::Regular => SchemeLayout {
                machine_scheme: Scheme::Regular,
                tcb_leak: false,
                setjmp_spill: false,
                unwinder_spill: false,
                stack_log2: None,
                ..dual
            },
            SchemeKind::SafeStack => dual,
            SchemeKind::AgStack => SchemeLayout { locals_on_safe_stack: false, return_addresses_only: true, ..dual },
            SchemeKind::ReturnStack => SchemeLayout {
                machine_scheme: Scheme::ReturnStack,
                locals_on_safe_stack: false,
                tcb_leak: false,
                setjmp_spill: false,
                unwinder_spill: false,
                return_addresses_only: true,
                region_placement: true,
                stack_log2: Some(3),
                ..dual
            },
        }
    }

    pub fn stack_pages(&self) -> u64 {
        self.stack_log2.map_or(0, |s| 1 << s)
    }

    /// Placement entropy in bits for the main thread's and child threads'
    /// hidden stacks under the default layout of `arch`.
    pub fn placement_entropy(&self, arch: Arch) -> (u32, u32) {
        if self.region_placement {
            let bits = crate::region::RegionParams::default().size_pages.trailing_zeros();
            return (bits, bits);
        }
        let rows = LayoutConfig::defaults(arch).entropy_table();
        let by_name = |n: &str| rows.iter().find(|r| r.name == n).expect("table row").entropy;
        (by_name("stack_offset"), by_name("mmap_offset"))
    }

    /// Effective entropy of the main and child hidden stacks.
    pub fn effective_entropy(&self, arch: Arch) -> Option<(u32, u32)> {
        let s = self.stack_log2?;
        let (main, child) = self.placement_entropy(arch);
        Some((effective_entropy(main, s), effective_entropy(child, s)))
    }
}

/// Bits left to a linear search for a `2^s`-page object placed with `e` bits
/// of page-granular entropy.
pub fn effective_entropy(e: u32, s: u32) -> u32 {
    e.saturating_sub(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Leak,
    Probe,
    Spray,
    Adjacency,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Leak, Strategy::Probe, Strategy::Spray, Strategy::Adjacency, Strategy::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Leak => "leak",
            Strategy::Probe => "probe",
            Strategy::Spray => "spray",
            Strategy::Adjacency => "adjacency",
            Strategy::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected leak, probe, spray, adjacency or oracle)"))
    }
}

/// Result of one attack attempt against one victim.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialOutcome {
    pub cost: Cost,
    /// Addresses the attacker believes lie in hidden stacks.
    pub claims: Vec<u64>,
    /// Claims confirmed against ground truth.
    pub verified: usize,
    /// The strategy's cost metric (probes, oracle calls or leak hits).
    pub metric: f64,
}

impl TrialOutcome {
    /// At least one claim, and every claim correct.
    pub fn success(&self) -> bool {
        !self.claims.is_empty() && self.verified == self.claims.len()
    }
}

/// Marks which claims land inside `hidden`.
pub(crate) fn verify_claims(claims: &[u64], hidden: &[Range<u64>]) -> usize {
    claims.iter().filter(|c| hidden.iter().any(|r| r.contains(c))).count()
}

const MAX_DISCLOSED: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub schema: u32,
    pub scheme: SchemeKind,
    pub attack: Strategy,
    pub arch: Arch,
    pub trials: usize,
    /// Mean and standard deviation of the cost metric over successful
    /// trials; `null` when none succeeded.
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
    pub success_rate: f64,
    pub probes_issued: u64,
    pub faults: u64,
    pub oracle_invocations: u64,
    /// Verified addresses from successful trials, at most 64.
    #[serde(serialize_with = "crate::hex::vec::serialize")]
    pub disclosed: Vec<u64>,
    pub success: bool,
    pub stats: BTreeMap<String, f64>,
}

impl AttackReport {
    pub fn from_trials(scheme: SchemeKind, attack: Strategy, arch: Arch, outcomes: &[TrialOutcome]) -> AttackReport {
        let wins: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.success()).collect();
        let (mean, stddev) = if wins.is_empty() {
            (None, None)
        } else {
            let n = wins.len() as f64;
            let mean = wins.iter().map(|o| o.metric).sum::<f64>() / n;
            let var = if wins.len() > 1 {
                wins.iter().map(|o| (o.metric - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()))
        };
        let total = outcomes.iter().fold(Cost::default(), |acc, o| acc + o.cost);
        let disclosed: Vec<u64> = wins.iter().flat_map(|o| o.claims.iter().copied()).take(MAX_DISCLOSED).collect();
        let false_claims: usize = outcomes.iter().map(|o| o.claims.len() - o.verified).sum();
        let mut stats = BTreeMap::new();
        stats.insert("false_claims".to_string(), false_claims as f64);
        AttackReport {
            schema: 1,
            scheme,
            attack,
            arch,
            trials: outcomes.len(),
            mean,
            stddev,
            success_rate: if outcomes.is_empty() { 0.0 } else { wins.len() as f64 / outcomes.len() as f64 },
            probes_issued: total.probes,
            faults: total.faults,
            oracle_invocations: total.oracle,
            disclosed,
            success: !wins.is_empty(),
            stats,
        }
    }

    pub fn with_stat(mut self, key: &str, value: f64) -> Self {
        self.stats.insert(key.to_string(), value);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Independent, well-mixed seeds for trial `i` of a campaign.
pub(crate) fn trial_seed(seed: u64, i: usize, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_entropy_values() {
        assert_eq!(effective_entropy(22, 11), 11);
        assert_eq!(effective_entropy(28, 11), 17);
        assert_eq!(effective_entropy(32, 3), 29);
        assert_eq!(effective_entropy(19, 0), 19);
    }

    #[test]
    fn scheme_layout_rows() {
        let ss = SchemeLayout::of(SchemeKind::SafeStack);
        assert_eq!(ss.stack_pages(), 1 << 11);
        assert_eq!(ss.placement_entropy(Arch::X86_64), (22, 28));
        assert_eq!(ss.effective_entropy(Arch::X86_64), Some((11, 17)));
        let ag = SchemeLayout::of(SchemeKind::AgStack);
        assert_eq!(ag.effective_entropy(Arch::X86_64), Some((11, 17)));
        assert!(ag.return_addresses_only && !ss.return_addresses_only);
        let rs = SchemeLayout::of(SchemeKind::ReturnStack);
        assert_eq!(rs.stack_pages(), 8);
        assert_eq!(rs.placement_entropy(Arch::X86_64), (32, 32));
        assert_eq!(rs.effective_entropy(Arch::Arm64), Some((29, 29)));
        assert_eq!(SchemeLayout::of(SchemeKind::Regular).effective_entropy(Arch::X86_64), None);
        assert_eq!(ss.placement_entropy(Arch::Arm64), (18, 18));
    }

    #[test]
    fn names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("cpi".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn report_statistics() {
        let t = |metric: f64, ok: bool| TrialOutcome {
            cost: Cost { probes: metric as u64, ..Default::default() },
            claims: vec![0x1000],
            verified: ok as usize,
            metric,
        };
        let r = AttackReport::from_trials(SchemeKind::SafeStack, Strategy::Probe, Arch::X86_64, &[t(2.0, true), t(4.0, true), t(9.0, false)]);
        assert_eq!(r.mean, Some(3.0));
        assert!((r.stddev.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.success_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.probes_issued, 15);
        assert_eq!(r.stats["false_claims"], 1.0);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["schema"], 1);
        assert_eq!(json["disclosed"][0], "0x1000");
        let none = AttackReport::from_trials(SchemeKind::Regular, Strategy::Leak, Arch::X86_64, &[]);
        assert!(!none.success && none.mean.is_none());
    }

    #[test]
    fn trial_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| trial_seed(7, i, 0)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(trial_seed(7, 0, 0), trial_seed(7, 0, 1));
    }
}
