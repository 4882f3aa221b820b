//! Command plumbing shared by the `retstack` binary and its tests: a flat
//! run configuration, the commands, and their text and JSON renderings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::arch::{Arch, PAGE_SIZE};
use crate::attacks::{
    adjacency_attack, allocation_oracle_attack, brute_force_probe, pointer_leak_attack, resilience_matrix,
    AdjacencyConfig, AttackError, AttackReport, MatrixConfig, OracleConfig, ProbeConfig, ProbeStrategy, SchemeKind,
    SchemeLayout, Spray, Strategy, VictimConfig,
};
use crate::instrument::{parse_asm, print_asm, rewrite, ParseError};
use crate::machine::{CallTree, FuncDesc, LibraryMode, Machine, MachineConfig, MachineError, ProgramError};
use crate::space::{create_layout, AddressSpace, LayoutConfig, LayoutError};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (expected text or json)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{key}: {message}")]
    Config { key: String, message: String },
    #[error("config file line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("invalid program: {0}")]
    ProgramJson(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } | CliError::ConfigSyntax { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Parse(_) => "parse",
            CliError::Attack(_) => "attack",
            CliError::Machine(_) => "machine",
            CliError::Layout(_) => "layout",
            CliError::Program(_) | CliError::ProgramJson(_) => "program",
        }
    }

    /// The machine-readable form printed on failure.
    pub fn to_json(&self) -> String {
        json!({ "schema": SCHEMA, "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

fn bad(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), message: message.into() }
}

/// Every knob the commands read. Keys of the config file are the long flag
/// names without the leading dashes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub arch: Arch,
    pub scheme: SchemeKind,
    pub seed: u64,
    pub scaled_bits: Option<u32>,
    pub trials: usize,
    pub threads: usize,
    /// Extra threads for thread spraying; the matrix defaults to 200,
    /// a plain probing attack to none.
    pub threads_sprayed: Option<usize>,
    pub libs: LibraryMode,
    pub strategy: Strategy,
    pub probe_mode: ProbeStrategy,
    pub budget: Option<u64>,
    pub pie: bool,
    pub format: Format,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::X86_64,
            scheme: SchemeKind::ReturnStack,
            seed: 0,
            scaled_bits: None,
            trials: 64,
            threads: 1,
            threads_sprayed: None,
            libs: LibraryMode::Secure,
            strategy: Strategy::Leak,
            probe_mode: ProbeStrategy::UniformRandom,
            budget: None,
            pie: true,
            format: Format::Text,
            out: None,
        }
    }
}

pub const KEYS: [&str; 14] = [
    "arch",
    "scheme",
    "seed",
    "scaled-bits",
    "trials",
    "threads",
    "threads-sprayed",
    "libs",
    "strategy",
    "probe-mode",
    "budget",
    "no-pie",
    "format",
    "out",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| bad(key, format!("`{value}` is not a valid number")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(bad(key, format!("`{other}` is not a boolean"))),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let parsed = |r: Result<(), String>| r.map_err(|m| bad(key, m));
        match key {
            "arch" => parsed(v.parse().map(|a| self.arch = a)),
            "scheme" => parsed(v.parse().map(|s| self.scheme = s)),
            "seed" => num(key, v).map(|s| self.seed = s),
            "scaled-bits" => num(key, v).map(|b| self.scaled_bits = Some(b)),
            "trials" => num(key, v).map(|t| self.trials = t),
            "threads" => num(key, v).map(|t| self.threads = t),
            "threads-sprayed" => num(key, v).map(|t| self.threads_sprayed = Some(t)),
            "libs" => parsed(v.parse().map(|l| self.libs = l)),
            "strategy" => parsed(v.parse().map(|s| self.strategy = s)),
            "probe-mode" => parsed(v.parse().map(|m| self.probe_mode = m)),
            "budget" => num(key, v).map(|b| self.budget = Some(b)),
            "no-pie" => flag(key, v).map(|f| self.pie = !f),
            "format" => parsed(v.parse().map(|f| self.format = f)),
            "out" => {
                self.out = Some(PathBuf::from(v));
                Ok(())
            }
            _ => Err(bad(key, format!("unknown key (expected one of {})", KEYS.join(", ")))),
        }
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::ConfigSyntax { line: i + 1, message: format!("expected key=value, got `{line}`") })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = read(path)?;
        self.apply_file_text(&text)
    }

    fn victim(&self) -> VictimConfig {
        VictimConfig::new(self.arch, self.scheme)
            .seed(self.seed)
            .scaled(self.scaled_bits)
            .threads(self.threads)
            .libs(self.libs)
    }

    /// Checks every field before anything runs.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.trials == 0 {
            return Err(bad("trials", "must be at least 1"));
        }
        if self.trials > 1_000_000 {
            return Err(bad("trials", "at most 1000000"));
        }
        if self.threads_sprayed.unwrap_or(0) > 100_000 {
            return Err(bad("threads-sprayed", "at most 100000"));
        }
        if let Some(b) = self.scaled_bits {
            if !(1..=24).contains(&b) {
                return Err(bad("scaled-bits", "must lie in 1..=24"));
            }
        }
        if self.budget == Some(0) {
            return Err(bad("budget", "must be at least 1"));
        }
        self.victim().validate().map_err(|e| bad("scheme", e.to_string()))?;
        LayoutConfig::defaults(self.arch).with_pie(self.pie).validate()?;
        Ok(())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

/// What a command produced: the main output, plus an optional side report
/// (the rewrite report when the rewritten listing is the main output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub main: String,
    pub side: Option<String>,
}

impl Output {
    fn main(text: String) -> Self {
        Output { main: text, side: None }
    }
}

fn finish(mut text: String) -> String {
    if !text.ends_with('\n') {
        text.push('\n');
    }
    text
}

#[derive(Serialize)]
struct LayoutDump<'a> {
    schema: u32,
    arch: Arch,
    seed: u64,
    pie: bool,
    layout: &'a crate::space::MemoryLayout,
    entropy: Vec<crate::space::EntropyRow>,
    space: &'a AddressSpace,
}

/// Segment bases and the entropy table for one seed.
pub fn cmd_layout(cfg: &RunConfig) -> Result<Output, CliError> {
    let lc = LayoutConfig::defaults(cfg.arch).with_pie(cfg.pie);
    let layout = create_layout(lc, cfg.seed)?;
    let space = AddressSpace::boot(layout.clone());
    let entropy = lc.entropy_table();
    if cfg.format == Format::Json {
        let dump = LayoutDump { schema: SCHEMA, arch: cfg.arch, seed: cfg.seed, pie: cfg.pie, layout: &layout, entropy, space: &space };
        return Ok(Output::main(finish(serde_json::to_string_pretty(&dump).expect("layout serializes"))));
    }
    let mut s = format!("{} layout, seed {}{}\n", cfg.arch, cfg.seed, if cfg.pie { "" } else { ", non-PIE" });
    for (name, base) in [
        ("code", layout.code_base),
        ("heap", layout.heap_base),
        ("mmap", layout.mmap_base),
        ("stack", layout.stack_base),
    ] {
        let _ = writeln!(s, "  {name:<6}{base:#016x}");
    }
    let _ = writeln!(s, "{:<14}{:>18}{:>6}{:>9}", "offset", "interval", "bits", "entropy");
    for r in &entropy {
        let _ = writeln!(s, "{:<14}{:>#18x}{:>6}{:>9}", r.name, r.interval, r.bits, r.entropy);
    }
    let _ = writeln!(s, "mappings");
    for m in space.mappings() {
        let _ = writeln!(s, "  {:#016x}-{:#016x} {:>10} {}", m.base_addr(), m.end_addr(), m.pages(), m.perm.as_str());
    }
    Ok(Output::main(s))
}

fn run_attack(cfg: &RunConfig) -> Result<AttackReport, CliError> {
    let victim = cfg.victim();
    let report = match cfg.strategy {
        Strategy::Leak => pointer_leak_attack(&victim)?,
        Strategy::Probe => {
            let mut p = ProbeConfig::new(victim, cfg.trials);
            p.strategy = cfg.probe_mode;
            p.spray = Spray { threads: cfg.threads_sprayed.unwrap_or(0), stack: false };
            if let Some(b) = cfg.budget {
                p.budget = b;
            }
            brute_force_probe(&p)?
        }
        Strategy::Spray => {
            let mut p = ProbeConfig::new(victim, cfg.trials);
            p.strategy = cfg.probe_mode;
            p.spray = Spray { threads: 0, stack: true };
            p.budget = cfg.budget.unwrap_or(1_000_000);
            brute_force_probe(&p)?
        }
        Strategy::Adjacency => {
            let mut a = AdjacencyConfig::new(victim, cfg.trials);
            if let Some(b) = cfg.budget {
                a.budget = b;
            }
            adjacency_attack(&a)?
        }
        Strategy::Oracle => allocation_oracle_attack(&OracleConfig::new(victim))?,
    };
    Ok(report)
}

pub fn cmd_attack(cfg: &RunConfig) -> Result<Output, CliError> {
    let r = run_attack(cfg)?;
    if cfg.format == Format::Json {
        return Ok(Output::main(finish(r.to_json())));
    }
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |m| format!("{m:.1}"));
    let mut s = format!("{} attack on {} ({}), {} trial(s)\n", r.attack, r.scheme, r.arch, r.trials);
    let _ = writeln!(s, "  success        {}", r.success);
    let _ = writeln!(s, "  success rate   {:.3}", r.success_rate);
    let _ = writeln!(s, "  mean cost      {}", opt(r.mean));
    let _ = writeln!(s, "  stddev         {}", opt(r.stddev));
    let _ = writeln!(s, "  probes         {}", r.probes_issued);
    let _ = writeln!(s, "  faults         {}", r.faults);
    let _ = writeln!(s, "  oracle calls   {}", r.oracle_invocations);
    for (k, v) in &r.stats {
        let _ = writeln!(s, "  {k:<14} {v}");
    }
    for a in r.disclosed.iter().take(8) {
        let _ = writeln!(s, "  disclosed      {a:#x}");
    }
    Ok(Output::main(s))
}

/// Rewrites an assembly listing for the configured scheme. The listing is
/// the main output; the report goes alongside.
pub fn cmd_rewrite(cfg: &RunConfig, text: &str) -> Result<Output, CliError> {
    let funcs = parse_asm(text, cfg.arch)?;
    let scheme = SchemeLayout::of(cfg.scheme).machine_scheme;
    let (out, report) = rewrite(cfg.arch, &funcs, scheme);
    let side = match cfg.format {
        Format::Json => report.to_json(),
        Format::Text => {
            let mut s = format!("{} function(s) rewritten for {} on {}\n", report.functions.len(), report.scheme, report.arch);
            for f in &report.functions {
                match &f.flagged {
                    Some(why) => {
                        let _ = writeln!(s, "  {:<24} flagged: {why}", f.function);
                    }
                    None => {
                        let _ = writeln!(s, "  {:<24} {:+}", f.function, f.delta);
                    }
                }
            }
            s
        }
    };
    Ok(Output { main: print_asm(&out), side: Some(finish(side)) })
}

pub fn cmd_matrix(cfg: &RunConfig) -> Result<Output, CliError> {
    let mut mc = MatrixConfig::new(cfg.arch, cfg.seed);
    mc.trials = cfg.trials;
    if let Some(t) = cfg.threads_sprayed {
        mc.threads_sprayed = t;
    }
    if let Some(b) = cfg.scaled_bits {
        mc.probe_bits = b;
    }
    if let Some(b) = cfg.budget {
        mc.spray_budget = b;
    }
    let m = resilience_matrix(&mc)?;
    Ok(Output::main(finish(match cfg.format {
        Format::Json => m.to_json(),
        Format::Text => m.render_text(),
    })))
}

#[derive(serde::Deserialize)]
struct Program {
    #[serde(default = "default_entry")]
    entry: String,
    functions: Vec<FuncDesc>,
}

fn default_entry() -> String {
    "main".to_string()
}

#[derive(Serialize)]
struct DepthRow {
    entry: String,
    calls: usize,
    depth: usize,
}

/// Measures the deepest call nesting of a program (a JSON object with
/// `entry` and `functions`), or of `trials` random call trees.
pub fn cmd_depth(cfg: &RunConfig, program: Option<&str>) -> Result<Output, CliError> {
    let trees = match program {
        Some(text) => {
            let p: Program = serde_json::from_str(text).map_err(|e| CliError::ProgramJson(e.to_string()))?;
            let funcs: HashMap<String, FuncDesc> = p.functions.into_iter().map(|f| (f.name.clone(), f)).collect();
            vec![CallTree::from_program(&funcs, &p.entry)?]
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let pool: Vec<FuncDesc> = (0..8).map(|i| FuncDesc::new(format!("f{i}"), i % 4, 16 * (i as u64 % 5))).collect();
            (0..cfg.trials).map(|_| CallTree::random(&mut rng, &pool, 256, 64)).collect()
        }
    };
    let scheme = SchemeLayout::of(cfg.scheme);
    let mut rows = Vec::with_capacity(trees.len());
    for tree in &trees {
        let mc = MachineConfig::new(cfg.arch, scheme.machine_scheme)
            .seed(cfg.seed)
            .libc(cfg.libs)
            .locals_on_safe_stack(scheme.locals_on_safe_stack);
        let mut m = Machine::new(mc)?;
        let depth = m.measure_call_depth(tree)?;
        rows.push(DepthRow { entry: tree.func.name.clone(), calls: tree.size(), depth });
    }
    let max = rows.iter().map(|r| r.depth).max().unwrap_or(0);
    let bytes = max as u64 * crate::arch::WORD;
    if cfg.format == Format::Json {
        let v = json!({
            "schema": SCHEMA,
            "arch": cfg.arch,
            "scheme": cfg.scheme,
            "max_depth": max,
            "return_stack_bytes": bytes,
            "fits_return_stack": bytes <= crate::region::RegionParams::default().stack_pages * PAGE_SIZE,
            "runs": rows,
        });
        return Ok(Output::main(finish(serde_json::to_string_pretty(&v).expect("json"))));
    }
    let mut s = format!("max call depth {max} ({bytes} bytes of return addresses)\n");
    if rows.len() > 1 {
        for (i, r) in rows.iter().enumerate() {
            let _ = writeln!(s, "  run {i:<4} calls {:<6} depth {}", r.calls, r.depth);
        }
    }
    Ok(Output::main(s))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Layout,
    Attack,
    Rewrite { input: PathBuf },
    Matrix,
    Depth { program: Option<PathBuf> },
}

/// Validates `cfg` and runs `cmd`.
pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<Output, CliError> {
    cfg.validate()?;
    match cmd {
        Command::Layout => cmd_layout(cfg),
        Command::Attack => cmd_attack(cfg),
        Command::Rewrite { input } => cmd_rewrite(cfg, &read(input)?),
        Command::Matrix => cmd_matrix(cfg),
        Command::Depth { program } => {
            let text = program.as_deref().map(read).transpose()?;
            cmd_depth(cfg, text.as_deref())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_file_text("# campaign\narch = arm64\nscheme=safestack\n\nseed=9\nno-pie = true\n").unwrap();
        assert_eq!((c.arch, c.scheme, c.seed, c.pie), (Arch::Arm64, SchemeKind::SafeStack, 9, false));
        c.set("seed", "3").unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn config_errors_name_the_key() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("arch", "mips"), Err(CliError::Config { key, .. }) if key == "arch"));
        assert!(matches!(c.set("colour", "red"), Err(CliError::Config { .. })));
        assert!(matches!(c.apply_file_text("seed 4"), Err(CliError::ConfigSyntax { line: 1, .. })));
        c.set("trials", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("scaled-bits", "1").unwrap();
        c.set("threads", "4").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn error_json_is_machine_readable() {
        let e = bad("seed", "`x` is not a valid number");
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["schema"], 1);
        assert_eq!(v["error"]["kind"], "config");
    }

    #[test]
    fn layout_is_deterministic() {
        let c = RunConfig { seed: 7, ..RunConfig::default() };
        assert_eq!(cmd_layout(&c).unwrap(), cmd_layout(&c).unwrap());
        let j = RunConfig { format: Format::Json, ..c };
        let v: serde_json::Value = serde_json::from_str(&cmd_layout(&j).unwrap().main).unwrap();
        assert_eq!(v["schema"], 1);
        assert_eq!(v["entropy"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn empty_rewrite() {
        let out = cmd_rewrite(&RunConfig { format: Format::Json, ..RunConfig::default() }, "").unwrap();
        assert_eq!(out.main, "");
        let v: serde_json::Value = serde_json::from_str(out.side.as_ref().unwrap()).unwrap();
        assert_eq!(v["functions"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn depth_of_a_program() {
        let prog = r#"{"entry":"main","functions":[
            {"name":"main","callee_saved_spills":1,"locals_bytes":16,"calls":["a","b"]},
            {"name":"a","callee_saved_spills":0,"locals_bytes":0,"calls":["b"]},
            {"name":"b","callee_saved_spills":2,"locals_bytes":32}]}"#;
        let c = RunConfig { format: Format::Json, ..RunConfig::default() };
        let v: serde_json::Value = serde_json::from_str(&cmd_depth(&c, Some(prog)).unwrap().main).unwrap();
        assert_eq!(v["max_depth"], 3);
        assert_eq!(v["runs"][0]["calls"], 4);
        let rec = r#"{"functions":[{"name":"main","callee_saved_spills":0,"locals_bytes":0,"calls":["main"]}]}"#;
        assert!(matches!(cmd_depth(&c, Some(rec)), Err(CliError::Program(_))));
    }
}
