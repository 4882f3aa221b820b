//! Brute-force probing for hidden stacks, optionally helped by thread
//! spraying (more stacks to hit) and stack spraying (searchable content).

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::surface::AttackSurface;
use super::victim::{Victim, VictimConfig};
use super::{trial_seed, verify_claims, AttackError, AttackReport, Strategy, TrialOutcome};
use crate::arch::{page_addr, PAGE_SIZE};

/// Marker the attacker plants through stack spraying.
pub const SPRAY_SIGNATURE: u64 = 0x5350_5241_5953_4947;
/// Recursion depth of the spraying function.
pub const SPRAY_DEPTH: usize = 16;
/// Locals of the spraying function; with the frame overhead a frame spans
/// exactly one page.
pub const SPRAY_LOCALS: u64 = 4080;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeStrategy {
    /// Uniform random pages, with replacement.
    #[default]
    UniformRandom,
    /// Stride of one stack size from a random phase, wrapping around.
    Linear,
}

impl std::str::FromStr for ProbeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform-random" | "random" => Ok(ProbeStrategy::UniformRandom),
            "linear" => Ok(ProbeStrategy::Linear),
            _ => Err(format!("unknown probing mode `{s}` (expected linear or uniform-random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Spray {
    /// Extra threads spawned by the attacker.
    pub threads: usize,
    /// Plant and search for [`SPRAY_SIGNATURE`].
    pub stack: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeConfig {
    pub victim: VictimConfig,
    pub strategy: ProbeStrategy,
    pub spray: Spray,
    pub trials: usize,
    /// Probes per trial before giving up.
    pub budget: u64,
}

impl ProbeConfig {
    pub fn new(victim: VictimConfig, trials: usize) -> Self {
        ProbeConfig { victim, strategy: ProbeStrategy::UniformRandom, spray: Spray::default(), trials, budget: 1 << 26 }
    }
}

/// Pages the attacker searches, from public knowledge only.
fn search_zone(s: &AttackSurface<'_>) -> Range<u64> {
    let p = s.public();
    match &p.region {
        Some(r) => r.start / PAGE_SIZE..r.end / PAGE_SIZE,
        None => {
            let stacks = p.threads as u64 * p.stack_pages.max(1 << super::SAFE_STACK_LOG2);
            p.mmap_window(stacks + p.library_pages)
        }
    }
}

/// One search. Returns the claimed address if something was found within
/// `budget` probes.
fn search(s: &mut AttackSurface<'_>, strategy: ProbeStrategy, signature: bool, budget: u64, rng: &mut ChaCha8Rng) -> Option<u64> {
    let zone = search_zone(s);
    let n = zone.end - zone.start;
    let stride = s.public().stack_pages.max(1);
    let phase = rng.gen_range(0..n);
    let mut k = 0u64;
    while s.cost().probes < budget {
        let page = match strategy {
            ProbeStrategy::UniformRandom => zone.start + rng.gen_range(0..n),
            ProbeStrategy::Linear => {
                // each pass visits one residue class; the next pass shifts by one
                let pass = k * stride / n;
                zone.start + (phase + k * stride + pass) % n
            }
        };
        k += 1;
        let addr = page_addr(page);
        let Some(first) = s.read(addr) else { continue };
        if !signature {
            return Some(addr);
        }
        // one word per sprayed frame is not a local; check a second spot
        if first == SPRAY_SIGNATURE || s.read(addr + PAGE_SIZE / 2) == Some(SPRAY_SIGNATURE) {
            return Some(addr);
        }
    }
    None
}

fn trial(cfg: &ProbeConfig, i: usize) -> Result<TrialOutcome, AttackError> {
    let seed = trial_seed(cfg.victim.seed, i, 0);
    let vc = cfg.victim.clone().seed(seed).threads(cfg.victim.threads + cfg.spray.threads);
    let mut victim = Victim::build(&vc)?;
    if cfg.spray.stack {
        victim.spray(SPRAY_SIGNATURE)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.victim.seed, i, 1));
    let mut surface = victim.surface();
    let claim = search(&mut surface, cfg.strategy, cfg.spray.stack, cfg.budget, &mut rng);
    let cost = surface.cost();
    let claims: Vec<u64> = claim.into_iter().collect();
    let verified = verify_claims(&claims, &victim.hidden_ranges());
    Ok(TrialOutcome { cost, claims, verified, metric: cost.probes as f64 })
}

/// Runs `cfg.trials` independent victims and searches each one.
pub fn brute_force_probe(cfg: &ProbeConfig) -> Result<AttackReport, AttackError> {
    cfg.victim.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials).into_par_iter().map(|i| trial(cfg, i)).collect::<Result<_, _>>()?;
    let attack = if cfg.spray.stack { Strategy::Spray } else { Strategy::Probe };
    Ok(AttackReport::from_trials(cfg.victim.kind, attack, cfg.victim.arch, &outcomes)
        .with_stat("threads_sprayed", cfg.spray.threads as f64)
        .with_stat("linear", (cfg.strategy == ProbeStrategy::Linear) as u8 as f64))
}
