//! Finding a hidden stack through a large neighbour: locate a library
//! mapped right above it, then look just below the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::surface::AttackSurface;
use super::victim::{Victim, VictimConfig};
use super::{trial_seed, AttackError, AttackReport, Strategy, TrialOutcome};
use crate::arch::{page_addr, PAGE_SIZE};

/// Pages searched below the library.
pub const ADJACENCY_WINDOW: u64 = 1 << 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyConfig {
    /// Library size and thread count come from here; the default library
    /// spans 2^12 pages.
    pub victim: VictimConfig,
    pub trials: usize,
    pub budget: u64,
}

impl AdjacencyConfig {
    pub fn new(victim: VictimConfig, trials: usize) -> Self {
        let victim = if victim.library_pages == 0 { victim.library(1 << 12) } else { victim };
        AdjacencyConfig { victim, trials, budget: 1 << 24 }
    }
}

/// Returns the claimed stack range, as a start address.
fn attack(s: &mut AttackSurface<'_>, budget: u64, rng: &mut ChaCha8Rng) -> Option<(u64, u64)> {
    let p = s.public().clone();
    let stack_pages = p.stack_pages.max(1);
    // the library is the first mapping below the randomized mmap base
    let zone = p.mmap_window(p.library_pages);
    let n = zone.end - zone.start;
    let anchor = loop {
        if s.cost().probes >= budget {
            return None;
        }
        let page = zone.start + rng.gen_range(0..n);
        if s.read(page_addr(page)).is_some() {
            break page;
        }
    };
    let mut top = anchor + 1;
    while s.read(page_addr(top)).is_some() {
        top += 1;
    }
    let lib_base = top.checked_sub(p.library_pages)?;
    (1..=ADJACENCY_WINDOW.min(lib_base))
        .map(|d| lib_base - d)
        .find(|&page| s.read(page_addr(page)).is_some())
        .map(|hi| (page_addr(hi + 1 - stack_pages), stack_pages * PAGE_SIZE))
}

fn trial(cfg: &AdjacencyConfig, i: usize) -> Result<TrialOutcome, AttackError> {
    let vc = cfg.victim.clone().seed(trial_seed(cfg.victim.seed, i, 0));
    let mut victim = Victim::build(&vc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.victim.seed, i, 1));
    let mut surface = victim.surface();
    let claim = attack(&mut surface, cfg.budget, &mut rng);
    let cost = surface.cost();
    let hidden = victim.hidden_ranges();
    // the whole stack must be pinned down, not just one page of it
    let exact = claim.is_some_and(|(start, len)| hidden.iter().any(|r| r.start == start && r.end == start + len));
    let claims: Vec<u64> = claim.map(|c| c.0).into_iter().collect();
    Ok(TrialOutcome { cost, verified: if exact { claims.len() } else { 0 }, claims, metric: cost.probes as f64 })
}

pub fn adjacency_attack(cfg: &AdjacencyConfig) -> Result<AttackReport, AttackError> {
    cfg.victim.validate()?;
    if cfg.victim.isolate {
        return Err(AttackError::Config("adjacency needs a victim without isolation pages".into()));
    }
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials).into_par_iter().map(|i| trial(cfg, i)).collect::<Result<_, _>>()?;
    Ok(AttackReport::from_trials(cfg.victim.kind, Strategy::Adjacency, cfg.victim.arch, &outcomes)
        .with_stat("library_pages", cfg.victim.library_pages as f64)
        .with_stat("window_pages", ADJACENCY_WINDOW as f64))
}
