//! Memory-allocation oracles: hole sizes by binary search over ephemeral
//! allocations, holes pinned by persistent ones, hidden objects inferred
//! from what is left.

use serde::Serialize;

use super::surface::AttackSurface;
use super::victim::{Victim, VictimConfig};
use super::{AttackError, AttackReport, Strategy, TrialOutcome};
use crate::arch::{page_of, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HoleFinding {
    #[serde(with = "crate::hex")]
    pub base: u64,
    pub pages: u64,
    /// EAP calls the binary search needed.
    pub eap_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleOutcome {
    /// Holes in discovery order (largest first).
    pub holes: Vec<HoleFinding>,
    /// Mapped extents between consecutive pins, as `(base, pages)`.
    pub extents: Vec<(u64, u64)>,
    /// Extents whose size matches the scheme's stack size.
    pub claims: Vec<(u64, u64)>,
    /// Every hole was pinned before the PAP budget ran out.
    pub complete: bool,
}

/// Largest `s < max_pages` for which an EAP of `s` pages succeeds, and the
/// number of EAP calls spent. 0 when not even one page fits.
pub fn largest_hole(s: &mut AttackSurface<'_>, max_pages: u64) -> (u64, u64) {
    let (mut lo, mut hi) = (0u64, max_pages);
    let mut calls = 0;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        calls += 1;
        if s.eap(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, calls)
}

/// Finds and pins holes until none are left or `pap_budget` PAPs are spent,
/// then reads the layout off the pins.
pub fn allocation_oracle(s: &mut AttackSurface<'_>, eap_max: u64, pap_budget: u64) -> OracleOutcome {
    let max_pages = eap_max / PAGE_SIZE;
    let mut holes = Vec::new();
    let mut complete = false;
    for _ in 0..pap_budget {
        let (pages, eap_calls) = largest_hole(s, max_pages);
        if pages == 0 {
            complete = true;
            break;
        }
        let Some(base) = s.pap(pages) else { break };
        holes.push(HoleFinding { base, pages, eap_calls });
    }
    let mut pins: Vec<(u64, u64)> = holes.iter().map(|h| (page_of(h.base), h.pages)).collect();
    pins.sort_unstable();
    let extents: Vec<(u64, u64)> = pins
        .windows(2)
        .filter(|w| w[0].0 + w[0].1 < w[1].0)
        .map(|w| (w[0].0 + w[0].1, w[1].0 - w[0].0 - w[0].1))
        .collect();
    let stack_pages = s.public().stack_pages;
    let claims = if complete && stack_pages > 0 {
        extents.iter().filter(|e| e.1 == stack_pages).map(|&(b, p)| (b * PAGE_SIZE, p)).collect()
    } else {
        Vec::new()
    };
    let extents = extents.into_iter().map(|(b, p)| (b * PAGE_SIZE, p)).collect();
    OracleOutcome { holes, extents, claims, complete }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleConfig {
    /// Isolation is always switched on for the victim.
    pub victim: VictimConfig,
    /// Exclusive bound on EAP sizes, in bytes.
    pub eap_max: u64,
    pub pap_budget: u64,
}

impl OracleConfig {
    pub fn new(victim: VictimConfig) -> Self {
        let eap_max = victim.arch.space_size();
        OracleConfig { victim, eap_max, pap_budget: 256 }
    }
}

pub fn allocation_oracle_attack(cfg: &OracleConfig) -> Result<AttackReport, AttackError> {
    if cfg.eap_max < PAGE_SIZE {
        return Err(AttackError::Config(format!("eap_max {} is below one page", cfg.eap_max)));
    }
    let mut victim = Victim::build(&cfg.victim.clone().isolate(true))?;
    let mut surface = victim.surface();
    let out = allocation_oracle(&mut surface, cfg.eap_max, cfg.pap_budget);
    let cost = surface.cost();
    let hidden = victim.hidden_ranges();
    let localized =
        out.claims.iter().filter(|(b, p)| hidden.iter().any(|r| r.start == *b && r.end == b + p * PAGE_SIZE)).count();
    let outcome = TrialOutcome {
        cost,
        claims: out.claims.iter().map(|c| c.0).collect(),
        verified: localized,
        metric: cost.oracle as f64,
    };
    Ok(AttackReport::from_trials(cfg.victim.kind, Strategy::Oracle, cfg.victim.arch, &[outcome])
        .with_stat("holes", out.holes.len() as f64)
        .with_stat("extents", out.extents.len() as f64)
        .with_stat("localized", localized as f64)
        .with_stat("hidden_stacks", hidden.len() as f64)
        .with_stat("complete", out.complete as u8 as f64))
}
