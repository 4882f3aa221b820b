use std::ops::Range;

use serde::Serialize;

use super::victim::{Victim, VictimConfig};
use super::{AttackError, AttackReport, Strategy, TrialOutcome};
use crate::space::AddressSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LeakHit {
    /// Where the pointer was found.
    #[serde(with = "crate::hex")]
    pub addr: u64,
    /// The hidden address it reveals.
    #[serde(with = "crate::hex")]
    pub value: u64,
}

/// Readable words outside `hidden` whose value points into `hidden`.
pub fn scan_pointer_leaks(space: &AddressSpace, hidden: &[Range<u64>]) -> Vec<LeakHit> {
    let inside = |a: u64| hidden.iter().any(|r| r.contains(&a));
    space
        .readable_words()
        .map(|(addr, c)| LeakHit { addr, value: c.value() })
        .filter(|h| !inside(h.addr) && inside(h.value))
        .collect()
}

/// Runs the victim's workload and reports every leaked hidden pointer.
pub fn pointer_leak_attack(cfg: &VictimConfig) -> Result<AttackReport, AttackError> {
    let mut v = Victim::build(cfg)?;
    v.run_workload()?;
    let hidden = v.hidden_ranges();
    let hits = scan_pointer_leaks(v.machine().space(), &hidden);
    let outcome = TrialOutcome {
        claims: hits.iter().map(|h| h.value).collect(),
        verified: hits.len(),
        metric: hits.len() as f64,
        ..Default::default()
    };
    Ok(AttackReport::from_trials(cfg.kind, Strategy::Leak, cfg.arch, &[outcome]).with_stat("hits", hits.len() as f64))
}
