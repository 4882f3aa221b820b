//! Memory-allocation oracles: map every hole with ephemeral allocations,
//! pin it, and read hidden objects off the gaps between pins.

use retstack::arch::Arch;
use retstack::attacks::{allocation_oracle, allocation_oracle_attack, OracleConfig, SchemeKind, Victim, VictimConfig};

fn main() {
    let mut v = Victim::build(&VictimConfig::new(Arch::X86_64, SchemeKind::SafeStack).threads(3).isolate(true)).unwrap();
    let out = allocation_oracle(&mut v.surface(), 1 << 47, 64);
    println!("holes found (largest first):");
    for h in &out.holes {
        println!("  {:#014x} {:>12} pages  {} EAP calls", h.base, h.pages, h.eap_calls);
    }
    println!("extents between pins:");
    for (base, pages) in &out.extents {
        println!("  {base:#014x} {pages:>12} pages");
    }
    println!("claimed stacks: {}", out.claims.len());

    for kind in [SchemeKind::SafeStack, SchemeKind::ReturnStack] {
        let r = allocation_oracle_attack(&OracleConfig::new(VictimConfig::new(Arch::X86_64, kind).threads(7))).unwrap();
        println!(
            "{kind:<12} localized {} of {} hidden stacks with {} oracle calls",
            r.stats["localized"], r.stats["hidden_stacks"], r.oracle_invocations
        );
    }
}
