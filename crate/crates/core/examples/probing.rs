//! Brute-force probing at scaled entropies, with and without spraying.

use retstack::arch::Arch;
use retstack::attacks::{brute_force_probe, ProbeConfig, ProbeStrategy, SchemeKind, Spray, VictimConfig};

fn main() {
    println!("uniform random probing against one safe stack");
    for bits in [8u32, 10, 12] {
        let cfg = ProbeConfig::new(VictimConfig::new(Arch::X86_64, SchemeKind::SafeStack).scaled(Some(bits)).seed(1), 400);
        let r = brute_force_probe(&cfg).unwrap();
        println!("  {bits:>2} bits: mean {:>8.1} probes (2^{bits} = {})", r.mean.unwrap(), 1u64 << bits);
    }

    let base = VictimConfig::new(Arch::X86_64, SchemeKind::SafeStack).scaled(Some(10)).seed(2);
    let mut linear = ProbeConfig::new(base.clone(), 400);
    linear.strategy = ProbeStrategy::Linear;
    println!("linear scan at 10 bits: mean {:.1}", brute_force_probe(&linear).unwrap().mean.unwrap());

    for threads in [0usize, 16, 64] {
        let mut p = ProbeConfig::new(base.clone(), 200);
        p.spray = Spray { threads, stack: false };
        println!("  {threads:>2} sprayed threads: mean {:.1}", brute_force_probe(&p).unwrap().mean.unwrap());
    }

    println!("stack spraying (search for planted data, 10^6 probes)");
    for kind in [SchemeKind::SafeStack, SchemeKind::AgStack, SchemeKind::ReturnStack] {
        let mut p = ProbeConfig::new(VictimConfig::new(Arch::X86_64, kind).scaled(Some(8)).seed(3), 1);
        p.spray = Spray { threads: 0, stack: true };
        p.budget = 1_000_000;
        let r = brute_force_probe(&p).unwrap();
        println!("  {kind:<12} found: {}  probes: {}", r.success, r.probes_issued);
    }
}
