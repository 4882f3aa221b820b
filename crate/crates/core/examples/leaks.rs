//! Scanning attacker-readable memory for pointers into hidden stacks after
//! a workload with library calls, `setjmp` and exceptions.

use retstack::arch::Arch;
use retstack::attacks::{pointer_leak_attack, SchemeKind, VictimConfig};
use retstack::machine::LibraryMode;

fn main() {
    for kind in SchemeKind::ALL {
        for libs in [LibraryMode::Secure, LibraryMode::Aware, LibraryMode::Compatible] {
            let cfg = VictimConfig::new(Arch::X86_64, kind).threads(2).libs(libs);
            let r = pointer_leak_attack(&cfg).unwrap();
            println!("{kind:<12} {libs:<11} {:>3} leaked pointer(s)", r.stats["hits"]);
        }
    }
}
