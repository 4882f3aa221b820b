//! Prologue and epilogue listings for each scheme, and the per-function
//! instruction overhead of return stacks.

use retstack::arch::Arch;
use retstack::instrument::{emit, overhead};
use retstack::machine::{FuncDesc, Scheme};

fn main() {
    let f = FuncDesc::canonical();
    for arch in Arch::ALL {
        for scheme in [Scheme::Regular, Scheme::ReturnStack] {
            let e = emit(arch, &f, scheme).unwrap();
            println!("{arch} {scheme} ({} instructions)", e.len());
            print!("{}", e.listing_text());
            println!();
        }
    }
    for arch in Arch::ALL {
        let deltas: Vec<String> = (0..6).map(|n| format!("{:+}", overhead(arch, n))).collect();
        println!("{arch} overhead for 0..6 saved registers: {}", deltas.join(" "));
    }
}
