//! Every attack against every dual-stack scheme, as a table.

use retstack::arch::Arch;
use retstack::attacks::{resilience_matrix, MatrixConfig};

fn main() {
    for arch in Arch::ALL {
        let m = resilience_matrix(&MatrixConfig::new(arch, 1)).unwrap();
        print!("{}", m.render_text());
        for t in &m.thread_spraying {
            println!(
                "  thread spraying vs {}: {:.0} -> {:.0} probes, {:.1} bits left at full scale",
                t.scheme,
                t.single_mean.unwrap_or(f64::NAN),
                t.sprayed_mean.unwrap_or(f64::NAN),
                t.full_scale_bits
            );
        }
        println!();
    }
}
