//! Randomized process layouts and their entropy, for both architectures.

use retstack::arch::Arch;
use retstack::space::{create_layout, AddressSpace, LayoutConfig};

fn main() {
    for arch in Arch::ALL {
        let config = LayoutConfig::defaults(arch);
        println!("{arch}");
        for row in config.entropy_table() {
            println!("  {:<13} interval {:#15x}  {} bits, {} bits of entropy", row.name, row.interval, row.bits, row.entropy);
        }
        for seed in 0..3 {
            let l = create_layout(config, seed).expect("default layouts are valid");
            println!(
                "  seed {seed}: code {:#x}  heap {:#x}  mmap {:#x}  stack {:#x}",
                l.code_base, l.heap_base, l.mmap_base, l.stack_base
            );
        }
    }

    // A booted space maps the image and the main stack; everything else
    // comes from mmap below the randomized base.
    let layout = create_layout(LayoutConfig::defaults(Arch::X86_64).with_pie(false), 1).unwrap();
    let space = AddressSpace::boot(layout);
    println!("non-PIE x86-64 process:");
    for m in space.mappings() {
        println!("  {:#014x}..{:#014x} {:>6} pages {}", m.base_addr(), m.end_addr(), m.pages(), m.perm.as_str());
    }
}
