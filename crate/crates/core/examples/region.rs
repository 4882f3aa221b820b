//! The return-stack region: a large no-access mapping in which small stacks
//! are opened at random offsets, with no bookkeeping besides the handles the
//! threads hold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retstack::arch::{Arch, PAGE_SIZE};
use retstack::region::{init_region, RegionParams};
use retstack::space::{create_layout, AddressSpace, LayoutConfig};

fn main() {
    let defaults = RegionParams::default();
    println!(
        "default region: 2^{} pages, {}-page stacks, capacity {}, {:.0} bits of placement entropy",
        defaults.size_pages.trailing_zeros(),
        defaults.stack_pages,
        defaults.capacity(),
        defaults.effective_entropy()
    );

    let mut space = AddressSpace::boot(create_layout(LayoutConfig::defaults(Arch::X86_64), 3).unwrap());
    let region = init_region(&mut space, RegionParams::with_size_log2(12)).unwrap();
    println!("scaled region at {:#x}, {} pages", region.base, region.size_pages);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut live = Vec::new();
    let mut retries = 0;
    for _ in 0..2000 {
        if live.len() < 64 && (live.is_empty() || rng.gen_bool(0.55)) {
            let (h, rounds) = region.create_stack_counted(&mut space, &mut rng).unwrap();
            retries += rounds - 1;
            live.push(h);
        } else {
            let h = live.swap_remove(rng.gen_range(0..live.len()));
            region.destroy_stack(&mut space, h).unwrap();
        }
    }
    println!("{} live stacks after 2000 operations, {retries} placement retries", live.len());

    // The region itself records nothing; a page sweep recovers the same set.
    let mut held: Vec<u64> = live.iter().map(|h| h.base).collect();
    held.sort_unstable();
    let swept = region.probe_sweep(&space);
    println!("probe sweep agrees with the live handles: {}", swept == held);
    for w in held.windows(2) {
        assert!(w[1] - w[0] > region.stack_pages * PAGE_SIZE, "stacks always keep a guard page between them");
    }
}
