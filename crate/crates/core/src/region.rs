//! The return-stack region.
//!
//! One huge mapping, allocated once and left without any access permission.
//! Return stacks are carved out of it by flipping page permissions, and the
//! only way to learn where they are is to probe page readability. Nothing in
//! [`RegionHandle`] (or anywhere else in the process) records a stack
//! location.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::arch::{page_addr, page_of, PAGE_SIZE};
use crate::space::{AddressSpace, Permission, ProbeResult, SpaceError, Zone};

/// Random candidate bases tried before giving up on a full region.
pub const RETRY_BUDGET: u32 = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegionError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("no free slot found after {attempts} random candidates")]
    Exhausted { attempts: u32 },
    #[error("region of {size_pages} pages cannot hold a {window}-page stack window")]
    TooSmall { size_pages: u64, window: u64 },
    #[error("stack at {0:#x} is not live")]
    NotLive(u64),
    #[error("stack at {0:#x} lies outside the region")]
    Foreign(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionParams {
    pub size_pages: u64,
    pub stack_pages: u64,
    pub guard_pages: u64,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams { size_pages: 1 << 32, stack_pages: 1 << 3, guard_pages: 1 }
    }
}

impl RegionParams {
    pub fn with_size_log2(bits: u32) -> Self {
        RegionParams { size_pages: 1 << bits, ..Default::default() }
    }

    pub fn window_pages(&self) -> u64 {
        self.stack_pages + 2 * self.guard_pages
    }

    /// Slots available with one shared guard page between neighbours.
    pub fn capacity(&self) -> u64 {
        self.size_pages.saturating_sub(self.guard_pages) / (self.stack_pages + self.guard_pages)
    }

    /// Placement entropy of a stack inside the region, in bits.
    pub fn effective_entropy(&self) -> f64 {
        (self.size_pages as f64).log2() - (self.stack_pages as f64).log2()
    }
}

/// Base and geometry of the region. Deliberately nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionHandle {
    #[serde(with = "crate::hex")]
    pub base: u64,
    pub size_pages: u64,
    pub stack_pages: u64,
    pub guard_pages: u64,
}

/// A live return stack. Empty-ascending: `top` starts at `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StackHandle {
    pub base: u64,
    pub top: u64,
}

impl StackHandle {
    pub fn end(&self, stack_pages: u64) -> u64 {
        self.base + stack_pages * PAGE_SIZE
    }
}

/// Maps the region in the mmap space with no access permissions.
pub fn init_region(space: &mut AddressSpace, params: RegionParams) -> Result<RegionHandle, RegionError> {
    if params.size_pages < params.window_pages() || params.stack_pages == 0 {
        return Err(RegionError::TooSmall { size_pages: params.size_pages, window: params.window_pages() });
    }
    let base = space.map(params.size_pages, Permission::NONE, Zone::MmapSpace)?;
    Ok(RegionHandle {
        base,
        size_pages: params.size_pages,
        stack_pages: params.stack_pages,
        guard_pages: params.guard_pages,
    })
}

impl RegionHandle {
    pub fn params(&self) -> RegionParams {
        RegionParams { size_pages: self.size_pages, stack_pages: self.stack_pages, guard_pages: self.guard_pages }
    }

    pub fn end(&self) -> u64 {
        self.base + self.size_pages * PAGE_SIZE
    }

    pub fn contains(&self, addr: u64) -> bool {
        (self.base..self.end()).contains(&addr)
    }

    pub fn capacity(&self) -> u64 {
        self.params().capacity()
    }

    pub fn effective_entropy(&self) -> f64 {
        self.params().effective_entropy()
    }

    fn window_is_free(&self, space: &AddressSpace, first_page: u64) -> bool {
        (first_page..first_page + self.params().window_pages())
            .all(|p| space.write_probe(page_addr(p)) == ProbeResult::NotReadable)
    }

    /// Probes random page-aligned windows until `stack + 2 * guard`
    /// consecutive non-readable pages are found, then opens the middle ones.
    pub fn create_stack<R: Rng + ?Sized>(
        &self,
        space: &mut AddressSpace,
        rng: &mut R,
    ) -> Result<StackHandle, RegionError> {
        self.create_stack_counted(space, rng).map(|(h, _)| h)
    }

    /// Like [`create_stack`](Self::create_stack), also returning how many
    /// candidate windows were probed.
    pub fn create_stack_counted<R: Rng + ?Sized>(
        &self,
        space: &mut AddressSpace,
        rng: &mut R,
    ) -> Result<(StackHandle, u32), RegionError> {
        let window = self.params().window_pages();
        let first = page_of(self.base);
        let last_start = self.size_pages - window;
        for round in 1..=RETRY_BUDGET {
            let candidate = first + rng.gen_range(0..=last_start);
            if self.window_is_free(space, candidate) {
                let base = page_addr(candidate + self.guard_pages);
                space.protect(base, self.stack_pages, Permission::RW)?;
                return Ok((StackHandle { base, top: base }, round));
            }
        }
        Err(RegionError::Exhausted { attempts: RETRY_BUDGET })
    }

    pub fn destroy_stack(&self, space: &mut AddressSpace, stack: StackHandle) -> Result<(), RegionError> {
        let end = stack.end(self.stack_pages);
        if !self.contains(stack.base) || end > self.end() {
            return Err(RegionError::Foreign(stack.base));
        }
        let live = (0..self.stack_pages)
            .all(|i| space.write_probe(stack.base + i * PAGE_SIZE) == ProbeResult::Readable);
        if !live {
            return Err(RegionError::NotLive(stack.base));
        }
        space.protect(stack.base, self.stack_pages, Permission::NONE)?;
        Ok(())
    }

    /// Rebuilds the set of live stack bases from a page-by-page probe sweep.
    /// Cost is linear in the region size, so only useful on scaled regions.
    pub fn probe_sweep(&self, space: &AddressSpace) -> Vec<u64> {
        let mut bases = Vec::new();
        let mut run_start = None;
        for i in 0..=self.size_pages {
            let readable =
                i < self.size_pages && space.write_probe(self.base + i * PAGE_SIZE) == ProbeResult::Readable;
            match (readable, run_start) {
                (true, None) => run_start = Some(i),
                (false, Some(s)) => {
                    let mut cursor = s;
                    while cursor + self.stack_pages <= i {
                        bases.push(self.base + cursor * PAGE_SIZE);
                        cursor += self.stack_pages;
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
        bases
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Arch;
    use crate::space::{create_layout, LayoutConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(size_log2: u32, seed: u64) -> (AddressSpace, RegionHandle, ChaCha8Rng) {
        let mut space = AddressSpace::boot(create_layout(LayoutConfig::defaults(Arch::X86_64), seed).unwrap());
        let region = init_region(&mut space, RegionParams::with_size_log2(size_log2)).unwrap();
        (space, region, ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn default_geometry() {
        let p = RegionParams::default();
        assert_eq!(p.size_pages * PAGE_SIZE, 1 << 44);
        assert_eq!(p.effective_entropy(), 29.0);
        assert_eq!(p.capacity(), 477_218_588);
        assert_eq!(p.capacity(), ((1u64 << 32) - 1) / 9);
    }

    #[test]
    fn scaled_entropy_formula() {
        assert_eq!(RegionParams::with_size_log2(20).effective_entropy(), 17.0);
    }

    #[test]
    fn capacity_exactly_one_slot() {
        let p = RegionParams { size_pages: 10, stack_pages: 8, guard_pages: 1 };
        assert_eq!(p.capacity(), 1);
    }

    #[test]
    fn capacity_matches_greedy_packing() {
        for size in 10..=200u64 {
            let p = RegionParams { size_pages: size, stack_pages: 8, guard_pages: 1 };
            // greedy left-to-right placement, shared guards between neighbours
            let mut occupied = vec![false; size as usize];
            let mut count = 0;
            let mut page = 0usize;
            while page + 10 <= size as usize {
                if occupied[page..page + 10].iter().all(|o| !o) {
                    occupied[page + 1..page + 9].iter_mut().for_each(|o| *o = true);
                    count += 1;
                    page += 9;
                } else {
                    page += 1;
                }
            }
            assert_eq!(p.capacity(), count, "size {size}");
        }
    }

    #[test]
    fn fresh_region_has_no_readable_pages() {
        let (space, region, _) = setup(16, 1);
        assert!(region.probe_sweep(&space).is_empty());
        let readable = (0..region.size_pages)
            .filter(|i| space.write_probe(region.base + i * PAGE_SIZE) == ProbeResult::Readable)
            .count();
        assert_eq!(readable, 0);
    }

    #[test]
    fn first_creation_takes_one_round() {
        for seed in 0..20 {
            let (mut space, region, mut rng) = setup(20, seed);
            let (stack, rounds) = region.create_stack_counted(&mut space, &mut rng).unwrap();
            assert_eq!(rounds, 1);
            assert_eq!(stack.top, stack.base);
            assert!(region.contains(stack.base - PAGE_SIZE));
            assert!(region.contains(stack.end(8)));
        }
    }

    #[test]
    fn two_stacks_are_separated() {
        let (mut space, region, mut rng) = setup(12, 3);
        let a = region.create_stack(&mut space, &mut rng).unwrap();
        let b = region.create_stack(&mut space, &mut rng).unwrap();
        let (lo, hi) = if a.base < b.base { (a, b) } else { (b, a) };
        assert!(lo.end(8) + PAGE_SIZE <= hi.base);
    }

    #[test]
    fn fill_until_exhausted() {
        let (mut space, region, mut rng) = setup(10, 11);
        let mut live = Vec::new();
        loop {
            match region.create_stack(&mut space, &mut rng) {
                Ok(h) => live.push(h),
                Err(RegionError::Exhausted { .. }) => break,
                Err(e) => panic!("{e}"),
            }
        }
        let bound = region.capacity() as f64 * 0.5;
        assert!(live.len() as f64 >= bound, "{} < {bound}", live.len());
        for (i, a) in live.iter().enumerate() {
            for b in &live[i + 1..] {
                assert!(a.end(8) + PAGE_SIZE <= b.base || b.end(8) + PAGE_SIZE <= a.base);
            }
        }
    }

    #[test]
    fn destroy_restores_empty_region() {
        let (mut space, region, mut rng) = setup(12, 5);
        let h = region.create_stack(&mut space, &mut rng).unwrap();
        space.write(h.base, crate::space::PageContent::Data(1)).unwrap();
        region.destroy_stack(&mut space, h).unwrap();
        assert!(region.probe_sweep(&space).is_empty());
        assert!(space.read(h.base).is_err());
        assert_eq!(region.destroy_stack(&mut space, h), Err(RegionError::NotLive(h.base)));
    }

    #[test]
    fn mapped_extent_never_changes() {
        let (mut space, region, mut rng) = setup(12, 8);
        let extent = |s: &AddressSpace| {
            s.mappings()
                .filter(|m| region.contains(m.base_addr()))
                .map(|m| m.pages())
                .sum::<u64>()
        };
        let before = extent(&space);
        let hs: Vec<_> = (0..20).map(|_| region.create_stack(&mut space, &mut rng).unwrap()).collect();
        assert_eq!(extent(&space), before);
        for h in hs {
            region.destroy_stack(&mut space, h).unwrap();
        }
        assert_eq!(extent(&space), before);
        assert_eq!(space.mappings().filter(|m| region.contains(m.base_addr())).count(), 1);
    }

    #[test]
    fn sweep_recovers_handles() {
        let (mut space, region, mut rng) = setup(12, 21);
        let mut hs: Vec<u64> = (0..30).map(|_| region.create_stack(&mut space, &mut rng).unwrap().base).collect();
        hs.sort_unstable();
        assert_eq!(region.probe_sweep(&space), hs);
    }
}
