use std::ops::{Add, Range};

use serde::Serialize;

use super::SchemeKind;
use crate::arch::{page_of, Arch, PAGE_SIZE};
use crate::space::LayoutConfig;
use crate::space::{AddressSpace, Permission, ProbeResult, Zone};

/// What an attacker may assume: kernel and scheme constants, never seeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PublicInfo {
    pub arch: Arch,
    pub kind: SchemeKind,
    pub layout: LayoutConfig,
    /// Hidden stack size in pages (0 without hidden stacks).
    pub stack_pages: u64,
    pub library_pages: u64,
    /// Threads the victim runs besides the main thread.
    pub threads: usize,
    /// The return-stack region, which is assumed to be disclosed (an
    /// allocation oracle finds it as one opaque allocation).
    #[serde(skip)]
    pub region: Option<Range<u64>>,
}

impl PublicInfo {
    /// Pages in which the first `mmap` allocations may start, widened by
    /// `extra` pages below the lowest possible mmap base.
    pub fn mmap_window(&self, extra: u64) -> Range<u64> {
        let top = page_of(self.layout.mmap_top());
        let span = (self.layout.mmap_offset_interval / PAGE_SIZE) + extra;
        top - span..top
    }
}

/// Attacker-side bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    /// Reads and write probes.
    pub probes: u64,
    pub faults: u64,
    /// EAP and PAP invocations.
    pub oracle: u64,
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost { probes: self.probes + o.probes, faults: self.faults + o.faults, oracle: self.oracle + o.oracle }
    }
}

/// The only handle attack code gets on a victim.
pub struct AttackSurface<'a> {
    space: &'a mut AddressSpace,
    public: PublicInfo,
    cost: Cost,
}

impl<'a> AttackSurface<'a> {
    pub fn new(space: &'a mut AddressSpace, public: PublicInfo) -> Self {
        AttackSurface { space, public, cost: Cost::default() }
    }

    pub fn public(&self) -> &PublicInfo {
        &self.public
    }

    pub fn cost(&self) -> Cost {
        self.cost
    }

    /// Arbitrary read; a fault is survived and counted.
    pub fn read(&mut self, addr: u64) -> Option<u64> {
        self.cost.probes += 1;
        match self.space.read(addr) {
            Ok(v) => Some(v),
            Err(_) => {
                self.cost.faults += 1;
                None
            }
        }
    }

    /// Side-effect-free readability test.
    pub fn write_probe(&mut self, addr: u64) -> bool {
        self.cost.probes += 1;
        self.space.write_probe(addr) == ProbeResult::Readable
    }

    /// Ephemeral allocation: does an `mmap` of `pages` succeed right now?
    pub fn eap(&mut self, pages: u64) -> bool {
        self.cost.oracle += 1;
        match self.space.map(pages, Permission::RW, Zone::MmapSpace) {
            Ok(base) => {
                self.space.unmap(base, pages).expect("just mapped");
                true
            }
            Err(_) => false,
        }
    }

    /// Persistent allocation; the victim reports where it landed.
    pub fn pap(&mut self, pages: u64) -> Option<u64> {
        self.cost.oracle += 1;
        self.space.map(pages, Permission::RW, Zone::MmapSpace).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::create_layout;

    #[test]
    fn costs_match_the_space_audit() {
        let layout = create_layout(LayoutConfig::defaults(Arch::X86_64), 1).unwrap();
        let mut space = AddressSpace::boot(layout.clone());
        let before = space.audit();
        let public = PublicInfo {
            arch: Arch::X86_64,
            kind: SchemeKind::Regular,
            layout: layout.config,
            stack_pages: 0,
            library_pages: 0,
            threads: 0,
            region: None,
        };
        let code = layout.code_base;
        let mut s = AttackSurface::new(&mut space, public);
        assert!(s.read(code).is_some());
        assert!(s.read(0).is_none());
        assert!(s.write_probe(code));
        assert!(!s.write_probe(PAGE_SIZE));
        assert!(s.eap(4));
        let pinned = s.pap(4).unwrap();
        let cost = s.cost();
        assert_eq!(cost, Cost { probes: 4, faults: 1, oracle: 2 });
        let after = space.audit();
        assert_eq!(after.reads + after.probes - before.reads - before.probes, cost.probes);
        assert_eq!(space.find(page_of(pinned)).unwrap().pages(), 4);
    }
}
