//! Sparse model of a 64-bit process address space.
//!
//! Mappings are kept in an ordered map keyed by first page, so the full
//! 2^35 / 2^36 page spaces (and the 2^32-page return-stack region) cost a
//! handful of entries. Memory contents are stored per 8-byte word and only
//! for words that were ever written.

mod layout;
mod serial;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{is_page_aligned, page_addr, page_of, Arch, PAGE_SIZE, WORD};

pub use layout::{
    create_layout, EntropyRow, LayoutConfig, LayoutError, MemoryLayout, CODE_PAGES, DATA_PAGES,
    MAIN_STACK_PAGES, MMAP_MIN_ADDR, NON_PIE_LOAD_BASE, STACK_GAP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permission {
    pub readable: bool,
    pub writable: bool,
}

impl Permission {
    pub const NONE: Permission = Permission { readable: false, writable: false };
    pub const READ: Permission = Permission { readable: true, writable: false };
    pub const RW: Permission = Permission { readable: true, writable: true };

    pub fn as_str(self) -> &'static str {
        match (self.readable, self.writable) {
            (true, true) => "rw",
            (true, false) => "r-",
            (false, true) => "-w",
            (false, false) => "--",
        }
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Typed content of a memory word (or the fill of an untouched mapping).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PageContent {
    #[default]
    Zero,
    CodePointer(u64),
    Data(u64),
    ReturnAddress(u64),
    Guard,
}

impl PageContent {
    /// Raw 64-bit value as an attacker reading memory would see it.
    pub fn value(self) -> u64 {
        match self {
            PageContent::Zero | PageContent::Guard => 0,
            PageContent::CodePointer(v) | PageContent::Data(v) | PageContent::ReturnAddress(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mapping {
    pub start: u64,
    pub end: u64,
    pub perm: Permission,
    pub content: PageContent,
}

impl Mapping {
    pub fn pages(&self) -> u64 {
        self.end - self.start
    }

    pub fn base_addr(&self) -> u64 {
        page_addr(self.start)
    }

    pub fn end_addr(&self) -> u64 {
        page_addr(self.end)
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    end: u64,
    perm: Permission,
    content: PageContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    /// Top-down first fit below the randomized mmap base.
    MmapSpace,
    /// Grows upward from the randomized heap base.
    Heap,
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Unmapped,
    NotReadable,
    NotWritable,
}

/// A non-fatal access fault. The space is left untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{kind:?} fault at {addr:#x}")]
pub struct Fault {
    pub addr: u64,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write(PageContent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeResult {
    Readable,
    NotReadable,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("cannot map zero pages")]
    ZeroPages,
    #[error("address {0:#x} is not page aligned")]
    Misaligned(u64),
    #[error("no free range of {pages} pages in zone")]
    OutOfSpace { pages: u64 },
    #[error("fixed mapping at {0:#x} collides with an existing mapping")]
    Collision(u64),
    #[error("range at {0:#x} is not fully mapped")]
    NotMapped(u64),
    #[error("range at {0:#x} extends past the end of the address space")]
    OutOfRange(u64),
}

/// Per-space access accounting. Cloning a space copies the counters.
#[derive(Debug, Default)]
pub struct Audit {
    reads: AtomicU64,
    writes: AtomicU64,
    probes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuditSnapshot {
    pub reads: u64,
    pub writes: u64,
    pub probes: u64,
}

impl Clone for Audit {
    fn clone(&self) -> Self {
        let s = self.snapshot();
        Audit {
            reads: AtomicU64::new(s.reads),
            writes: AtomicU64::new(s.writes),
            probes: AtomicU64::new(s.probes),
        }
    }
}

impl Audit {
    pub fn snapshot(&self) -> AuditSnapshot {
        AuditSnapshot {
            reads: self.reads.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            probes: self.probes.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AddressSpace {
    layout: MemoryLayout,
    ranges: BTreeMap<u64, Entry>,
    words: BTreeMap<u64, PageContent>,
    brk: u64,
    audit: Audit,
}

impl AddressSpace {
    /// An empty space: nothing mapped yet.
    pub fn new(layout: MemoryLayout) -> Self {
        let brk = page_of(layout.heap_base);
        AddressSpace { layout, ranges: BTreeMap::new(), words: BTreeMap::new(), brk, audit: Audit::default() }
    }

    /// A space with the executable image and the main thread's stack mapped.
    pub fn boot(layout: MemoryLayout) -> Self {
        let mut space = AddressSpace::new(layout);
        let l = space.layout.clone();
        space
            .map(CODE_PAGES, Permission::READ, Zone::Fixed(l.code_base))
            .expect("code image fits");
        space
            .map(DATA_PAGES, Permission::RW, Zone::Fixed(l.data_base()))
            .expect("data image fits");
        space
            .map(MAIN_STACK_PAGES, Permission::RW, Zone::Fixed(l.stack_base - MAIN_STACK_PAGES * PAGE_SIZE))
            .expect("main stack fits");
        space
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn arch(&self) -> Arch {
        self.layout.arch()
    }

    pub fn audit(&self) -> AuditSnapshot {
        self.audit.snapshot()
    }

    pub fn mappings(&self) -> impl Iterator<Item = Mapping> + '_ {
        self.ranges
            .iter()
            .map(|(&start, e)| Mapping { start, end: e.end, perm: e.perm, content: e.content })
    }

    pub fn mapping_count(&self) -> usize {
        self.ranges.len()
    }

    /// Mapping containing `page`, if any.
    pub fn find(&self, page: u64) -> Option<Mapping> {
        let (&start, e) = self.ranges.range(..=page).next_back()?;
        (e.end > page).then_some(Mapping { start, end: e.end, perm: e.perm, content: e.content })
    }

    pub fn perm_at(&self, addr: u64) -> Option<Permission> {
        self.find(page_of(addr)).map(|m| m.perm)
    }

    fn overlaps(&self, start: u64, end: u64) -> bool {
        if let Some((_, e)) = self.ranges.range(..start).next_back() {
            if e.end > start {
                return true;
            }
        }
        self.ranges.range(start..end).next().is_some()
    }

    fn fully_mapped(&self, start: u64, end: u64) -> bool {
        let mut cursor = start;
        while cursor < end {
            match self.find(cursor) {
                Some(m) => cursor = m.end,
                None => return false,
            }
        }
        true
    }

    pub fn mmap_floor_page(&self) -> u64 {
        page_of(MMAP_MIN_ADDR)
    }

    pub fn mmap_ceiling_page(&self) -> u64 {
        page_of(self.layout.mmap_base)
    }

    /// Highest gap of at least `pages` below the mmap base.
    fn find_mmap_slot(&self, pages: u64) -> Option<u64> {
        let floor = self.mmap_floor_page();
        let mut hi = self.mmap_ceiling_page();
        for (&start, e) in self.ranges.range(..hi).rev() {
            if hi <= floor {
                return None;
            }
            let lo = e.end.max(floor);
            if hi > lo && hi - lo >= pages {
                return Some(hi - pages);
            }
            hi = hi.min(start);
        }
        (hi > floor && hi - floor >= pages).then(|| hi - pages)
    }

    /// Unmapped gaps inside `[lo, hi)` (pages), as `(start, pages)`.
    pub fn holes_in(&self, lo: u64, hi: u64) -> Vec<(u64, u64)> {
        let mut holes = Vec::new();
        let mut cursor = lo;
        if let Some(m) = self.find(lo) {
            cursor = m.end;
        }
        for (&start, e) in self.ranges.range(lo..hi) {
            if start > cursor {
                holes.push((cursor, start - cursor));
            }
            cursor = cursor.max(e.end);
        }
        if cursor < hi {
            holes.push((cursor, hi - cursor));
        }
        holes
    }

    /// Holes an mmap request could be placed into.
    pub fn mmap_holes(&self) -> Vec<(u64, u64)> {
        self.holes_in(self.mmap_floor_page(), self.mmap_ceiling_page())
    }

    pub fn largest_mmap_hole(&self) -> u64 {
        self.mmap_holes().iter().map(|h| h.1).max().unwrap_or(0)
    }

    pub fn map(&mut self, pages: u64, perm: Permission, zone: Zone) -> Result<u64, SpaceError> {
        if pages == 0 {
            return Err(SpaceError::ZeroPages);
        }
        let total = self.arch().total_pages();
        let start = match zone {
            Zone::MmapSpace => self.find_mmap_slot(pages).ok_or(SpaceError::OutOfSpace { pages })?,
            Zone::Heap => {
                let start = self.brk;
                if start + pages > total || self.overlaps(start, start + pages) {
                    return Err(SpaceError::OutOfSpace { pages });
                }
                self.brk = start + pages;
                start
            }
            Zone::Fixed(addr) => {
                if !is_page_aligned(addr) {
                    return Err(SpaceError::Misaligned(addr));
                }
                let start = page_of(addr);
                if start.checked_add(pages).is_none_or(|end| end > total) {
                    return Err(SpaceError::OutOfRange(addr));
                }
                if self.overlaps(start, start + pages) {
                    return Err(SpaceError::Collision(addr));
                }
                start
            }
        };
        self.ranges.insert(start, Entry { end: start + pages, perm, content: PageContent::Zero });
        Ok(page_addr(start))
    }

    fn check_range(&self, base: u64, pages: u64) -> Result<(u64, u64), SpaceError> {
        if !is_page_aligned(base) {
            return Err(SpaceError::Misaligned(base));
        }
        let start = page_of(base);
        let end = start + pages;
        if pages == 0 || !self.fully_mapped(start, end) {
            return Err(SpaceError::NotMapped(base));
        }
        Ok((start, end))
    }

    fn split_at(&mut self, page: u64) {
        if let Some(m) = self.find(page) {
            if m.start < page {
                self.ranges.get_mut(&m.start).expect("present").end = page;
                self.ranges.insert(page, Entry { end: m.end, perm: m.perm, content: m.content });
            }
        }
    }

    fn coalesce_around(&mut self, start: u64, end: u64) {
        let first = self.ranges.range(..start).next_back().map(|(&s, _)| s).unwrap_or(start);
        let keys: Vec<u64> = self.ranges.range(first..=end).map(|(&s, _)| s).collect();
        let mut keys = keys.into_iter();
        let Some(mut current) = keys.next() else { return };
        for next in keys {
            let cur = self.ranges[&current];
            let nxt = self.ranges[&next];
            if cur.end == next && cur.perm == nxt.perm && cur.content == nxt.content {
                self.ranges.get_mut(&current).expect("present").end = nxt.end;
                self.ranges.remove(&next);
            } else {
                current = next;
            }
        }
    }

    pub fn unmap(&mut self, base: u64, pages: u64) -> Result<(), SpaceError> {
        let (start, end) = self.check_range(base, pages)?;
        self.split_at(start);
        self.split_at(end);
        let doomed: Vec<u64> = self.ranges.range(start..end).map(|(&s, _)| s).collect();
        for s in doomed {
            self.ranges.remove(&s);
        }
        let dead: Vec<u64> = self.words.range(page_addr(start)..page_addr(end)).map(|(&a, _)| a).collect();
        for a in dead {
            self.words.remove(&a);
        }
        Ok(())
    }

    /// Replaces the permission of exactly `[base, base + pages)`.
    pub fn protect(&mut self, base: u64, pages: u64, perm: Permission) -> Result<(), SpaceError> {
        let (start, end) = self.check_range(base, pages)?;
        self.split_at(start);
        self.split_at(end);
        for (_, e) in self.ranges.range_mut(start..end) {
            e.perm = perm;
        }
        self.coalesce_around(start, end);
        Ok(())
    }

    /// Read one 8-byte word. Counts as an attacker-visible read.
    pub fn read(&self, addr: u64) -> Result<u64, Fault> {
        self.read_content(addr).map(PageContent::value)
    }

    pub fn read_content(&self, addr: u64) -> Result<PageContent, Fault> {
        self.audit.reads.fetch_add(1, Ordering::Relaxed);
        let m = self.find(page_of(addr)).ok_or(Fault { addr, kind: FaultKind::Unmapped })?;
        if !m.perm.readable {
            return Err(Fault { addr, kind: FaultKind::NotReadable });
        }
        Ok(self.words.get(&(addr & !(WORD - 1))).copied().unwrap_or(m.content))
    }

    pub fn write(&mut self, addr: u64, content: PageContent) -> Result<(), Fault> {
        self.audit.writes.fetch_add(1, Ordering::Relaxed);
        let m = self.find(page_of(addr)).ok_or(Fault { addr, kind: FaultKind::Unmapped })?;
        if !m.perm.writable {
            return Err(Fault { addr, kind: FaultKind::NotWritable });
        }
        if let PageContent::ReturnAddress(v) = content {
            debug_assert!(self.layout.in_code(v), "return address {v:#x} outside code");
        }
        self.words.insert(addr & !(WORD - 1), content);
        Ok(())
    }

    pub fn access(&mut self, addr: u64, kind: Access) -> Result<u64, Fault> {
        match kind {
            Access::Read => self.read(addr),
            Access::Write(content) => self.write(addr, content).map(|()| content.value()),
        }
    }

    /// Readability test that never touches memory, like handing the
    /// address to `write(2)` and checking for `EFAULT`.
    pub fn write_probe(&self, addr: u64) -> ProbeResult {
        self.audit.probes.fetch_add(1, Ordering::Relaxed);
        match self.find(page_of(addr)) {
            Some(m) if m.perm.readable => ProbeResult::Readable,
            _ => ProbeResult::NotReadable,
        }
    }

    /// Every written word that currently sits on a readable page.
    pub fn readable_words(&self) -> impl Iterator<Item = (u64, PageContent)> + '_ {
        self.words.iter().filter_map(|(&addr, &c)| {
            let m = self.find(page_of(addr))?;
            m.perm.readable.then_some((addr, c))
        })
    }

    /// Written words inside `range` regardless of permission.
    pub fn words_in(&self, range: Range<u64>) -> impl Iterator<Item = (u64, PageContent)> + '_ {
        self.words.range(range).map(|(&a, &c)| (a, c))
    }

    /// Sorted, non-overlapping, inside the address space.
    pub fn check_invariants(&self) -> Result<(), String> {
        let total = self.arch().total_pages();
        let mut prev_end = 0;
        for m in self.mappings() {
            if m.start >= m.end {
                return Err(format!("empty mapping at page {:#x}", m.start));
            }
            if m.start < prev_end {
                return Err(format!("overlap at page {:#x}", m.start));
            }
            if m.end > total {
                return Err(format!("mapping past end at page {:#x}", m.start));
            }
            prev_end = m.end;
        }
        Ok(())
    }
}
