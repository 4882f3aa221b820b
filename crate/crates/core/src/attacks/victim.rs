use std::ops::Range;

use super::probe::{SPRAY_DEPTH, SPRAY_LOCALS};
use super::surface::{AttackSurface, PublicInfo};
use super::{AttackError, SchemeKind, SchemeLayout};
use crate::arch::{Arch, WORD};
use crate::machine::{FuncDesc, LibraryMode, Machine, MachineConfig, ThreadId};
use crate::region::RegionParams;
use crate::space::{create_layout, LayoutConfig};
use crate::space::{AddressSpace, PageContent, Permission, Zone};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimConfig {
    pub arch: Arch,
    pub kind: SchemeKind,
    pub seed: u64,
    /// Shrinks placement entropy so that the effective entropy of a child
    /// hidden stack is this many bits.
    pub scaled_bits: Option<u32>,
    pub threads: usize,
    pub libs: LibraryMode,
    /// Size of a readable library mapped before anything else.
    pub library_pages: u64,
    /// Separate every `mmap`'d stack from its neighbours by a freed page.
    pub isolate: bool,
}

impl VictimConfig {
    pub fn new(arch: Arch, kind: SchemeKind) -> Self {
        VictimConfig {
            arch,
            kind,
            seed: 0,
            scaled_bits: None,
            threads: 1,
            libs: LibraryMode::Secure,
            library_pages: 0,
            isolate: false,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scaled(mut self, bits: Option<u32>) -> Self {
        self.scaled_bits = bits;
        self
    }

    pub fn threads(mut self, n: usize) -> Self {
        self.threads = n;
        self
    }

    pub fn libs(mut self, libs: LibraryMode) -> Self {
        self.libs = libs;
        self
    }

    pub fn library(mut self, pages: u64) -> Self {
        self.library_pages = pages;
        self
    }

    pub fn isolate(mut self, yes: bool) -> Self {
        self.isolate = yes;
        self
    }

    fn layout_and_region(&self) -> Result<(LayoutConfig, RegionParams), AttackError> {
        let sl = SchemeLayout::of(self.kind);
        let mut layout = LayoutConfig::defaults(self.arch);
        let mut region = RegionParams::default();
        if let Some(b) = self.scaled_bits {
            if b == 0 || b > 40 {
                return Err(AttackError::Config(format!("scaled bits {b} out of range 1..=40")));
            }
            match (sl.region_placement, sl.stack_log2) {
                (true, Some(s)) => region = RegionParams::with_size_log2(b + s),
                (_, s) => layout = layout.with_mmap_entropy(b + s.unwrap_or(super::SAFE_STACK_LOG2)),
            }
        }
        layout.validate()?;
        if sl.region_placement && region.capacity() < self.threads as u64 + 1 {
            return Err(AttackError::Config(format!(
                "a {}-page region holds {} stacks, {} needed",
                region.size_pages,
                region.capacity(),
                self.threads + 1
            )));
        }
        Ok((layout, region))
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        self.layout_and_region().map(|_| ())
    }
}

/// A running process under one scheme, plus its ground truth.
pub struct Victim {
    machine: Machine,
    layout: SchemeLayout,
    config: VictimConfig,
    children: Vec<ThreadId>,
}

impl Victim {
    pub fn build(config: &VictimConfig) -> Result<Victim, AttackError> {
        let (layout_cfg, region) = config.layout_and_region()?;
        let sl = SchemeLayout::of(config.kind);
        let mut space = AddressSpace::boot(create_layout(layout_cfg, config.seed)?);
        if config.library_pages > 0 {
            space.map(config.library_pages, Permission::READ, Zone::MmapSpace)?;
        }
        let mut transients = Vec::new();
        let mut isolate = |space: &mut AddressSpace| -> Result<(), AttackError> {
            if config.isolate {
                transients.push(space.map(1, Permission::RW, Zone::MmapSpace)?);
            }
            Ok(())
        };
        isolate(&mut space)?;
        let mc = MachineConfig::new(config.arch, sl.machine_scheme)
            .seed(config.seed)
            .region(region)
            .libc(config.libs)
            .locals_on_safe_stack(sl.locals_on_safe_stack);
        let mut machine = Machine::from_space(space, mc)?;
        isolate(machine.space_mut())?;
        let mut children = Vec::with_capacity(config.threads);
        for _ in 0..config.threads {
            children.push(machine.spawn_thread(&FuncDesc::new("worker", 1, 64))?);
            isolate(machine.space_mut())?;
        }
        for t in transients {
            machine.space_mut().unmap(t, 1)?;
        }
        Ok(Victim { machine, layout: sl, config: config.clone(), children })
    }

    pub fn config(&self) -> &VictimConfig {
        &self.config
    }

    pub fn scheme_layout(&self) -> SchemeLayout {
        self.layout
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn children(&self) -> &[ThreadId] {
        &self.children
    }

    /// Ground truth: every live hidden stack.
    pub fn hidden_ranges(&self) -> Vec<Range<u64>> {
        self.machine.hidden_ranges()
    }

    pub fn public_info(&self) -> PublicInfo {
        PublicInfo {
            arch: self.config.arch,
            kind: self.config.kind,
            layout: self.machine.space().layout().config,
            stack_pages: self.layout.stack_pages(),
            library_pages: self.config.library_pages,
            threads: self.config.threads,
            region: self.machine.region().map(|r| r.base..r.end()),
        }
    }

    pub fn surface(&mut self) -> AttackSurface<'_> {
        let public = self.public_info();
        AttackSurface::new(self.machine.space_mut(), public)
    }

    /// A server-like run on every thread: calls into libraries, a
    /// `setjmp`/`longjmp` round trip through a heap buffer, and an
    /// exception unwinding three frames. Each thread keeps one frame live.
    pub fn run_workload(&mut self) -> Result<(), AttackError> {
        let libs = self.config.libs;
        let m = &mut self.machine;
        let threads: Vec<ThreadId> = std::iter::once(0).chain(self.children.iter().copied()).collect();
        for t in threads {
            m.switch_to(t)?;
            m.exec_call(&FuncDesc::new("serve", 2, 64))?;
            m.exec_call(&FuncDesc::new("lib_read", 3, 32).with_library(libs))?;
            m.exec_return()?;
            let buf_addr = m.alloc_jmp_buf()?;
            let buf = m.setjmp(buf_addr)?;
            m.exec_call(&FuncDesc::new("handle", 1, 32))?;
            m.exec_call(&FuncDesc::new("parse", 0, 16))?;
            m.longjmp(&buf)?;
            m.exec_call(&FuncDesc::new("dispatch", 1, 16))?;
            m.exec_call(&FuncDesc::new("lib_cb", 2, 16).with_library(libs))?;
            m.exec_call(&FuncDesc::new("throw", 2, 32))?;
            m.unwind_frames(3)?;
        }
        m.switch_to(0)?;
        Ok(())
    }

    /// Recursively calls a function whose locals the attacker fills with
    /// `signature`, on the last spawned thread (or the main thread).
    pub fn spray(&mut self, signature: u64) -> Result<(), AttackError> {
        let t = self.children.last().copied().unwrap_or(0);
        let m = &mut self.machine;
        m.switch_to(t)?;
        let f = FuncDesc::new("spray", 0, SPRAY_LOCALS);
        for _ in 0..SPRAY_DEPTH {
            m.exec_call(&f)?;
            for off in (0..SPRAY_LOCALS).step_by(WORD as usize) {
                m.store_local(off, PageContent::Data(signature))?;
            }
        }
        for _ in 0..SPRAY_DEPTH {
            m.exec_return()?;
        }
        m.switch_to(0)?;
        Ok(())
    }
}
