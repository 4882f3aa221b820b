//! ASLR randomization intervals and their concrete instantiation.
//!
//! The kernel picks one page-aligned offset per interval when a process
//! starts. Every interval is `[0, N)` with `N` a power of two, so the entropy
//! of an offset is `log2(N) - 12` bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{is_page_aligned, Arch, PAGE_SHIFT, PAGE_SIZE};

/// Load address of non-PIE executables.
pub const NON_PIE_LOAD_BASE: u64 = 0x40_0000;
/// Lowest address `mmap()` will hand out.
pub const MMAP_MIN_ADDR: u64 = 0x1_0000;
/// Minimum distance between the stack randomization window and the mmap space.
pub const STACK_GAP: u64 = 128 << 20;
/// Executable image: code pages followed by writable data pages.
pub const CODE_PAGES: u64 = 256;
pub const DATA_PAGES: u64 = 16;
/// Pages mapped for the main thread's initial stack.
pub const MAIN_STACK_PAGES: u64 = 1 << 11;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("{name} interval {bound:#x} is not a page-multiple power of two")]
    BadInterval { name: &'static str, bound: u64 },
    #[error("randomization windows overlap: {0}")]
    Overlap(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub arch: Arch,
    /// Exclusive upper bounds of the `[0, N)` offset intervals, in bytes.
    #[serde(with = "crate::hex")]
    pub stack_offset_interval: u64,
    #[serde(with = "crate::hex")]
    pub mmap_offset_interval: u64,
    #[serde(with = "crate::hex")]
    pub brk_offset_interval: u64,
    #[serde(with = "crate::hex")]
    pub load_offset_interval: u64,
    pub pie: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntropyRow {
    pub name: &'static str,
    #[serde(with = "crate::hex")]
    pub interval: u64,
    pub bits: u32,
    pub entropy: u32,
}

impl LayoutConfig {
    /// Linux 4.14 defaults for `arch`.
    pub const fn defaults(arch: Arch) -> Self {
        match arch {
            Arch::X86_64 => LayoutConfig {
                arch,
                stack_offset_interval: 0x4_0000_0000,
                mmap_offset_interval: 0x100_0000_0000,
                brk_offset_interval: 0x200_0000,
                load_offset_interval: 0x100_0000_0000,
                pie: true,
            },
            Arch::Arm64 => LayoutConfig {
                arch,
                stack_offset_interval: 0x4000_0000,
                mmap_offset_interval: 0x4000_0000,
                brk_offset_interval: 0x4000_0000,
                load_offset_interval: 0x4000_0000,
                pie: true,
            },
        }
    }

    pub fn with_mmap_entropy(mut self, bits: u32) -> Self {
        self.mmap_offset_interval = 1 << (bits + PAGE_SHIFT);
        self
    }

    pub fn with_pie(mut self, pie: bool) -> Self {
        self.pie = pie;
        self
    }

    fn intervals(&self) -> [(&'static str, u64); 4] {
        [
            ("stack_offset", self.stack_offset_interval),
            ("mmap_offset", self.mmap_offset_interval),
            ("brk_offset", self.brk_offset_interval),
            ("load_offset", self.load_offset_interval),
        ]
    }

    pub fn entropy_table(&self) -> Vec<EntropyRow> {
        self.intervals()
            .into_iter()
            .map(|(name, interval)| {
                let bits = interval.trailing_zeros();
                EntropyRow { name, interval, bits, entropy: bits.saturating_sub(PAGE_SHIFT) }
            })
            .collect()
    }

    pub(crate) fn stack_top(&self) -> u64 {
        match self.arch {
            Arch::X86_64 => self.arch.space_size() - PAGE_SIZE,
            Arch::Arm64 => self.arch.space_size(),
        }
    }

    fn dyn_base(&self) -> u64 {
        // two thirds of the address space, page aligned
        (self.stack_top() / 3 * 2) & !(PAGE_SIZE - 1)
    }

    /// Highest possible mmap base (offset zero).
    pub fn mmap_top(&self) -> u64 {
        self.stack_top() - self.stack_offset_interval - STACK_GAP
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        for (name, bound) in self.intervals() {
            if !bound.is_power_of_two() || bound < PAGE_SIZE {
                return Err(LayoutError::BadInterval { name, bound });
            }
        }
        let space = self.arch.space_size();
        if self.stack_offset_interval + STACK_GAP >= space / 2 {
            return Err(LayoutError::Overlap("stack window exceeds half the address space"));
        }
        let image_top = if self.pie {
            self.dyn_base() + self.load_offset_interval
        } else {
            NON_PIE_LOAD_BASE
        } + (CODE_PAGES + DATA_PAGES) * PAGE_SIZE;
        let heap_top = image_top + self.brk_offset_interval;
        let mmap_floor = self.mmap_top().checked_sub(self.mmap_offset_interval);
        match mmap_floor {
            Some(floor) if floor > heap_top => Ok(()),
            _ => Err(LayoutError::Overlap("mmap window reaches the heap window")),
        }
    }
}

/// A concrete randomized layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub config: LayoutConfig,
    pub seed: u64,
    #[serde(with = "crate::hex")]
    pub stack_offset: u64,
    #[serde(with = "crate::hex")]
    pub mmap_offset: u64,
    #[serde(with = "crate::hex")]
    pub brk_offset: u64,
    #[serde(with = "crate::hex")]
    pub load_offset: u64,
    #[serde(with = "crate::hex")]
    pub code_base: u64,
    #[serde(with = "crate::hex")]
    pub heap_base: u64,
    #[serde(with = "crate::hex")]
    pub mmap_base: u64,
    /// Top of the main thread's stack; it grows down from here.
    #[serde(with = "crate::hex")]
    pub stack_base: u64,
}

impl MemoryLayout {
    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn code_end(&self) -> u64 {
        self.code_base + CODE_PAGES * PAGE_SIZE
    }

    pub fn data_base(&self) -> u64 {
        self.code_end()
    }

    pub fn image_end(&self) -> u64 {
        self.data_base() + DATA_PAGES * PAGE_SIZE
    }

    pub fn in_code(&self, addr: u64) -> bool {
        (self.code_base..self.code_end()).contains(&addr)
    }
}

fn draw_offset(rng: &mut ChaCha8Rng, interval: u64) -> u64 {
    let slots = interval >> PAGE_SHIFT;
    rng.gen_range(0..slots) << PAGE_SHIFT
}

/// Draws one page-aligned offset per interval. Deterministic in `seed`.
pub fn create_layout(config: LayoutConfig, seed: u64) -> Result<MemoryLayout, LayoutError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack_offset = draw_offset(&mut rng, config.stack_offset_interval);
    let mmap_offset = draw_offset(&mut rng, config.mmap_offset_interval);
    let brk_offset = draw_offset(&mut rng, config.brk_offset_interval);
    let drawn_load = draw_offset(&mut rng, config.load_offset_interval);

    let (load_offset, code_base) = if config.pie {
        (drawn_load, config.dyn_base() + drawn_load)
    } else {
        (0, NON_PIE_LOAD_BASE)
    };
    let image_end = code_base + (CODE_PAGES + DATA_PAGES) * PAGE_SIZE;
    let layout = MemoryLayout {
        config,
        seed,
        stack_offset,
        mmap_offset,
        brk_offset,
        load_offset,
        code_base,
        heap_base: image_end + brk_offset,
        mmap_base: config.mmap_top() - mmap_offset,
        stack_base: config.stack_top() - stack_offset,
    };
    debug_assert!([layout.code_base, layout.heap_base, layout.mmap_base, layout.stack_base]
        .iter()
        .all(|a| is_page_aligned(*a)));
    Ok(layout)
}
