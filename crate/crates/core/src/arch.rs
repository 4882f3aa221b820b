use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// log2 of the page size used by every supported architecture.
pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
/// Bytes per stack slot (return address, spilled register).
pub const WORD: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "x86-64")]
    X86_64,
    #[serde(rename = "arm64")]
    Arm64,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::X86_64, Arch::Arm64];

    /// Number of user-space virtual address bits.
    pub const fn address_bits(self) -> u32 {
        match self {
            Arch::X86_64 => 47,
            Arch::Arm64 => 48,
        }
    }

    pub const fn page_shift(self) -> u32 {
        PAGE_SHIFT
    }

    pub const fn space_size(self) -> u64 {
        1 << self.address_bits()
    }

    pub const fn total_pages(self) -> u64 {
        self.space_size() >> PAGE_SHIFT
    }

    pub const fn name(self) -> &'static str {
        match self {
            Arch::X86_64 => "x86-64",
            Arch::Arm64 => "arm64",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x86-64" | "x86_64" | "x64" | "amd64" => Ok(Arch::X86_64),
            "arm64" | "aarch64" => Ok(Arch::Arm64),
            other => Err(format!("unknown architecture `{other}` (expected x86-64 or arm64)")),
        }
    }
}

pub const fn page_of(addr: u64) -> u64 {
    addr >> PAGE_SHIFT
}

pub const fn page_addr(page: u64) -> u64 {
    page << PAGE_SHIFT
}

pub const fn is_page_aligned(addr: u64) -> bool {
    addr & (PAGE_SIZE - 1) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_counts() {
        assert_eq!(Arch::X86_64.total_pages(), 1 << 35);
        assert_eq!(Arch::Arm64.total_pages(), 1 << 36);
        assert_eq!(Arch::X86_64.space_size(), 1 << 47);
        assert_eq!(1u64 << Arch::Arm64.page_shift(), PAGE_SIZE);
    }

    #[test]
    fn parse_names() {
        assert_eq!("x86-64".parse::<Arch>().unwrap(), Arch::X86_64);
        assert_eq!("AArch64".parse::<Arch>().unwrap(), Arch::Arm64);
        assert!("mips".parse::<Arch>().is_err());
    }
}
