//! The toy instruction set: just the mnemonics that appear in typical
//! prologues and epilogues on both architectures, plus direct calls.

use std::fmt;

use crate::arch::Arch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    Rsp,
    Rbp,
    Rbx,
    R12,
    R13,
    R14,
    R15,
    Sp,
    Fp,
    Lr,
    /// ARM64 general purpose register `X0`..`X28`.
    X(u8),
}

pub const REG_COUNT: usize = 39;

impl Reg {
    pub fn arch(self) -> Arch {
        match self {
            Reg::Rsp | Reg::Rbp | Reg::Rbx | Reg::R12 | Reg::R13 | Reg::R14 | Reg::R15 => Arch::X86_64,
            _ => Arch::Arm64,
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            Reg::Rsp => 0,
            Reg::Rbp => 1,
            Reg::Rbx => 2,
            Reg::R12 => 3,
            Reg::R13 => 4,
            Reg::R14 => 5,
            Reg::R15 => 6,
            Reg::Sp => 7,
            Reg::Fp => 8,
            Reg::Lr => 9,
            Reg::X(n) => 10 + n as usize,
        }
    }

    /// Stack pointer of `arch`.
    pub fn sp(arch: Arch) -> Reg {
        match arch {
            Arch::X86_64 => Reg::Rsp,
            Arch::Arm64 => Reg::Sp,
        }
    }

    /// Register reserved for the return-stack pointer.
    pub fn rsp_dedicated(arch: Arch) -> Reg {
        match arch {
            Arch::X86_64 => Reg::R15,
            Arch::Arm64 => Reg::X(28),
        }
    }

    /// Callee-saved registers available for spilling, in spill order.
    pub fn spill_order(arch: Arch) -> &'static [Reg] {
        const X86: [Reg; 4] = [Reg::Rbx, Reg::R12, Reg::R13, Reg::R14];
        const ARM: [Reg; 9] =
            [Reg::X(19), Reg::X(20), Reg::X(21), Reg::X(22), Reg::X(23), Reg::X(24), Reg::X(25), Reg::X(26), Reg::X(27)];
        match arch {
            Arch::X86_64 => &X86,
            Arch::Arm64 => &ARM,
        }
    }

    pub fn parse(s: &str) -> Option<Reg> {
        let s = s.trim();
        if let Some(x86) = s.strip_prefix('%') {
            return match x86.to_ascii_uppercase().as_str() {
                "RSP" => Some(Reg::Rsp),
                "RBP" => Some(Reg::Rbp),
                "RBX" => Some(Reg::Rbx),
                "R12" => Some(Reg::R12),
                "R13" => Some(Reg::R13),
                "R14" => Some(Reg::R14),
                "R15" => Some(Reg::R15),
                _ => None,
            };
        }
        match s.to_ascii_uppercase().as_str() {
            "SP" => Some(Reg::Sp),
            "FP" | "X29" => Some(Reg::Fp),
            "LR" | "X30" => Some(Reg::Lr),
            other => {
                let n: u8 = other.strip_prefix('X')?.parse().ok()?;
                (n <= 28).then_some(Reg::X(n))
            }
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::Rsp => f.write_str("%RSP"),
            Reg::Rbp => f.write_str("%RBP"),
            Reg::Rbx => f.write_str("%RBX"),
            Reg::R12 => f.write_str("%R12"),
            Reg::R13 => f.write_str("%R13"),
            Reg::R14 => f.write_str("%R14"),
            Reg::R15 => f.write_str("%R15"),
            Reg::Sp => f.write_str("SP"),
            Reg::Fp => f.write_str("FP"),
            Reg::Lr => f.write_str("LR"),
            Reg::X(n) => write!(f, "X{n}"),
        }
    }
}

/// ARM64 addressing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Index {
    /// `[base, #off]`, base unchanged.
    Offset,
    /// Base updated to `base + off` before the access.
    Pre,
    /// Access at `base`, then base updated to `base + off`.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mem {
    pub base: Reg,
    pub offset: i64,
    pub index: Index,
}

impl Mem {
    pub fn at(base: Reg, offset: i64) -> Mem {
        Mem { base, offset, index: Index::Offset }
    }

    pub fn pre(base: Reg, offset: i64) -> Mem {
        Mem { base, offset, index: Index::Pre }
    }

    pub fn post(base: Reg, offset: i64) -> Mem {
        Mem { base, offset, index: Index::Post }
    }
}

impl fmt::Display for Mem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.index, self.offset) {
            (Index::Offset, 0) => write!(f, "[{}]", self.base),
            (Index::Offset, off) => write!(f, "[{}, #{off}]", self.base),
            (Index::Post, off) => write!(f, "[{}], #{off}", self.base),
            // printed in the `[Xn], #-8!` spelling used by the reference listings
            (Index::Pre, off) => write!(f, "[{}], #{off}!", self.base),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instr {
    Push(Reg),
    Pop(Reg),
    /// `POPQ disp(base)`: pop straight into memory.
    PopMem(Reg, i64),
    /// `MOV src, dst`.
    Mov(Reg, Reg),
    /// `LEA disp(base), dst`. Leaves the flags alone.
    Lea(i64, Reg, Reg),
    /// `SUB $imm, dst`.
    SubImm(u64, Reg),
    /// `ADD $imm, dst`.
    AddImm(u64, Reg),
    Call(String),
    Retq,
    /// `JMPQ *disp(base)`, written `JMPQ (base)`.
    JmpMem(Reg, i64),
    /// Direct jump; only tail calls use it.
    Jmp(String),

    Str(Reg, Mem),
    Ldr(Reg, Mem),
    Stp(Reg, Reg, Mem),
    Ldp(Reg, Reg, Mem),
    /// `SUB dst, src, #imm`.
    ASub(Reg, Reg, u64),
    /// `ADD dst, src, #imm`.
    AAdd(Reg, Reg, u64),
    Bl(String),
    Ret,
    B(String),

    /// `...`: the function body, opaque to the instrumentation.
    Body,
}

impl Instr {
    pub fn arch(&self) -> Option<Arch> {
        use Instr::*;
        match self {
            Push(_) | Pop(_) | PopMem(..) | Mov(..) | Lea(..) | SubImm(..) | AddImm(..) | Call(_) | Retq
            | JmpMem(..) | Jmp(_) => Some(Arch::X86_64),
            Str(..) | Ldr(..) | Stp(..) | Ldp(..) | ASub(..) | AAdd(..) | Bl(_) | Ret | B(_) => Some(Arch::Arm64),
            Body => None,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        use Instr::*;
        match self {
            Push(_) => "PUSH",
            Pop(_) => "POP",
            PopMem(..) => "POPQ",
            Mov(..) => "MOV",
            Lea(..) => "LEA",
            SubImm(..) | ASub(..) => "SUB",
            AddImm(..) | AAdd(..) => "ADD",
            Call(_) => "CALL",
            Retq => "RETQ",
            JmpMem(..) => "JMPQ",
            Jmp(_) => "JMP",
            Str(..) => "STR",
            Ldr(..) => "LDR",
            Stp(..) => "STP",
            Ldp(..) => "LDP",
            Bl(_) => "BL",
            Ret => "RET",
            B(_) => "B",
            Body => "...",
        }
    }

    /// Registers written by the instruction, including address write-back.
    pub fn defs(&self) -> Vec<Reg> {
        use Instr::*;
        let wb = |m: &Mem| (m.index != Index::Offset).then_some(m.base);
        match self {
            Push(_) | Call(_) | Retq => vec![Reg::Rsp],
            Pop(r) => vec![*r, Reg::Rsp],
            PopMem(..) => vec![Reg::Rsp],
            Mov(_, d) | Lea(_, _, d) | SubImm(_, d) | AddImm(_, d) | ASub(d, ..) | AAdd(d, ..) => vec![*d],
            Str(_, m) | Stp(_, _, m) => wb(m).into_iter().collect(),
            Ldr(r, m) => std::iter::once(*r).chain(wb(m)).collect(),
            Ldp(a, b, m) => [*a, *b].into_iter().chain(wb(m)).collect(),
            Bl(_) => vec![Reg::Lr],
            JmpMem(..) | Jmp(_) | Ret | B(_) | Body => vec![],
        }
    }

    /// Whether the instruction updates the condition flags (x86 ADD/SUB).
    pub fn sets_flags(&self) -> bool {
        matches!(self, Instr::SubImm(..) | Instr::AddImm(..))
    }
}

fn disp(d: i64, base: Reg) -> String {
    if d == 0 {
        format!("({base})")
    } else {
        format!("{d}({base})")
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instr::*;
        let m = self.mnemonic();
        match self {
            Push(r) | Pop(r) => write!(f, "{m} {r}"),
            PopMem(b, d) | JmpMem(b, d) => write!(f, "{m} {}", disp(*d, *b)),
            Mov(s, d) => write!(f, "{m} {s}, {d}"),
            Lea(o, b, d) => write!(f, "{m} {}, {d}", disp(*o, *b)),
            SubImm(i, d) | AddImm(i, d) => write!(f, "{m} ${i}, {d}"),
            Call(t) | Jmp(t) | Bl(t) | B(t) => write!(f, "{m} {t}"),
            Retq | Ret | Body => f.write_str(m),
            Str(r, a) | Ldr(r, a) => write!(f, "{m} {r}, {a}"),
            Stp(r1, r2, a) | Ldp(r1, r2, a) => write!(f, "{m} {r1}, {r2}, {a}"),
            ASub(d, s, i) | AAdd(d, s, i) => write!(f, "{m} {d}, {s}, #{i}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_round_trip() {
        let all = [Reg::Rsp, Reg::Rbp, Reg::Rbx, Reg::R12, Reg::R13, Reg::R14, Reg::R15, Reg::Sp, Reg::Fp, Reg::Lr]
            .into_iter()
            .chain((0..=28).map(Reg::X));
        for r in all {
            assert_eq!(Reg::parse(&r.to_string()), Some(r));
        }
        assert_eq!(Reg::parse("X29"), Some(Reg::Fp));
        assert_eq!(Reg::parse("%RAX"), None);
        assert_eq!(Reg::parse("X31"), None);
    }

    #[test]
    fn indices_are_dense_and_unique() {
        let mut seen = [false; REG_COUNT];
        let all = [Reg::Rsp, Reg::Rbp, Reg::Rbx, Reg::R12, Reg::R13, Reg::R14, Reg::R15, Reg::Sp, Reg::Fp, Reg::Lr]
            .into_iter()
            .chain((0..=28).map(Reg::X));
        for r in all {
            assert!(!seen[r.index()]);
            seen[r.index()] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn addressing_modes_print() {
        assert_eq!(Instr::Str(Reg::Lr, Mem::post(Reg::X(28), 8)).to_string(), "STR LR, [X28], #8");
        assert_eq!(Instr::Ldr(Reg::Lr, Mem::pre(Reg::X(28), -8)).to_string(), "LDR LR, [X28], #-8!");
        assert_eq!(Instr::Stp(Reg::Fp, Reg::Lr, Mem::at(Reg::Sp, 0)).to_string(), "STP FP, LR, [SP]");
        assert_eq!(Instr::Lea(-8, Reg::R15, Reg::R15).to_string(), "LEA -8(%R15), %R15");
        assert_eq!(Instr::PopMem(Reg::R15, 0).to_string(), "POPQ (%R15)");
    }
}
