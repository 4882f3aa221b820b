//! Prologue and epilogue generation for both frame layouts.

use thiserror::Error;

use crate::arch::Arch;
use crate::machine::isa::{Instr, Mem, Reg};
use crate::machine::{FuncDesc, LibraryMode, Scheme};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmitError {
    #[error("{arch} frames spill at most {max} callee-saved registers, got {spills}")]
    TooManySpills { arch: Arch, spills: usize, max: usize },
    #[error("locals size {0} is not a multiple of 16")]
    MisalignedLocals(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub prologue: Vec<Instr>,
    pub epilogue: Vec<Instr>,
    /// Whether the return address goes to the return stack.
    pub instrumented: bool,
}

impl Emission {
    pub fn len(&self) -> usize {
        self.prologue.len() + self.epilogue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prologue, `...`, epilogue.
    pub fn listing(&self) -> Vec<Instr> {
        self.prologue.iter().cloned().chain([Instr::Body]).chain(self.epilogue.iter().cloned()).collect()
    }

    pub fn listing_text(&self) -> String {
        self.listing().iter().map(|i| format!("{i}\n")).collect()
    }
}

/// Registers saved by the prologue, in order. Legacy library code treats the
/// dedicated register as an ordinary callee-saved register.
pub fn spill_list(arch: Arch, desc: &FuncDesc) -> Result<Vec<Reg>, EmitError> {
    let order = Reg::spill_order(arch);
    if desc.callee_saved_spills > order.len() {
        return Err(EmitError::TooManySpills { arch, spills: desc.callee_saved_spills, max: order.len() });
    }
    let mut regs = order[..desc.callee_saved_spills].to_vec();
    if desc.library == LibraryMode::Compatible {
        regs.push(Reg::rsp_dedicated(arch));
    }
    Ok(regs)
}

/// Whether `desc` gets the return-stack frame under `scheme`.
pub fn is_instrumented(desc: &FuncDesc, scheme: Scheme) -> bool {
    scheme == Scheme::ReturnStack && desc.library == LibraryMode::Secure
}

pub fn emit(arch: Arch, desc: &FuncDesc, scheme: Scheme) -> Result<Emission, EmitError> {
    if !desc.locals_bytes.is_multiple_of(16) {
        return Err(EmitError::MisalignedLocals(desc.locals_bytes));
    }
    let spills = spill_list(arch, desc)?;
    let instrumented = is_instrumented(desc, scheme);
    let (prologue, epilogue) = match (arch, instrumented) {
        (Arch::X86_64, false) => x86_regular(&spills, desc.locals_bytes),
        (Arch::X86_64, true) => x86_return_stack(&spills, desc.locals_bytes),
        (Arch::Arm64, false) => arm_regular(&spills, desc.locals_bytes),
        (Arch::Arm64, true) => arm_return_stack(&spills, desc.locals_bytes),
    };
    Ok(Emission { prologue, epilogue, instrumented })
}

fn odd(n: usize) -> u64 {
    (n % 2) as u64
}

fn x86_frame(spills: &[Reg], sub: u64) -> (Vec<Instr>, Vec<Instr>) {
    let mut pro = vec![Instr::Push(Reg::Rbp), Instr::Mov(Reg::Rsp, Reg::Rbp)];
    pro.extend(spills.iter().map(|r| Instr::Push(*r)));
    pro.push(Instr::SubImm(sub, Reg::Rsp));
    let mut epi = vec![Instr::AddImm(sub, Reg::Rsp)];
    epi.extend(spills.iter().rev().map(|r| Instr::Pop(*r)));
    epi.push(Instr::Pop(Reg::Rbp));
    (pro, epi)
}

fn x86_regular(spills: &[Reg], locals: u64) -> (Vec<Instr>, Vec<Instr>) {
    // return address + RBP + spills must total a multiple of 16
    let (pro, mut epi) = x86_frame(spills, locals + 8 * odd(spills.len()));
    epi.push(Instr::Retq);
    (pro, epi)
}

fn x86_return_stack(spills: &[Reg], locals: u64) -> (Vec<Instr>, Vec<Instr>) {
    // the return address has left the stack, so only RBP + spills count
    let (body_pro, mut epi) = x86_frame(spills, locals + 8 * (1 - odd(spills.len())));
    let mut pro = vec![Instr::PopMem(Reg::R15, 0), Instr::Lea(8, Reg::R15, Reg::R15)];
    pro.extend(body_pro);
    epi.push(Instr::Lea(-8, Reg::R15, Reg::R15));
    epi.push(Instr::JmpMem(Reg::R15, 0));
    (pro, epi)
}

/// Stores and loads for `regs` saved consecutively from `[SP, #base]`.
fn arm_spills(regs: &[Reg], base: u64) -> (Vec<Instr>, Vec<Instr>) {
    let mut stores = Vec::new();
    let mut loads = Vec::new();
    for (i, chunk) in regs.chunks(2).enumerate() {
        let at = Mem::at(Reg::Sp, (base + 16 * i as u64) as i64);
        match *chunk {
            [a, b] => {
                stores.push(Instr::Stp(a, b, at));
                loads.push(Instr::Ldp(a, b, at));
            }
            [a] => {
                stores.push(Instr::Str(a, at));
                loads.push(Instr::Ldr(a, at));
            }
            _ => unreachable!(),
        }
    }
    loads.reverse();
    (stores, loads)
}

fn arm_regular(spills: &[Reg], locals: u64) -> (Vec<Instr>, Vec<Instr>) {
    let n = spills.len() as u64;
    let frame = locals + 8 * n + 8 * odd(spills.len()) + 16;
    let fp_slot = frame - 16;
    let (stores, loads) = arm_spills(spills, locals);
    let mut pro = vec![Instr::ASub(Reg::Sp, Reg::Sp, frame)];
    pro.extend(stores);
    pro.push(Instr::Stp(Reg::Fp, Reg::Lr, Mem::at(Reg::Sp, fp_slot as i64)));
    pro.push(Instr::AAdd(Reg::Fp, Reg::Sp, fp_slot));
    let mut epi = vec![Instr::Ldp(Reg::Fp, Reg::Lr, Mem::at(Reg::Sp, fp_slot as i64))];
    epi.extend(loads);
    epi.push(Instr::AAdd(Reg::Sp, Reg::Sp, frame));
    epi.push(Instr::Ret);
    (pro, epi)
}

fn arm_return_stack(spills: &[Reg], locals: u64) -> (Vec<Instr>, Vec<Instr>) {
    let x28 = Reg::X(28);
    let n = spills.len() as u64;
    let saved: Vec<Reg> = spills.iter().copied().chain([Reg::Fp]).collect();
    let frame = (locals + 8 * n + 8).next_multiple_of(16);
    let fp_slot = locals + 8 * n;
    let (stores, loads) = arm_spills(&saved, locals);
    let mut pro = vec![Instr::Str(Reg::Lr, Mem::post(x28, 8)), Instr::ASub(Reg::Sp, Reg::Sp, frame)];
    pro.extend(stores);
    pro.push(Instr::AAdd(Reg::Fp, Reg::Sp, fp_slot));
    let mut epi = loads;
    epi.push(Instr::Ldr(Reg::Lr, Mem::pre(x28, -8)));
    epi.push(Instr::AAdd(Reg::Sp, Reg::Sp, frame));
    epi.push(Instr::Ret);
    (pro, epi)
}

/// Additional instructions per prologue/epilogue pair: three on x86-64,
/// zero or two on ARM64 depending on the parity of the spill count.
pub fn overhead(arch: Arch, callee_saved_spills: usize) -> i64 {
    match arch {
        Arch::X86_64 => 3,
        Arch::Arm64 if callee_saved_spills % 2 == 1 => 0,
        Arch::Arm64 => 2,
    }
}
