//! Pattern-based prologue/epilogue replacement on parsed assembly.
//!
//! A frame is recognized by reading the spill count and frame size off the
//! prologue and then checking that re-emitting those parameters reproduces
//! the prologue and at least one epilogue exactly. Anything else is left
//! alone and flagged.

use std::ops::Range;

use serde::Serialize;

use super::asm::AsmFunction;
use super::emit::{emit, Emission};
use crate::arch::Arch;
use crate::machine::isa::{Index, Instr, Reg};
use crate::machine::{FuncDesc, Scheme};

/// A recognized frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameShape {
    pub desc: FuncDesc,
    /// Regular or ReturnStack.
    pub scheme: Scheme,
    pub prologue: Range<usize>,
    pub epilogues: Vec<Range<usize>>,
}

fn spill_prefix(arch: Arch, regs: &[Reg]) -> Option<usize> {
    let order = Reg::spill_order(arch);
    (regs.len() <= order.len() && order[..regs.len()] == *regs).then_some(regs.len())
}

fn locals_from(frame: u64, fixed: u64) -> Option<u64> {
    frame.checked_sub(fixed).filter(|l| l % 16 == 0)
}

fn odd(n: usize) -> u64 {
    (n % 2) as u64
}

/// Candidate (spills, locals, scheme) read off the first instructions.
fn guess(arch: Arch, body: &[Instr]) -> Option<(usize, u64, Scheme)> {
    use Instr::*;
    match arch {
        Arch::X86_64 => {
            let (scheme, at) = match body {
                [PopMem(Reg::R15, 0), Lea(8, Reg::R15, Reg::R15), ..] => (Scheme::ReturnStack, 2),
                _ => (Scheme::Regular, 0),
            };
            let rest = body.get(at..)?;
            if rest.get(..2)? != [Push(Reg::Rbp), Mov(Reg::Rsp, Reg::Rbp)] {
                return None;
            }
            let pushed: Vec<Reg> = rest[2..]
                .iter()
                .map_while(|i| match i {
                    Push(r) => Some(*r),
                    _ => None,
                })
                .collect();
            let n = spill_prefix(arch, &pushed)?;
            let SubImm(sub, Reg::Rsp) = rest.get(2 + pushed.len())? else { return None };
            let pad = match scheme {
                Scheme::ReturnStack => 8 * (1 - odd(n)),
                _ => 8 * odd(n),
            };
            Some((n, locals_from(*sub, pad)?, scheme))
        }
        Arch::Arm64 => {
            let x28 = Reg::X(28);
            let (scheme, at) = match body.first()? {
                Str(Reg::Lr, m) if m.base == x28 && m.index == Index::Post && m.offset == 8 => (Scheme::ReturnStack, 1),
                _ => (Scheme::Regular, 0),
            };
            let ASub(Reg::Sp, Reg::Sp, frame) = body.get(at)? else { return None };
            let mut saved = Vec::new();
            for i in &body[at + 1..] {
                match i {
                    Stp(Reg::Fp, Reg::Lr, _) if scheme == Scheme::Regular => break,
                    AAdd(Reg::Fp, Reg::Sp, _) => break,
                    Str(r, m) if m.base == Reg::Sp && m.index == Index::Offset => saved.push(*r),
                    Stp(a, b, m) if m.base == Reg::Sp && m.index == Index::Offset => saved.extend([*a, *b]),
                    _ => return None,
                }
            }
            if scheme == Scheme::ReturnStack && saved.pop()? != Reg::Fp {
                return None;
            }
            let n = spill_prefix(arch, &saved)?;
            let fixed = match scheme {
                Scheme::ReturnStack => 8 * n as u64 + 8 + 8 * (1 - odd(n)),
                _ => 8 * n as u64 + 16 + 8 * odd(n),
            };
            Some((n, locals_from(*frame, fixed)?, scheme))
        }
    }
}

fn find_epilogues(body: &[Instr], from: usize, epi: &[Instr]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut i = from;
    while i + epi.len() <= body.len() {
        if body[i..i + epi.len()] == *epi {
            spans.push(i..i + epi.len());
            i += epi.len();
        } else {
            i += 1;
        }
    }
    spans
}

/// Why a function was left alone.
pub fn recognize(arch: Arch, body: &[Instr]) -> Result<FrameShape, &'static str> {
    if body.iter().any(|i| matches!(i, Instr::Jmp(_) | Instr::B(_))) {
        return Err("tail call");
    }
    let (n, locals, scheme) = guess(arch, body).ok_or("no recognizable prologue")?;
    let desc = FuncDesc::new("", n, locals);
    let Emission { prologue, epilogue, .. } = emit(arch, &desc, scheme).map_err(|_| "unsupported frame shape")?;
    if body.get(..prologue.len()) != Some(&prologue[..]) {
        return Err("no recognizable prologue");
    }
    let epilogues = find_epilogues(body, prologue.len(), &epilogue);
    if epilogues.is_empty() {
        return Err("no matching epilogue");
    }
    let covered: Vec<bool> = (0..body.len())
        .map(|i| i < prologue.len() || epilogues.iter().any(|e| e.contains(&i)))
        .collect();
    let reserved = Reg::rsp_dedicated(arch);
    let clobbers = body.iter().zip(&covered).any(|(i, c)| !c && i.defs().contains(&reserved));
    if clobbers {
        return Err("body writes the reserved register");
    }
    Ok(FrameShape { desc, scheme, prologue: 0..prologue.len(), epilogues })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RewriteOutcome {
    pub function: String,
    pub arch: Arch,
    pub scheme: Scheme,
    /// Instructions added (negative when removed).
    pub delta: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flagged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RewriteReport {
    pub schema: u32,
    pub arch: Arch,
    pub scheme: Scheme,
    pub functions: Vec<RewriteOutcome>,
}

impl RewriteReport {
    pub fn flagged(&self) -> impl Iterator<Item = &RewriteOutcome> {
        self.functions.iter().filter(|f| f.flagged.is_some())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Re-emits every recognized frame for `scheme`. Bodies are untouched.
pub fn rewrite(arch: Arch, funcs: &[AsmFunction], scheme: Scheme) -> (Vec<AsmFunction>, RewriteReport) {
    let target = match scheme {
        Scheme::ReturnStack => Scheme::ReturnStack,
        _ => Scheme::Regular,
    };
    let mut out = Vec::with_capacity(funcs.len());
    let mut outcomes = Vec::with_capacity(funcs.len());
    for f in funcs {
        let shape = if f.arch == arch { recognize(arch, &f.body) } else { Err("architecture mismatch") };
        match shape {
            Ok(shape) => {
                let em = emit(arch, &shape.desc, target).expect("recognized shapes re-emit");
                let mut body = em.prologue.clone();
                let mut cursor = shape.prologue.end;
                for e in &shape.epilogues {
                    body.extend_from_slice(&f.body[cursor..e.start]);
                    body.extend(em.epilogue.iter().cloned());
                    cursor = e.end;
                }
                body.extend_from_slice(&f.body[cursor..]);
                let delta = body.len() as i64 - f.body.len() as i64;
                outcomes.push(RewriteOutcome { function: f.name.clone(), arch, scheme: target, delta, flagged: None });
                out.push(AsmFunction::new(f.name.clone(), arch, body));
            }
            Err(reason) => {
                outcomes.push(RewriteOutcome {
                    function: f.name.clone(),
                    arch,
                    scheme: target,
                    delta: 0,
                    flagged: Some(reason.to_string()),
                });
                out.push(f.clone());
            }
        }
    }
    (out, RewriteReport { schema: 1, arch, scheme: target, functions: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::{overhead, parse_asm, print_asm};

    fn listing(arch: Arch, desc: &FuncDesc, scheme: Scheme, body: &[Instr]) -> Vec<Instr> {
        let e = emit(arch, desc, scheme).unwrap();
        e.prologue.iter().cloned().chain(body.iter().cloned()).chain(e.epilogue).collect()
    }

    #[test]
    fn recognizes_every_emitted_shape() {
        for arch in Arch::ALL {
            for n in 0..=Reg::spill_order(arch).len() {
                for locals in [0, 16, 64, 256] {
                    for scheme in [Scheme::Regular, Scheme::ReturnStack] {
                        let d = FuncDesc::new("", n, locals);
                        let body = listing(arch, &d, scheme, &[Instr::Body]);
                        let shape = recognize(arch, &body).unwrap();
                        assert_eq!((shape.desc.callee_saved_spills, shape.desc.locals_bytes), (n, locals));
                        assert_eq!(shape.scheme, scheme);
                    }
                }
            }
        }
    }

    #[test]
    fn canonical_deltas() {
        for (arch, want) in [(Arch::X86_64, 3), (Arch::Arm64, 0)] {
            let f = AsmFunction::new("f", arch, listing(arch, &FuncDesc::canonical(), Scheme::Regular, &[Instr::Body]));
            let (out, rep) = rewrite(arch, &[f], Scheme::ReturnStack);
            assert_eq!(rep.functions[0].delta, want);
            assert_eq!(rep.functions[0].delta, overhead(arch, 1));
            let want_text = emit(arch, &FuncDesc::canonical(), Scheme::ReturnStack).unwrap().listing_text();
            let got: String = out[0].body.iter().map(|i| format!("{i}\n")).collect();
            assert_eq!(got, want_text);
        }
    }

    #[test]
    fn multiple_epilogues_and_body_preserved() {
        let arch = Arch::X86_64;
        let d = FuncDesc::new("", 2, 32);
        let e = emit(arch, &d, Scheme::Regular).unwrap();
        let mut body = e.prologue.clone();
        body.push(Instr::Call("a".into()));
        body.extend(e.epilogue.clone());
        body.push(Instr::Call("b".into()));
        body.extend(e.epilogue.clone());
        let (out, rep) = rewrite(arch, &[AsmFunction::new("g", arch, body)], Scheme::ReturnStack);
        assert_eq!(rep.functions[0].delta, 2 + 2);
        let calls: Vec<&Instr> = out[0].body.iter().filter(|i| matches!(i, Instr::Call(_))).collect();
        assert_eq!(calls.len(), 2);
        assert_eq!(out[0].epilogue_spans.len(), 2);
    }

    #[test]
    fn round_trip_back_to_regular() {
        let arch = Arch::Arm64;
        let d = FuncDesc::new("", 2, 48);
        let f = AsmFunction::new("h", arch, listing(arch, &d, Scheme::Regular, &[Instr::Body]));
        let (rs, _) = rewrite(arch, std::slice::from_ref(&f), Scheme::ReturnStack);
        let (back, rep) = rewrite(arch, &rs, Scheme::Regular);
        assert_eq!(back[0].body, f.body);
        assert_eq!(rep.functions[0].delta, -2);
    }

    #[test]
    fn flags_unrecognized() {
        let text = "leaf:\n    ...\n    RETQ\ntail:\n    PUSH %RBP\n    MOV %RSP, %RBP\n    SUB $0, %RSP\n    ADD $0, %RSP\n    POP %RBP\n    JMP other\n";
        let fs = parse_asm(text, Arch::X86_64).unwrap();
        let (out, rep) = rewrite(Arch::X86_64, &fs, Scheme::ReturnStack);
        let reasons: Vec<_> = rep.functions.iter().map(|f| f.flagged.clone().unwrap()).collect();
        assert_eq!(reasons, ["no recognizable prologue", "tail call"]);
        assert_eq!(print_asm(&out), print_asm(&fs));
    }

    #[test]
    fn body_clobbering_r15_is_flagged() {
        let arch = Arch::X86_64;
        let body = listing(arch, &FuncDesc::new("", 1, 16), Scheme::Regular, &[Instr::Pop(Reg::R15)]);
        assert_eq!(recognize(arch, &body).unwrap_err(), "body writes the reserved register");
    }
}
