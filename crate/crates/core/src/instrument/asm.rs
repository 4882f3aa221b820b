//! Text form of the toy instruction set.
//!
//! Grammar, one item per line:
//!
//! ```text
//! name:                 label, starts a function
//! MNEMONIC operands     one instruction
//! ...                   opaque function body
//! ; comment             anywhere; `#` starts a comment only at line start
//! ```
//!
//! x86-64 uses AT&T operand order (`SUB $72, %RSP`). ARM64 accepts both
//! `[X28, #-8]!` and `[X28], #-8!` for pre-indexed addressing and prints the
//! latter.

use std::fmt;
use std::ops::Range;

use serde::Serialize;

use crate::arch::Arch;
use crate::machine::isa::{Instr, Mem, Reg};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AsmFunction {
    /// Empty for instructions that precede any label.
    pub name: String,
    pub arch: Arch,
    #[serde(skip)]
    pub body: Vec<Instr>,
    #[serde(skip)]
    pub prologue_span: Option<Range<usize>>,
    #[serde(skip)]
    pub epilogue_spans: Vec<Range<usize>>,
}

impl AsmFunction {
    pub fn new(name: impl Into<String>, arch: Arch, body: Vec<Instr>) -> Self {
        let mut f = AsmFunction { name: name.into(), arch, body, prologue_span: None, epilogue_spans: Vec::new() };
        f.refresh_spans();
        f
    }

    pub(crate) fn refresh_spans(&mut self) {
        match super::recognize(self.arch, &self.body) {
            Ok(shape) => {
                self.prologue_span = Some(shape.prologue);
                self.epilogue_spans = shape.epilogues;
            }
            Err(_) => {
                self.prologue_span = None;
                self.epilogue_spans.clear();
            }
        }
    }
}

fn strip_comment(line: &str) -> &str {
    let line = line.split(';').next().unwrap_or("");
    if line.trim_start().starts_with('#') {
        ""
    } else {
        line
    }
}

fn is_label_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$')
}

/// Splits on commas outside brackets.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '(' => {
                depth += 1;
                cur.push(c);
            }
            ']' | ')' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => i64::from_str_radix(hex, 16).ok()?,
        None => body.parse::<i64>().ok()?,
    };
    Some(if neg { -v } else { v })
}

struct Line<'a> {
    no: usize,
    arch: Arch,
    mnemonic: &'a str,
    ops: Vec<String>,
}

impl Line<'_> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { line: self.no, message: msg.into() }
    }

    fn arity(&self, n: usize) -> Result<(), ParseError> {
        if self.ops.len() == n {
            Ok(())
        } else {
            Err(self.err(format!("{} takes {n} operand(s), got {}", self.mnemonic, self.ops.len())))
        }
    }

    fn reg(&self, i: usize) -> Result<Reg, ParseError> {
        let s = &self.ops[i];
        let r = Reg::parse(s).ok_or_else(|| self.err(format!("bad register `{s}`")))?;
        if r.arch() != self.arch {
            return Err(self.err(format!("register `{s}` does not exist on {}", self.arch)));
        }
        Ok(r)
    }

    fn label(&self, i: usize) -> Result<String, ParseError> {
        let s = &self.ops[i];
        if !s.is_empty() && s.chars().all(is_label_char) {
            Ok(s.clone())
        } else {
            Err(self.err(format!("bad call target `{s}`")))
        }
    }

    fn x86_imm(&self, i: usize) -> Result<u64, ParseError> {
        let s = &self.ops[i];
        s.strip_prefix('$')
            .and_then(parse_int)
            .and_then(|v| u64::try_from(v).ok())
            .ok_or_else(|| self.err(format!("bad immediate `{s}`")))
    }

    fn arm_imm(&self, i: usize) -> Result<u64, ParseError> {
        let s = &self.ops[i];
        s.strip_prefix('#')
            .and_then(parse_int)
            .and_then(|v| u64::try_from(v).ok())
            .ok_or_else(|| self.err(format!("bad immediate `{s}`")))
    }

    /// `disp(%reg)`, optionally prefixed by `*`.
    fn x86_mem(&self, i: usize) -> Result<(Reg, i64), ParseError> {
        let s = self.ops[i].trim_start_matches('*');
        let bad = || self.err(format!("bad memory operand `{s}`"));
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open..].strip_prefix('(').and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
        let disp = if open == 0 { 0 } else { parse_int(&s[..open]).ok_or_else(bad)? };
        let base = Reg::parse(inner).filter(|r| r.arch() == Arch::X86_64).ok_or_else(bad)?;
        Ok((base, disp))
    }

    /// Memory operand made of the operands from `i` on.
    fn arm_mem(&self, i: usize) -> Result<Mem, ParseError> {
        let text = self.ops[i..].join(", ");
        let bad = || self.err(format!("bad memory operand `{text}`"));
        let close = text.find(']').ok_or_else(bad)?;
        let inner = text[..close].strip_prefix('[').ok_or_else(bad)?;
        let after = text[close + 1..].trim();
        let mut parts = inner.split(',').map(str::trim);
        let base = parts.next().and_then(Reg::parse).filter(|r| r.arch() == Arch::Arm64).ok_or_else(bad)?;
        let inner_off = match parts.next() {
            Some(o) => Some(o.strip_prefix('#').and_then(parse_int).ok_or_else(bad)?),
            None => None,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        match (inner_off, after) {
            (off, "") => Ok(Mem::at(base, off.unwrap_or(0))),
            (off, "!") => Ok(Mem::pre(base, off.unwrap_or(0))),
            (None, rest) => {
                let rest = rest.strip_prefix(',').ok_or_else(bad)?.trim();
                let (num, pre) = match rest.strip_suffix('!') {
                    Some(n) => (n, true),
                    None => (rest, false),
                };
                let off = num.strip_prefix('#').and_then(parse_int).ok_or_else(bad)?;
                Ok(if pre { Mem::pre(base, off) } else { Mem::post(base, off) })
            }
            _ => Err(bad()),
        }
    }

    fn mem_ops(&self, regs: usize) -> Result<(), ParseError> {
        // post-indexed forms spill over into one more comma-separated piece
        if self.ops.len() == regs + 1 || self.ops.len() == regs + 2 {
            Ok(())
        } else {
            Err(self.err(format!("{} takes {regs} register(s) and a memory operand", self.mnemonic)))
        }
    }

    fn instr(&self) -> Result<Instr, ParseError> {
        use Instr::*;
        let m = self.mnemonic.to_ascii_uppercase();
        let x86 = self.arch == Arch::X86_64;
        let wrong_arch = || self.err(format!("`{}` is not a {} instruction", self.mnemonic, self.arch));
        let i = match m.as_str() {
            "PUSH" if x86 => {
                self.arity(1)?;
                Push(self.reg(0)?)
            }
            "POP" if x86 => {
                self.arity(1)?;
                Pop(self.reg(0)?)
            }
            "POPQ" if x86 => {
                self.arity(1)?;
                let (b, d) = self.x86_mem(0)?;
                PopMem(b, d)
            }
            "MOV" if x86 => {
                self.arity(2)?;
                Mov(self.reg(0)?, self.reg(1)?)
            }
            "LEA" if x86 => {
                self.arity(2)?;
                let (b, d) = self.x86_mem(0)?;
                Lea(d, b, self.reg(1)?)
            }
            "SUB" | "ADD" if x86 => {
                self.arity(2)?;
                let (imm, dst) = (self.x86_imm(0)?, self.reg(1)?);
                if m == "SUB" {
                    SubImm(imm, dst)
                } else {
                    AddImm(imm, dst)
                }
            }
            "CALL" if x86 => {
                self.arity(1)?;
                Call(self.label(0)?)
            }
            "JMP" if x86 => {
                self.arity(1)?;
                Jmp(self.label(0)?)
            }
            "RETQ" if x86 => {
                self.arity(0)?;
                Retq
            }
            "JMPQ" if x86 => {
                self.arity(1)?;
                let (b, d) = self.x86_mem(0)?;
                JmpMem(b, d)
            }
            "STR" | "LDR" if !x86 => {
                self.mem_ops(1)?;
                let (r, mem) = (self.reg(0)?, self.arm_mem(1)?);
                if m == "STR" {
                    Str(r, mem)
                } else {
                    Ldr(r, mem)
                }
            }
            "STP" | "LDP" if !x86 => {
                self.mem_ops(2)?;
                let (a, b, mem) = (self.reg(0)?, self.reg(1)?, self.arm_mem(2)?);
                if m == "STP" {
                    Stp(a, b, mem)
                } else {
                    Ldp(a, b, mem)
                }
            }
            "SUB" | "ADD" if !x86 => {
                self.arity(3)?;
                let (d, s, imm) = (self.reg(0)?, self.reg(1)?, self.arm_imm(2)?);
                if m == "SUB" {
                    ASub(d, s, imm)
                } else {
                    AAdd(d, s, imm)
                }
            }
            "BL" if !x86 => {
                self.arity(1)?;
                Bl(self.label(0)?)
            }
            "B" if !x86 => {
                self.arity(1)?;
                B(self.label(0)?)
            }
            "RET" if !x86 => {
                self.arity(0)?;
                Ret
            }
            "PUSH" | "POP" | "POPQ" | "MOV" | "LEA" | "CALL" | "JMP" | "RETQ" | "JMPQ" | "STR" | "LDR" | "STP"
            | "LDP" | "BL" | "B" | "RET" => return Err(wrong_arch()),
            _ => return Err(self.err(format!("unknown mnemonic `{}`", self.mnemonic))),
        };
        Ok(i)
    }
}

/// Parses `text` into functions. Instructions before the first label form
/// an anonymous function.
pub fn parse_asm(text: &str, arch: Arch) -> Result<Vec<AsmFunction>, ParseError> {
    let mut funcs: Vec<(String, Vec<Instr>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let no = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(label) = line.strip_suffix(':') {
            if label.is_empty() || !label.chars().all(is_label_char) {
                return Err(ParseError { line: no, message: format!("bad label `{label}`") });
            }
            funcs.push((label.to_string(), Vec::new()));
            continue;
        }
        let instr = if line == "..." {
            Instr::Body
        } else {
            let (mnemonic, rest) = match line.find(char::is_whitespace) {
                Some(i) => (&line[..i], line[i..].trim()),
                None => (line, ""),
            };
            Line { no, arch, mnemonic, ops: split_operands(rest) }.instr()?
        };
        if funcs.is_empty() {
            funcs.push((String::new(), Vec::new()));
        }
        funcs.last_mut().expect("pushed above").1.push(instr);
    }
    Ok(funcs.into_iter().map(|(name, body)| AsmFunction::new(name, arch, body)).collect())
}

pub fn print_asm(funcs: &[AsmFunction]) -> String {
    let mut out = String::new();
    for f in funcs {
        if !f.name.is_empty() {
            out.push_str(&f.name);
            out.push_str(":\n");
        }
        for i in &f.body {
            out.push_str("    ");
            out.push_str(&i.to_string());
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const X86_REGULAR: &str = "\
f:
    PUSH %RBP
    MOV %RSP, %RBP
    PUSH %RBX
    SUB $72, %RSP
    ...
    ADD $72, %RSP
    POP %RBX
    POP %RBP
    RETQ
";

    #[test]
    fn x86_listing_parses() {
        let fs = parse_asm(X86_REGULAR, Arch::X86_64).unwrap();
        assert_eq!(fs.len(), 1);
        assert_eq!(fs[0].name, "f");
        assert_eq!(fs[0].body.len(), 9);
        assert_eq!(fs[0].prologue_span, Some(0..4));
        assert_eq!(fs[0].epilogue_spans, vec![5..9]);
        assert_eq!(print_asm(&fs), X86_REGULAR);
    }

    #[test]
    fn empty_input() {
        assert!(parse_asm("", Arch::Arm64).unwrap().is_empty());
        assert!(parse_asm("; nothing\n# here\n\n", Arch::X86_64).unwrap().is_empty());
    }

    #[test]
    fn anonymous_function_and_comments() {
        let fs = parse_asm("  ret ; done\n", Arch::Arm64).unwrap();
        assert_eq!(fs[0].name, "");
        assert_eq!(fs[0].body, vec![Instr::Ret]);
    }

    #[test]
    fn arm_addressing_spellings() {
        let fs = parse_asm(
            "g:\nSTR LR, [X28], #8\nLDR LR, [X28, #-8]!\nLDR LR, [X28], #-8!\nSTP X19, FP, [SP, #64]\nLDR X0, [SP]\n",
            Arch::Arm64,
        )
        .unwrap();
        let b = &fs[0].body;
        assert_eq!(b[0], Instr::Str(Reg::Lr, Mem::post(Reg::X(28), 8)));
        assert_eq!(b[1], Instr::Ldr(Reg::Lr, Mem::pre(Reg::X(28), -8)));
        assert_eq!(b[1], b[2]);
        assert_eq!(b[3], Instr::Stp(Reg::X(19), Reg::Fp, Mem::at(Reg::Sp, 64)));
        assert_eq!(b[4], Instr::Ldr(Reg::X(0), Mem::at(Reg::Sp, 0)));
        assert_eq!(b[4].to_string(), "LDR X0, [SP]");
        assert_eq!(crate::machine::isa::Index::Pre, Mem::pre(Reg::Sp, 0).index);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let e = parse_asm("f:\n  PUSH %RBP\n  FROB %RAX\n", Arch::X86_64).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("FROB"));
        let e = parse_asm("STR LR, [X28], #8\n", Arch::X86_64).unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("not a x86-64 instruction"));
        let e = parse_asm("\n\nSUB $x, %RSP\n", Arch::X86_64).unwrap_err();
        assert_eq!(e.line, 3);
        let e = parse_asm("PUSH SP\n", Arch::X86_64).unwrap_err();
        assert!(e.message.contains("`SP`"));
    }

    #[test]
    fn lowercase_and_hex_accepted() {
        let fs = parse_asm("sub $0x48, %rsp\nlea -8(%r15), %r15\njmpq *(%r15)\n", Arch::X86_64).unwrap();
        assert_eq!(
            fs[0].body,
            vec![
                Instr::SubImm(72, Reg::Rsp),
                Instr::Lea(-8, Reg::R15, Reg::R15),
                Instr::JmpMem(Reg::R15, 0)
            ]
        );
    }
}
