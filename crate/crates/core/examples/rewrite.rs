//! Parsing an assembly listing and rewriting its frames for return stacks.

use retstack::arch::Arch;
use retstack::instrument::{parse_asm, print_asm, rewrite};
use retstack::machine::Scheme;

const LISTING: &str = "\
; a leaf and a function with two exits
leaf:
PUSH %RBP
MOV %RSP, %RBP
PUSH %RBX
SUB $24, %RSP
...
ADD $24, %RSP
POP %RBX
POP %RBP
RETQ
twoexits:
PUSH %RBP
MOV %RSP, %RBP
PUSH %RBX
PUSH %R12
SUB $32, %RSP
...
ADD $32, %RSP
POP %R12
POP %RBX
POP %RBP
RETQ
...
ADD $32, %RSP
POP %R12
POP %RBX
POP %RBP
RETQ
tail:
JMP leaf
";

fn main() {
    let funcs = parse_asm(LISTING, Arch::X86_64).expect("listing parses");
    let (out, report) = rewrite(Arch::X86_64, &funcs, Scheme::ReturnStack);
    print!("{}", print_asm(&out));
    println!();
    for f in &report.functions {
        match &f.flagged {
            Some(why) => println!("{:<10} left alone: {why}", f.function),
            None => println!("{:<10} {:+} instructions", f.function, f.delta),
        }
    }
}
