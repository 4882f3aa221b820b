//! Prologue/epilogue generation and rewriting of textual assembly.

mod asm;
mod emit;
mod rewrite;

pub use asm::{parse_asm, print_asm, AsmFunction, ParseError};
pub use emit::{emit, is_instrumented, overhead, spill_list, EmitError, Emission};
pub use rewrite::{recognize, rewrite, FrameShape, RewriteOutcome, RewriteReport};
