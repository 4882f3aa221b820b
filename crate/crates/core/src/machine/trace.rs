use serde::Serialize;

use super::isa::{Instr, Reg};
use super::MachineState;

/// One executed instruction, as exported in JSON-lines traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub thread: usize,
    #[serde(with = "crate::hex")]
    pub pc: u64,
    pub instr: String,
    #[serde(with = "crate::hex")]
    pub sp: u64,
    #[serde(with = "crate::hex")]
    pub ret_sp: u64,
    pub call_depth: usize,
}

impl TraceEntry {
    pub(super) fn capture(st: &MachineState, instr: &Instr) -> Self {
        TraceEntry {
            thread: st.id,
            pc: st.pc,
            instr: instr.to_string(),
            sp: st.reg(Reg::sp(st.arch)),
            ret_sp: st.ret_sp(),
            call_depth: st.call_depth,
        }
    }
}

pub fn to_json_lines(entries: &[TraceEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).expect("trace entry serializes") + "\n").collect()
}
