//! A linear stack overflow that overwrites everything above the stack
//! pointer: it redirects the return on a regular stack and does nothing to
//! a return stack.

use retstack::arch::{Arch, WORD};
use retstack::machine::{FuncDesc, Machine, MachineConfig, Scheme};
use retstack::space::PageContent;

const PAYLOAD: u64 = 0x4141_4141_4141;

fn main() {
    for arch in Arch::ALL {
        for scheme in [Scheme::Regular, Scheme::SafeStackStyle, Scheme::ReturnStack] {
            let mut m = Machine::new(MachineConfig::new(arch, scheme).seed(1)).unwrap();
            m.exec_call(&FuncDesc::new("main", 1, 64)).unwrap();
            m.exec_call(&FuncDesc::new("parse", 2, 128)).unwrap();
            let (from, to) = (m.state().sp(), m.state().stack().end);
            for a in (from..to).step_by(WORD as usize) {
                m.space_mut().write(a, PageContent::Data(PAYLOAD)).unwrap();
            }
            let ev = m.exec_return().unwrap();
            let verdict = if ev.hijacked() { format!("hijacked to {:#x}", ev.target) } else { "returned normally".into() };
            println!("{arch:<7} {scheme:<12} {verdict}");
        }
    }
}
