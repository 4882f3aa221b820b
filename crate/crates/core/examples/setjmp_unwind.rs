//! Non-local control flow on return stacks: `setjmp`/`longjmp` through a
//! marker, and exception unwinding over mixed instrumented frames.

use retstack::arch::Arch;
use retstack::machine::{FuncDesc, LibraryMode, Machine, MachineConfig, Scheme};

fn main() {
    let mut m = Machine::new(MachineConfig::new(Arch::X86_64, Scheme::ReturnStack).seed(4)).unwrap();
    m.exec_call(&FuncDesc::new("main", 1, 32)).unwrap();
    let buf_addr = m.alloc_jmp_buf().unwrap();
    let buf = m.setjmp(buf_addr).unwrap();
    let saved = m.state().ret_sp();
    println!("setjmp at depth {}, return-stack pointer {saved:#x}, marker {:#x}", m.state().call_depth, buf.marker.unwrap());
    for i in 0..6 {
        m.exec_call(&FuncDesc::new(format!("nested{i}"), i % 3, 16)).unwrap();
    }
    println!("six calls later: depth {}, pointer {:#x}", m.state().call_depth, m.state().ret_sp());
    m.longjmp(&buf).unwrap();
    println!("after longjmp: depth {}, pointer restored {}", m.state().call_depth, m.state().ret_sp() == saved);

    let before = m.state().ret_sp();
    m.exec_call(&FuncDesc::new("a", 1, 16)).unwrap();
    m.exec_call(&FuncDesc::new("legacy", 2, 16).with_library(LibraryMode::Aware)).unwrap();
    m.exec_call(&FuncDesc::new("b", 0, 0)).unwrap();
    println!("unwind directives for three frames: {:?}", m.unwind_directives(3));
    let ctx = m.unwind_frames(3).unwrap();
    println!(
        "unwound {} bytes of return stack; pointer back where it was: {}",
        ctx.accumulated_rsp_offset,
        m.state().ret_sp() == before
    );
    println!("frames left: {:?}", m.state().frame_names());
}
