use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::space::FaultKind;

fn machine(arch: Arch, scheme: Scheme) -> Machine {
    Machine::new(MachineConfig::new(arch, scheme).seed(7)).unwrap()
}

fn leaf() -> FuncDesc {
    FuncDesc::new("leaf", 0, 0)
}

fn pool(arch: Arch) -> Vec<FuncDesc> {
    let max = Reg::spill_order(arch).len();
    (0..8).map(|i| FuncDesc::new(format!("p{i}"), (i * 3) % (max + 1), 16 * (i as u64 % 5))).collect()
}

/// Readable words outside `hidden` that point into it.
fn leaks(m: &Machine) -> Vec<(u64, u64)> {
    let hidden = m.hidden_ranges();
    let inside = |a: u64| hidden.iter().any(|r| r.contains(&a));
    m.space().readable_words().map(|(a, c)| (a, c.value())).filter(|(a, v)| !inside(*a) && inside(*v)).collect()
}

#[test]
fn x86_return_stack_trace_follows_listing() {
    let mut m = Machine::new(MachineConfig::new(Arch::X86_64, Scheme::ReturnStack).trace(true)).unwrap();
    let f = FuncDesc::canonical();
    let base = m.state().ret_sp();
    m.exec_call(&f).unwrap();
    assert_eq!(m.state().ret_sp(), base + 8);
    assert_eq!(m.space().read_content(base).unwrap(), PageContent::ReturnAddress(m.state().frames[0].expected_return));
    let ev = m.exec_return().unwrap();
    assert!(!ev.hijacked());
    assert_eq!(m.state().ret_sp(), base);
    let trace: Vec<String> = m.take_trace().into_iter().map(|t| t.instr).collect();
    let em = emit(Arch::X86_64, &f, Scheme::ReturnStack).unwrap();
    let mut want = vec!["CALL f".to_string()];
    want.extend(em.prologue.iter().chain(&em.epilogue).map(|i| i.to_string()));
    assert_eq!(trace, want);
    assert_eq!(trace.len() - 1, 11);
}

#[test]
fn trace_serializes_as_json_lines() {
    let mut m = Machine::new(MachineConfig::new(Arch::Arm64, Scheme::ReturnStack).trace(true)).unwrap();
    m.exec_call(&FuncDesc::canonical()).unwrap();
    let text = to_json_lines(&m.take_trace());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["instr"], "BL f");
    assert!(first["ret_sp"].as_str().unwrap().starts_with("0x"));
    assert!(m.take_trace().is_empty());
}

#[test]
fn arm_prologue_advances_x28() {
    let mut m = machine(Arch::Arm64, Scheme::ReturnStack);
    let base = m.state().ret_sp();
    m.exec_call(&FuncDesc::canonical()).unwrap();
    assert_eq!(m.state().ret_sp(), base + 8);
    m.exec_return().unwrap();
    assert_eq!(m.state().ret_sp(), base);
}

#[test]
fn overflow_hits_guard_page() {
    for arch in Arch::ALL {
        let mut m = machine(arch, Scheme::ReturnStack);
        let words = m.region().unwrap().stack_pages * PAGE_SIZE / WORD;
        for _ in 0..words {
            m.exec_call(&leaf()).unwrap();
        }
        match m.exec_call(&leaf()) {
            Err(MachineError::Fault(f)) => {
                assert_eq!(f.kind, FaultKind::NotWritable);
                assert_eq!(f.addr, m.state().return_stack().unwrap().end(8));
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn underflow_hits_guard_page() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    assert!(matches!(m.exec_return(), Err(MachineError::Fault(_))));
    let mut m = machine(Arch::X86_64, Scheme::Regular);
    assert!(matches!(m.exec_return(), Err(MachineError::NoFrame)));
}

#[test]
fn call_return_restores_registers() {
    for arch in Arch::ALL {
        for scheme in [Scheme::Regular, Scheme::SafeStackStyle, Scheme::ReturnStack] {
            let mut m = machine(arch, scheme);
            let (sp, rs) = (m.state().sp(), m.state().ret_sp());
            let t = CallTree::chain(&FuncDesc::new("g", 3, 32), 10);
            m.run_tree(&t).unwrap();
            assert_eq!((m.state().sp(), m.state().ret_sp()), (sp, rs), "{arch} {scheme}");
            assert_eq!(m.state().call_depth, 0);
        }
    }
}

#[test]
fn corrupted_stack_hijacks_only_regular() {
    for arch in Arch::ALL {
        for scheme in [Scheme::Regular, Scheme::SafeStackStyle, Scheme::ReturnStack] {
            let mut m = machine(arch, scheme);
            m.exec_call(&FuncDesc::canonical()).unwrap();
            m.exec_call(&FuncDesc::new("victim", 2, 64)).unwrap();
            let slot = m.return_slot();
            assert_eq!(slot.is_none(), scheme == Scheme::ReturnStack);
            let st = m.state();
            let (from, to) = (st.sp(), st.stack().end);
            for a in (from..to).step_by(WORD as usize) {
                m.space_mut().write(a, PageContent::Data(0x4141_4141)).unwrap();
            }
            let ev = m.exec_return().unwrap();
            assert_eq!(ev.hijacked(), scheme != Scheme::ReturnStack, "{arch} {scheme}");
            if ev.hijacked() {
                assert_eq!(ev.target, 0x4141_4141);
            }
        }
    }
}

#[test]
fn random_trees_match_shadow_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for arch in Arch::ALL {
        for scheme in [Scheme::Regular, Scheme::SafeStackStyle, Scheme::ReturnStack] {
            let mut m = machine(arch, scheme);
            for _ in 0..20 {
                let t = CallTree::random(&mut rng, &pool(arch), 60, 12);
                // shadow stack of expected return sites, replayed by hand
                let mut shadow = Vec::new();
                let mut seen = Vec::new();
                let mut ops = Op::sequence(&t).into_iter();
                for op in ops.by_ref() {
                    match op {
                        Op::Call(f) => {
                            shadow.push(m.state().pc + INSTR_BYTES);
                            m.exec_call(&f).unwrap();
                            assert_eq!(m.state().sp() % 16, 0);
                        }
                        Op::Return => {
                            let ev = m.exec_return().unwrap();
                            seen.push(ev.target);
                            assert_eq!(Some(ev.target), shadow.pop());
                        }
                    }
                }
                assert_eq!(seen.len(), t.size());
                assert!(shadow.is_empty());
            }
        }
    }
}

#[test]
fn setjmp_longjmp_across_frames() {
    for arch in Arch::ALL {
        for calls in [0usize, 5] {
            let mut m = machine(arch, Scheme::ReturnStack);
            m.exec_call(&FuncDesc::canonical()).unwrap();
            let buf_addr = m.alloc_jmp_buf().unwrap();
            let rs = m.state().ret_sp();
            let sp = m.state().sp();
            let buf = m.setjmp(buf_addr).unwrap();
            assert_eq!(buf.kind, JmpKind::Safe);
            assert!(buf.marker.unwrap() > arch.space_size());
            assert_eq!(m.state().ret_sp(), rs + 8);
            for i in 0..calls {
                m.exec_call(&FuncDesc::new(format!("c{i}"), i % 3, 16)).unwrap();
            }
            m.longjmp(&buf).unwrap();
            assert_eq!(m.state().ret_sp(), rs + 8);
            assert_eq!(m.state().sp(), sp);
            assert_eq!(m.state().call_depth, 1);
            let ev = m.exec_return().unwrap();
            assert!(!ev.hijacked());
            assert_eq!(m.state().ret_sp(), rs - 8);
        }
    }
}

#[test]
fn random_depth_longjmp_unwinds_to_owner() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    let base = m.state().ret_sp();
    for _ in 0..100 {
        let pre = rng.gen_range(1..10);
        for i in 0..pre {
            m.exec_call(&FuncDesc::new(format!("a{i}"), 1, 16)).unwrap();
        }
        let buf_addr = m.alloc_jmp_buf().unwrap();
        let buf = m.setjmp(buf_addr).unwrap();
        let after = m.state().ret_sp();
        for i in 0..rng.gen_range(0..20) {
            m.exec_call(&FuncDesc::new(format!("b{i}"), 2, 32)).unwrap();
            if rng.gen_bool(0.3) {
                let b = m.alloc_jmp_buf().unwrap();
                m.setjmp(b).unwrap();
            }
        }
        m.longjmp(&buf).unwrap();
        assert_eq!(m.state().ret_sp(), after);
        assert_eq!(m.state().call_depth, pre);
        for _ in 0..pre {
            assert!(!m.exec_return().unwrap().hijacked());
        }
        assert_eq!(m.state().ret_sp(), base);
    }
}

#[test]
fn jump_buffer_holds_no_hidden_pointers() {
    for arch in Arch::ALL {
        let mut m = machine(arch, Scheme::ReturnStack);
        m.exec_call(&FuncDesc::canonical()).unwrap();
        let buf = m.alloc_jmp_buf().unwrap();
        m.setjmp(buf).unwrap();
        let region = m.region().unwrap();
        for i in 0..jmp_buf_words(arch) {
            assert!(!region.contains(m.space().read(buf + i * WORD).unwrap()));
        }
        assert!(leaks(&m).is_empty());
    }
}

#[test]
fn legacy_setjmp_leaks_hidden_pointers() {
    // SafeStack-style: the saved stack pointer is a safe-stack address
    let mut m = machine(Arch::X86_64, Scheme::SafeStackStyle);
    m.exec_call(&FuncDesc::canonical()).unwrap();
    let buf = m.alloc_jmp_buf().unwrap();
    let jb = m.setjmp(buf).unwrap();
    assert_eq!(jb.kind, JmpKind::Legacy);
    let sp_word = m.space().read(buf + (jmp_buf_words(Arch::X86_64) - 3) * WORD).unwrap();
    assert_eq!(sp_word, m.state().sp());
    assert!(leaks(&m).iter().any(|(a, _)| *a == buf + (jmp_buf_words(Arch::X86_64) - 3) * WORD));

    // a compatibility-mode C library stores the return-stack pointer itself
    let mut m = Machine::new(MachineConfig::new(Arch::X86_64, Scheme::ReturnStack).libc(LibraryMode::Compatible)).unwrap();
    m.exec_call(&FuncDesc::canonical()).unwrap();
    let buf = m.alloc_jmp_buf().unwrap();
    let jb = m.setjmp(buf).unwrap();
    assert_eq!(jb.kind, JmpKind::Legacy);
    assert_eq!(leaks(&m).len(), 1);
}

#[test]
fn stale_buffer_is_rejected() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    m.exec_call(&FuncDesc::canonical()).unwrap();
    m.exec_call(&FuncDesc::new("inner", 1, 16)).unwrap();
    let buf_addr = m.alloc_jmp_buf().unwrap();
    let buf = m.setjmp(buf_addr).unwrap();
    m.exec_return().unwrap();
    assert!(matches!(m.longjmp(&buf), Err(MachineError::Corruption(_))));
}

#[test]
fn safe_setjmp_needs_the_scheme_and_a_frame() {
    let mut m = machine(Arch::X86_64, Scheme::Regular);
    let b = m.alloc_jmp_buf().unwrap();
    assert!(matches!(m.safe_setjmp(b), Err(MachineError::WrongScheme(_))));
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    let b = m.alloc_jmp_buf().unwrap();
    assert!(matches!(m.safe_setjmp(b), Err(MachineError::NoFrame)));
}

#[test]
fn unwinding_three_frames() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    m.exec_call(&FuncDesc::canonical()).unwrap();
    let rs = m.state().ret_sp();
    for i in 0..3 {
        m.exec_call(&FuncDesc::new(format!("u{i}"), 1, 16)).unwrap();
    }
    let ctx = m.unwind_frames(3).unwrap();
    assert_eq!(ctx.accumulated_rsp_offset, 24);
    assert_eq!(m.state().ret_sp(), rs);
    assert!(!m.exec_return().unwrap().hijacked());
}

#[test]
fn unwinding_mixed_frames() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    m.exec_call(&FuncDesc::canonical()).unwrap();
    let rs = m.state().ret_sp();
    m.exec_call(&FuncDesc::new("a", 1, 16)).unwrap();
    m.exec_call(&FuncDesc::new("lib", 2, 16).with_library(LibraryMode::Aware)).unwrap();
    m.exec_call(&FuncDesc::new("b", 0, 0)).unwrap();
    assert_eq!(m.unwind_directives(3), [8, 0, 8]);
    let ctx = m.unwind_frames(3).unwrap();
    assert_eq!(ctx.accumulated_rsp_offset, 16);
    assert_eq!(m.state().ret_sp(), rs);
    // the heap context holds the offset, not a return-stack address
    assert_eq!(m.space().read(ctx.addr).unwrap(), 16);
    assert!(leaks(&m).is_empty());
}

#[test]
fn unwinding_matches_replayed_directives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = machine(Arch::Arm64, Scheme::ReturnStack);
    m.exec_call(&FuncDesc::canonical()).unwrap();
    let rs = m.state().ret_sp();
    for _ in 0..50 {
        let n = rng.gen_range(1..12);
        let mut expect = 0;
        for i in 0..n {
            let lib = match rng.gen_range(0..3) {
                0 => LibraryMode::Aware,
                1 => LibraryMode::Compatible,
                _ => LibraryMode::Secure,
            };
            m.exec_call(&FuncDesc::new(format!("r{i}"), 1, 16).with_library(lib)).unwrap();
            if lib == LibraryMode::Secure {
                expect += 8;
                if rng.gen_bool(0.25) {
                    let b = m.alloc_jmp_buf().unwrap();
                    m.setjmp(b).unwrap();
                    expect += 8;
                }
            }
        }
        let ctx = m.unwind_frames(n).unwrap();
        assert_eq!(ctx.accumulated_rsp_offset, expect);
        assert_eq!(m.state().ret_sp(), rs);
        assert_eq!(m.state().call_depth, 1);
    }
}

#[test]
fn bogus_directives_are_caught() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    m.exec_call(&FuncDesc::canonical()).unwrap();
    assert!(matches!(m.unwind(&[64]), Err(MachineError::Corruption(_))));
    assert!(matches!(m.unwind(&[8, 8]), Err(MachineError::NoFrame)));
}

#[test]
fn regular_unwinder_records_stack_pointers() {
    let mut m = machine(Arch::X86_64, Scheme::SafeStackStyle);
    m.exec_call(&FuncDesc::canonical()).unwrap();
    m.exec_call(&FuncDesc::new("x", 1, 16)).unwrap();
    let ctx = m.unwind_frames(1).unwrap();
    let word = m.space().read(ctx.addr).unwrap();
    assert!(m.state().stack().contains(&word));
    assert!(!leaks(&m).is_empty());
}

#[test]
fn return_stack_threads_leak_nothing() {
    for arch in Arch::ALL {
        let mut m = machine(arch, Scheme::ReturnStack);
        let ids: Vec<_> = (0..16).map(|_| m.spawn_thread(&FuncDesc::canonical()).unwrap()).collect();
        for &id in &ids {
            m.switch_to(id).unwrap();
            m.exec_call(&FuncDesc::new("w", 2, 32)).unwrap();
            let b = m.alloc_jmp_buf().unwrap();
            m.setjmp(b).unwrap();
        }
        m.switch_to(0).unwrap();
        assert_eq!(m.hidden_ranges().len(), 17);
        assert!(leaks(&m).is_empty(), "{arch}");
        m.space().check_invariants().unwrap();
    }
}

#[test]
fn safestack_thread_control_blocks_leak() {
    let mut m = machine(Arch::X86_64, Scheme::SafeStackStyle);
    let id = m.spawn_thread(&FuncDesc::canonical()).unwrap();
    let t = m.thread(id).unwrap();
    assert_eq!(m.space().read(t.tcb()).unwrap(), t.stack().start);
    assert!(leaks(&m).iter().any(|(a, _)| *a == t.tcb()));
}

#[test]
fn safestack_thread_stacks_are_adjacent() {
    let mut m = machine(Arch::X86_64, Scheme::SafeStackStyle);
    let ids: Vec<_> = (0..200).map(|_| m.spawn_thread(&leaf()).unwrap()).collect();
    for w in ids.windows(2) {
        let (a, b) = (m.thread(w[0]).unwrap().stack(), m.thread(w[1]).unwrap().stack());
        assert_eq!(b.end, a.start);
    }
}

#[test]
fn thread_exit_releases_stacks() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    let before = m.space().mapping_count();
    let id = m.spawn_thread(&leaf()).unwrap();
    let rs = m.thread(id).unwrap().return_stack().unwrap();
    m.exit_thread(id).unwrap();
    assert!(m.space().read(rs.base).is_err());
    // the control block page stays on the heap
    assert_eq!(m.space().mapping_count(), before + 1);
    assert!(matches!(m.switch_to(id), Err(MachineError::NoSuchThread(_))));
    assert!(matches!(m.exit_thread(0), Err(MachineError::NoSuchThread(0))));
}

#[test]
fn call_depth_measurement() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    assert_eq!(m.measure_call_depth(&CallTree::chain(&leaf(), 29)).unwrap(), 29);
    assert_eq!(m.measure_call_depth(&CallTree::leaf(leaf())).unwrap(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let t = CallTree::random(&mut rng, &pool(Arch::X86_64), 200, 30);
        assert_eq!(m.measure_call_depth(&t).unwrap(), t.depth());
    }
}

#[test]
fn lea_leaves_flags_alone() {
    let mut m = machine(Arch::X86_64, Scheme::ReturnStack);
    m.exec_call(&FuncDesc::new("z", 1, 0)).unwrap();
    m.state_mut().flags = 0xc0;
    let flags = m.state().flags;
    let b = m.alloc_jmp_buf().unwrap();
    m.setjmp(b).unwrap();
    assert_eq!(m.state().flags, flags);
    assert!(!Instr::Lea(8, Reg::R15, Reg::R15).sets_flags());
}

#[test]
fn interleaved_threads_keep_their_own_return_stacks() {
    for arch in Arch::ALL {
        let mut m = machine(arch, Scheme::ReturnStack);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ids: Vec<_> = (0..4).map(|_| m.spawn_thread(&leaf()).unwrap()).collect();
        let bases: Vec<u64> = ids.iter().map(|&i| m.thread(i).unwrap().ret_sp()).collect();
        let programs: Vec<_> = ids.iter().map(|&i| (i, CallTree::random(&mut rng, &pool(arch), 40, 8))).collect();
        let events = m.run_interleaved(&programs, 4).unwrap();
        for ((evs, (id, t)), base) in events.iter().zip(&programs).zip(bases) {
            assert_eq!(evs.len(), t.size());
            assert!(evs.iter().all(|e| !e.hijacked()));
            assert_eq!(m.thread(*id).unwrap().ret_sp(), base);
        }
        assert_eq!(m.current(), 0);
    }
}

#[test]
fn agstack_locals_live_on_the_heap() {
    let cfg = MachineConfig::new(Arch::X86_64, Scheme::SafeStackStyle).locals_on_safe_stack(false);
    let mut m = Machine::new(cfg).unwrap();
    m.exec_call(&FuncDesc::new("buf", 0, 64)).unwrap();
    let a = m.store_local(8, PageContent::Data(1)).unwrap();
    assert!(m.state().unsafe_stack().unwrap().contains(&a));
    assert!(!m.state().stack().contains(&a));
    assert!(matches!(m.local_addr(64), Err(MachineError::LocalOutOfFrame { .. })));
}
