//! Kernel-level threads: per-thread stacks, a control block in heap memory,
//! and register contexts the kernel keeps out of the process's reach.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CallTree, FuncDesc, Machine, MachineError, ReturnEvent, THREAD_START, THREAD_STACK_PAGES};
use crate::arch::PAGE_SIZE;
use crate::space::{Permission, Zone};

pub type ThreadId = usize;

/// One step of a thread program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Call(FuncDesc),
    Return,
}

impl Op {
    /// Flattens a call tree into call/return steps.
    pub fn sequence(tree: &CallTree) -> Vec<Op> {
        let mut ops = vec![Op::Call(tree.func.clone())];
        for c in &tree.children {
            ops.extend(Op::sequence(c));
        }
        ops.push(Op::Return);
        ops
    }
}

impl Machine {
    /// Creates a thread and runs `entry`'s prologue on it. The spawning
    /// thread stays current.
    pub fn spawn_thread(&mut self, entry: &FuncDesc) -> Result<ThreadId, MachineError> {
        let base = self.space.map(THREAD_STACK_PAGES, Permission::RW, Zone::MmapSpace)?;
        let stack = base..base + THREAD_STACK_PAGES * PAGE_SIZE;
        let id = self.threads.len();
        let pc = self.code.entry(THREAD_START)?;
        let st = self.new_thread_state(id, stack, pc)?;
        self.threads.push(Some(st));
        let parent = self.current;
        self.switch_to(id)?;
        let started = self.exec_call(entry);
        self.current = parent;
        started?;
        Ok(id)
    }

    /// Context switch. The outgoing register file simply stays in the
    /// machine's thread table.
    pub fn switch_to(&mut self, id: ThreadId) -> Result<(), MachineError> {
        match self.threads.get(id) {
            Some(Some(_)) => {
                self.current = id;
                Ok(())
            }
            _ => Err(MachineError::NoSuchThread(id)),
        }
    }

    /// Tears a thread down and releases its stacks.
    pub fn exit_thread(&mut self, id: ThreadId) -> Result<(), MachineError> {
        if id == 0 {
            return Err(MachineError::NoSuchThread(id));
        }
        let st = self.threads.get_mut(id).and_then(Option::take).ok_or(MachineError::NoSuchThread(id))?;
        if let (Some(region), Some(h)) = (self.region, st.return_stack) {
            region.destroy_stack(&mut self.space, h)?;
        }
        self.space.unmap(st.stack.start, (st.stack.end - st.stack.start) / PAGE_SIZE)?;
        if self.current == id {
            self.current = 0;
        }
        Ok(())
    }

    /// Runs one program per thread, interleaving single calls and returns
    /// in a seed-determined order. Returns each thread's return events.
    pub fn run_interleaved(
        &mut self,
        programs: &[(ThreadId, CallTree)],
        seed: u64,
    ) -> Result<Vec<Vec<ReturnEvent>>, MachineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops: Vec<Vec<Op>> = programs.iter().map(|(_, t)| Op::sequence(t)).collect();
        let mut cursor = vec![0usize; programs.len()];
        let mut events = vec![Vec::new(); programs.len()];
        let original = self.current;
        loop {
            let runnable: Vec<usize> = (0..programs.len()).filter(|&i| cursor[i] < ops[i].len()).collect();
            if runnable.is_empty() {
                break;
            }
            let pick = runnable[rng.gen_range(0..runnable.len())];
            self.switch_to(programs[pick].0)?;
            match &ops[pick][cursor[pick]] {
                Op::Call(f) => self.exec_call(f)?,
                Op::Return => events[pick].push(self.exec_return()?),
            }
            cursor[pick] += 1;
        }
        self.current = original;
        Ok(events)
    }
}
