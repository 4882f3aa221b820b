//! A toy two-architecture machine that executes emitted prologues and
//! epilogues instruction by instruction against an [`AddressSpace`].
//!
//! Code is symbolic: every function gets a slot in the code segment and each
//! instruction occupies four bytes, so return addresses are real code
//! addresses without any byte encoding.

pub mod func;
pub mod isa;
mod thread;
mod trace;

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Arch, PAGE_SIZE, WORD};
use crate::instrument::{emit, EmitError};
use crate::region::{init_region, RegionError, RegionHandle, RegionParams, StackHandle};
use crate::space::{
    create_layout, AddressSpace, Fault, LayoutConfig, LayoutError, PageContent, Permission, SpaceError, Zone,
    CODE_PAGES, MAIN_STACK_PAGES,
};

pub use func::{CallTree, FuncDesc, LibraryMode, ProgramError};
use isa::{Instr, Reg, REG_COUNT};
pub use thread::{Op, ThreadId};
pub use trace::{to_json_lines, TraceEntry};

/// Bytes of code reserved per function.
pub const CODE_SLOT: u64 = 0x1000;
pub const INSTR_BYTES: u64 = 4;
/// Pages of every thread stack allocated at spawn time.
pub const THREAD_STACK_PAGES: u64 = 1 << 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One stack for everything.
    Regular,
    /// Return addresses (and, optionally, other safe objects) on a hidden
    /// safe stack that `RSP`/`SP` points into; data on a separate unsafe stack.
    #[serde(rename = "safestack")]
    SafeStackStyle,
    /// Return addresses only, on return stacks inside the region.
    #[serde(rename = "returnstack")]
    ReturnStack,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Regular => "regular",
            Scheme::SafeStackStyle => "safestack",
            Scheme::ReturnStack => "returnstack",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(Scheme::Regular),
            "safestack" => Ok(Scheme::SafeStackStyle),
            "returnstack" => Ok(Scheme::ReturnStack),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum MachineError {
    #[error(transparent)]
    Fault(#[from] Fault),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("no active frame")]
    NoFrame,
    #[error("return stack corrupted: {0}")]
    Corruption(String),
    #[error("thread {0} does not exist")]
    NoSuchThread(ThreadId),
    #[error("code segment full")]
    CodeFull,
    #[error("operation requires the {0} scheme")]
    WrongScheme(Scheme),
    #[error("local offset {offset} outside a {size}-byte frame")]
    LocalOutOfFrame { offset: u64, size: u64 },
}

#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub layout: LayoutConfig,
    pub scheme: Scheme,
    pub seed: u64,
    pub region: RegionParams,
    /// SafeStack keeps non-escaping locals on the safe stack; a stack that
    /// holds return addresses only does not.
    pub locals_on_safe_stack: bool,
    /// Build of the C library (`setjmp` flavour).
    pub libc: LibraryMode,
    pub trace: bool,
}

impl MachineConfig {
    pub fn new(arch: Arch, scheme: Scheme) -> Self {
        MachineConfig {
            layout: LayoutConfig::defaults(arch),
            scheme,
            seed: 0,
            region: RegionParams::default(),
            locals_on_safe_stack: true,
            libc: LibraryMode::Secure,
            trace: false,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn region(mut self, region: RegionParams) -> Self {
        self.region = region;
        self
    }

    pub fn libc(mut self, libc: LibraryMode) -> Self {
        self.libc = libc;
        self
    }

    pub fn locals_on_safe_stack(mut self, yes: bool) -> Self {
        self.locals_on_safe_stack = yes;
        self
    }

    pub fn trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    pub fn arch(&self) -> Arch {
        self.layout.arch
    }
}

#[derive(Debug, Clone)]
struct RegFile([PageContent; REG_COUNT]);

impl RegFile {
    fn get(&self, r: Reg) -> PageContent {
        self.0[r.index()]
    }

    fn value(&self, r: Reg) -> u64 {
        self.get(r).value()
    }

    fn set(&mut self, r: Reg, c: PageContent) {
        self.0[r.index()] = c;
    }
}

#[derive(Debug, Clone)]
struct Frame {
    name: String,
    epilogue: Vec<Instr>,
    instrumented: bool,
    markers: Vec<u64>,
    locals_bytes: u64,
    call_site_sp: u64,
    expected_return: u64,
    entry: u64,
    body_start: u64,
    /// Bytes reserved on the separate unsafe stack.
    unsafe_reserved: u64,
}

/// Per-thread architectural state. Switched-out threads are held by the
/// machine outside the simulated address space.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub id: ThreadId,
    pub arch: Arch,
    pub scheme: Scheme,
    regs: RegFile,
    pub pc: u64,
    pub flags: u64,
    pub call_depth: usize,
    pub max_call_depth: usize,
    frames: Vec<Frame>,
    return_stack: Option<StackHandle>,
    stack: Range<u64>,
    unsafe_stack: Option<Range<u64>>,
    usp: u64,
    tcb: u64,
    unwind_ctx: Option<u64>,
}

impl MachineState {
    pub fn reg(&self, r: Reg) -> u64 {
        self.regs.value(r)
    }

    pub fn sp(&self) -> u64 {
        self.reg(Reg::sp(self.arch))
    }

    /// Value of R15 / X28.
    pub fn ret_sp(&self) -> u64 {
        self.reg(Reg::rsp_dedicated(self.arch))
    }

    pub fn return_stack(&self) -> Option<StackHandle> {
        self.return_stack
    }

    /// The stack `RSP`/`SP` points into.
    pub fn stack(&self) -> Range<u64> {
        self.stack.clone()
    }

    pub fn unsafe_stack(&self) -> Option<Range<u64>> {
        self.unsafe_stack.clone()
    }

    pub fn tcb(&self) -> u64 {
        self.tcb
    }

    pub fn frame_names(&self) -> Vec<&str> {
        self.frames.iter().map(|f| f.name.as_str()).collect()
    }
}

/// Outcome of one return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReturnEvent {
    pub target: u64,
    /// The call site's successor, known to the harness but not to the code.
    pub expected: u64,
}

impl ReturnEvent {
    pub fn hijacked(&self) -> bool {
        self.target != self.expected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JmpKind {
    /// Marker-based, never stores the return-stack pointer.
    Safe,
    /// Stores the full register file, dedicated register included.
    Legacy,
}

/// Handle to a jump buffer living in heap memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JmpBuf {
    pub addr: u64,
    pub marker: Option<u64>,
    pub kind: JmpKind,
    depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UnwindContext {
    pub accumulated_rsp_offset: u64,
    pub frame_cursor: usize,
    /// Heap address the context was spilled to.
    pub addr: u64,
}

#[derive(Debug, Clone)]
struct CodeMap {
    base: u64,
    slots: HashMap<String, u64>,
}

impl CodeMap {
    fn entry(&mut self, name: &str) -> Result<u64, MachineError> {
        if let Some(&e) = self.slots.get(name) {
            return Ok(e);
        }
        let n = self.slots.len() as u64;
        if (n + 1) * CODE_SLOT > CODE_PAGES * PAGE_SIZE {
            return Err(MachineError::CodeFull);
        }
        let e = self.base + n * CODE_SLOT;
        self.slots.insert(name.to_string(), e);
        Ok(e)
    }
}

enum Flow {
    Next,
    Jump(u64),
}

#[derive(Debug, Clone)]
pub struct Machine {
    config: MachineConfig,
    space: AddressSpace,
    region: Option<RegionHandle>,
    rng: ChaCha8Rng,
    code: CodeMap,
    threads: Vec<Option<MachineState>>,
    current: ThreadId,
    markers: u64,
    trace: Option<Vec<TraceEntry>>,
}

const START: &str = "_start";
const THREAD_START: &str = "thread_start";

fn step(
    space: &mut AddressSpace,
    st: &mut MachineState,
    code: &mut CodeMap,
    instr: &Instr,
) -> Result<Flow, MachineError> {
    use Instr::*;
    use PageContent::Data;
    let ea = |st: &MachineState, m: &isa::Mem| {
        let base = st.regs.value(m.base);
        match m.index {
            isa::Index::Offset | isa::Index::Pre => base.wrapping_add_signed(m.offset),
            isa::Index::Post => base,
        }
    };
    let writeback = |st: &mut MachineState, m: &isa::Mem| {
        if m.index != isa::Index::Offset {
            let v = st.regs.value(m.base).wrapping_add_signed(m.offset);
            st.regs.set(m.base, Data(v));
        }
    };
    let flags_of = |r: u64| ((r == 0) as u64) << 6 | (r >> 63) << 7;
    match instr {
        Push(r) => {
            let sp = st.regs.value(Reg::Rsp) - WORD;
            space.write(sp, st.regs.get(*r))?;
            st.regs.set(Reg::Rsp, Data(sp));
        }
        Pop(r) => {
            let sp = st.regs.value(Reg::Rsp);
            let c = space.read_content(sp)?;
            st.regs.set(Reg::Rsp, Data(sp + WORD));
            st.regs.set(*r, c);
        }
        PopMem(b, d) => {
            let sp = st.regs.value(Reg::Rsp);
            let c = space.read_content(sp)?;
            space.write(st.regs.value(*b).wrapping_add_signed(*d), c)?;
            st.regs.set(Reg::Rsp, Data(sp + WORD));
        }
        Mov(s, d) => st.regs.set(*d, st.regs.get(*s)),
        Lea(o, b, d) => st.regs.set(*d, Data(st.regs.value(*b).wrapping_add_signed(*o))),
        SubImm(i, d) => {
            let r = st.regs.value(*d).wrapping_sub(*i);
            st.regs.set(*d, Data(r));
            st.flags = flags_of(r);
        }
        AddImm(i, d) => {
            let r = st.regs.value(*d).wrapping_add(*i);
            st.regs.set(*d, Data(r));
            st.flags = flags_of(r);
        }
        Call(t) => {
            let sp = st.regs.value(Reg::Rsp) - WORD;
            space.write(sp, PageContent::ReturnAddress(st.pc + INSTR_BYTES))?;
            st.regs.set(Reg::Rsp, Data(sp));
            return Ok(Flow::Jump(code.entry(t)?));
        }
        Retq => {
            let sp = st.regs.value(Reg::Rsp);
            let c = space.read_content(sp)?;
            st.regs.set(Reg::Rsp, Data(sp + WORD));
            return Ok(Flow::Jump(c.value()));
        }
        JmpMem(b, d) => {
            let c = space.read_content(st.regs.value(*b).wrapping_add_signed(*d))?;
            return Ok(Flow::Jump(c.value()));
        }
        Jmp(t) | B(t) => return Ok(Flow::Jump(code.entry(t)?)),
        Str(r, m) => {
            space.write(ea(st, m), st.regs.get(*r))?;
            writeback(st, m);
        }
        Ldr(r, m) => {
            let c = space.read_content(ea(st, m))?;
            writeback(st, m);
            st.regs.set(*r, c);
        }
        Stp(a, b, m) => {
            let at = ea(st, m);
            space.write(at, st.regs.get(*a))?;
            space.write(at + WORD, st.regs.get(*b))?;
            writeback(st, m);
        }
        Ldp(a, b, m) => {
            let at = ea(st, m);
            let (ca, cb) = (space.read_content(at)?, space.read_content(at + WORD)?);
            writeback(st, m);
            st.regs.set(*a, ca);
            st.regs.set(*b, cb);
        }
        ASub(d, s, i) => st.regs.set(*d, Data(st.regs.value(*s).wrapping_sub(*i))),
        AAdd(d, s, i) => st.regs.set(*d, Data(st.regs.value(*s).wrapping_add(*i))),
        Bl(t) => {
            st.regs.set(Reg::Lr, PageContent::ReturnAddress(st.pc + INSTR_BYTES));
            return Ok(Flow::Jump(code.entry(t)?));
        }
        Ret => return Ok(Flow::Jump(st.regs.value(Reg::Lr))),
        Body => {}
    }
    Ok(Flow::Next)
}

impl Machine {
    /// Boots a process: randomized layout, image, main stack, and (for the
    /// return-stack scheme) the loader-time region and main return stack.
    pub fn new(config: MachineConfig) -> Result<Machine, MachineError> {
        let layout = create_layout(config.layout, config.seed)?;
        Machine::from_space(AddressSpace::boot(layout), config)
    }

    /// Like [`Machine::new`] on an already booted space, e.g. one with
    /// libraries mapped first.
    pub fn from_space(mut space: AddressSpace, config: MachineConfig) -> Result<Machine, MachineError> {
        let arch = space.arch();
        let rng = ChaCha8Rng::seed_from_u64(config.seed.rotate_left(17) ^ 0x5e_ed0f_5ac5);
        let region = match config.scheme {
            Scheme::ReturnStack => Some(init_region(&mut space, config.region)?),
            _ => None,
        };
        let code = CodeMap { base: space.layout().code_base, slots: HashMap::new() };
        let trace = config.trace.then(Vec::new);
        let mut m = Machine { config, space, region, rng, code, threads: Vec::new(), current: 0, markers: 0, trace };
        let top = m.space.layout().stack_base;
        let stack = top - MAIN_STACK_PAGES * PAGE_SIZE..top;
        let entry = m.code.entry(START)?;
        let st = m.new_thread_state(0, stack, entry)?;
        m.threads.push(Some(st));
        debug_assert_eq!(arch, m.arch());
        Ok(m)
    }

    fn new_thread_state(&mut self, id: ThreadId, stack: Range<u64>, pc: u64) -> Result<MachineState, MachineError> {
        let arch = self.arch();
        let mut regs = RegFile([PageContent::Zero; REG_COUNT]);
        regs.set(Reg::sp(arch), PageContent::Data(stack.end));
        let mut return_stack = None;
        let (mut unsafe_stack, mut usp) = (None, 0);
        match self.config.scheme {
            Scheme::ReturnStack => {
                let region = self.region.expect("region initialized at boot");
                let h = region.create_stack(&mut self.space, &mut self.rng)?;
                regs.set(Reg::rsp_dedicated(arch), PageContent::Data(h.base));
                return_stack = Some(h);
            }
            Scheme::SafeStackStyle => {
                // heap-backed, so mmap'd safe stacks of children stay adjacent
                let base = self.space.map(THREAD_STACK_PAGES, Permission::RW, Zone::Heap)?;
                let r = base..base + THREAD_STACK_PAGES * PAGE_SIZE;
                usp = r.end;
                unsafe_stack = Some(r);
            }
            Scheme::Regular => {}
        }
        let tcb = self.space.map(1, Permission::RW, Zone::Heap)?;
        // the runtime's view of the thread: its stack bounds
        self.space.write(tcb, PageContent::Data(stack.start))?;
        self.space.write(tcb + WORD, PageContent::Data(stack.end - stack.start))?;
        if let Some(u) = &unsafe_stack {
            self.space.write(tcb + 2 * WORD, PageContent::Data(u.end))?;
        }
        Ok(MachineState {
            id,
            arch,
            scheme: self.config.scheme,
            regs,
            pc,
            flags: 0,
            call_depth: 0,
            max_call_depth: 0,
            frames: Vec::new(),
            return_stack,
            stack,
            unsafe_stack,
            usp,
            tcb,
            unwind_ctx: None,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.space.arch()
    }

    pub fn scheme(&self) -> Scheme {
        self.config.scheme
    }

    pub fn space(&self) -> &AddressSpace {
        &self.space
    }

    /// Mutable access for attacker writes in experiments.
    pub fn space_mut(&mut self) -> &mut AddressSpace {
        &mut self.space
    }

    pub fn into_space(self) -> AddressSpace {
        self.space
    }

    pub fn region(&self) -> Option<RegionHandle> {
        self.region
    }

    pub fn current(&self) -> ThreadId {
        self.current
    }

    pub fn state(&self) -> &MachineState {
        self.threads[self.current].as_ref().expect("current thread is live")
    }

    pub fn thread(&self, id: ThreadId) -> Option<&MachineState> {
        self.threads.get(id).and_then(Option::as_ref)
    }

    pub fn thread_ids(&self) -> Vec<ThreadId> {
        self.threads.iter().enumerate().filter(|(_, t)| t.is_some()).map(|(i, _)| i).collect()
    }

    /// Code address of `name`, allocating a slot on first use.
    pub fn entry_of(&mut self, name: &str) -> Result<u64, MachineError> {
        self.code.entry(name)
    }

    /// Defender-side ground truth: every live hidden stack.
    pub fn hidden_ranges(&self) -> Vec<Range<u64>> {
        let pages = self.config.region.stack_pages;
        self.threads
            .iter()
            .flatten()
            .filter_map(|t| match self.config.scheme {
                Scheme::Regular => None,
                Scheme::SafeStackStyle => Some(t.stack.clone()),
                Scheme::ReturnStack => t.return_stack.map(|h| h.base..h.end(pages)),
            })
            .collect()
    }

    fn exec(&mut self, instr: &Instr) -> Result<Flow, MachineError> {
        let st = self.threads[self.current].as_mut().expect("current thread is live");
        let flow = step(&mut self.space, st, &mut self.code, instr)?;
        if let Some(t) = &mut self.trace {
            t.push(TraceEntry::capture(st, instr));
        }
        if let Flow::Next = flow {
            st.pc += INSTR_BYTES;
        }
        Ok(flow)
    }

    fn state_mut(&mut self) -> &mut MachineState {
        self.threads[self.current].as_mut().expect("current thread is live")
    }

    /// Executes the call instruction and `callee`'s prologue.
    pub fn exec_call(&mut self, callee: &FuncDesc) -> Result<(), MachineError> {
        let arch = self.arch();
        let em = emit(arch, callee, self.config.scheme)?;
        let entry = self.code.entry(&callee.name)?;
        let st = self.state();
        let call_site_sp = st.sp();
        let expected_return = st.pc + INSTR_BYTES;
        debug_assert_eq!(call_site_sp % 16, 0, "stack misaligned at call");
        let call = match arch {
            Arch::X86_64 => Instr::Call(callee.name.clone()),
            Arch::Arm64 => Instr::Bl(callee.name.clone()),
        };
        if let Flow::Jump(t) = self.exec(&call)? {
            self.state_mut().pc = t;
        }
        for i in &em.prologue {
            self.exec(i)?;
        }
        let separate_unsafe = self.config.scheme == Scheme::SafeStackStyle && !self.config.locals_on_safe_stack;
        let st = self.state_mut();
        let unsafe_reserved = if separate_unsafe { callee.locals_bytes } else { 0 };
        st.usp -= unsafe_reserved;
        st.frames.push(Frame {
            name: callee.name.clone(),
            epilogue: em.epilogue,
            instrumented: em.instrumented,
            markers: Vec::new(),
            locals_bytes: callee.locals_bytes,
            call_site_sp,
            expected_return,
            entry,
            body_start: st.pc,
            unsafe_reserved,
        });
        st.call_depth += 1;
        st.max_call_depth = st.max_call_depth.max(st.call_depth);
        Ok(())
    }

    /// Executes the current frame's epilogue and transfers control to the
    /// return address it fetched.
    pub fn exec_return(&mut self) -> Result<ReturnEvent, MachineError> {
        let arch = self.arch();
        let Some(frame) = self.state().frames.last().cloned() else {
            if self.config.scheme == Scheme::ReturnStack {
                // a return with nothing on the return stack reads the guard page
                let r = Reg::rsp_dedicated(arch);
                let seq = match arch {
                    Arch::X86_64 => [Instr::Lea(-8, r, r), Instr::JmpMem(r, 0)],
                    Arch::Arm64 => [Instr::Ldr(Reg::Lr, isa::Mem::pre(r, -8)), Instr::Ret],
                };
                for i in &seq {
                    self.exec(i)?;
                }
            }
            return Err(MachineError::NoFrame);
        };
        for _ in &frame.markers {
            self.exec(&drop_slot(arch))?;
        }
        let mut target = None;
        for i in &frame.epilogue {
            if let Flow::Jump(t) = self.exec(i)? {
                target = Some(t);
            }
        }
        let target = target.expect("epilogues end in a control transfer");
        let st = self.state_mut();
        st.frames.pop();
        st.call_depth -= 1;
        st.usp += frame.unsafe_reserved;
        st.pc = target;
        if let Some(caller) = st.frames.last() {
            // keep call sites inside the caller's slot
            if st.pc + 2 * INSTR_BYTES >= caller.entry + CODE_SLOT {
                st.pc = caller.body_start;
            }
        }
        Ok(ReturnEvent { target, expected: frame.expected_return })
    }

    /// Writes `content` into the current frame's locals at `offset`.
    pub fn store_local(&mut self, offset: u64, content: PageContent) -> Result<u64, MachineError> {
        let addr = self.local_addr(offset)?;
        self.space.write(addr, content)?;
        Ok(addr)
    }

    pub fn local_addr(&self, offset: u64) -> Result<u64, MachineError> {
        let st = self.state();
        let frame = st.frames.last().ok_or(MachineError::NoFrame)?;
        if offset >= frame.locals_bytes {
            return Err(MachineError::LocalOutOfFrame { offset, size: frame.locals_bytes });
        }
        if frame.unsafe_reserved > 0 {
            Ok(st.usp + offset)
        } else {
            Ok(st.sp() + offset)
        }
    }

    /// Address of the current frame's return address on the regular stack,
    /// if it has one there.
    pub fn return_slot(&self) -> Option<u64> {
        let st = self.state();
        let f = st.frames.last()?;
        if f.instrumented {
            return None;
        }
        match self.arch() {
            Arch::X86_64 => Some(f.call_site_sp - WORD),
            // saved LR sits right above the saved FP
            Arch::Arm64 => Some(st.reg(Reg::Fp) + WORD),
        }
    }

    /// Runs `tree` on the current thread, returning every return in order.
    pub fn run_tree(&mut self, tree: &CallTree) -> Result<Vec<ReturnEvent>, MachineError> {
        let mut events = Vec::with_capacity(tree.size());
        self.run_tree_into(tree, &mut events)?;
        Ok(events)
    }

    fn run_tree_into(&mut self, tree: &CallTree, events: &mut Vec<ReturnEvent>) -> Result<(), MachineError> {
        self.exec_call(&tree.func)?;
        for c in &tree.children {
            self.run_tree_into(c, events)?;
        }
        events.push(self.exec_return()?);
        Ok(())
    }

    /// Deepest nesting reached while running `tree`.
    pub fn measure_call_depth(&mut self, tree: &CallTree) -> Result<usize, MachineError> {
        let base = self.state().call_depth;
        self.state_mut().max_call_depth = base;
        self.run_tree(tree)?;
        Ok(self.state().max_call_depth - base)
    }

    fn heap_alloc(&mut self, bytes: u64) -> Result<u64, MachineError> {
        let pages = bytes.div_ceil(PAGE_SIZE).max(1);
        Ok(self.space.map(pages, Permission::RW, Zone::Heap)?)
    }

    /// A fresh heap buffer large enough for a jump buffer.
    pub fn alloc_jmp_buf(&mut self) -> Result<u64, MachineError> {
        self.heap_alloc(jmp_buf_words(self.arch()) * WORD)
    }

    fn saved_regs(arch: Arch) -> Vec<Reg> {
        let mut regs = Reg::spill_order(arch).to_vec();
        regs.push(match arch {
            Arch::X86_64 => Reg::Rbp,
            Arch::Arm64 => Reg::Fp,
        });
        regs.push(Reg::sp(arch));
        regs
    }

    /// The C library's `setjmp`: marker based under the return-stack
    /// scheme unless the library is a legacy build.
    pub fn setjmp(&mut self, buf_addr: u64) -> Result<JmpBuf, MachineError> {
        if self.config.scheme == Scheme::ReturnStack && self.config.libc != LibraryMode::Compatible {
            self.safe_setjmp(buf_addr)
        } else {
            self.legacy_setjmp(buf_addr)
        }
    }

    fn write_jmp_buf(&mut self, buf_addr: u64, last: PageContent) -> Result<(), MachineError> {
        let arch = self.arch();
        let st = self.state();
        let mut words: Vec<PageContent> = Machine::saved_regs(arch).into_iter().map(|r| st.regs.get(r)).collect();
        words.push(PageContent::CodePointer(st.pc + INSTR_BYTES));
        words.push(last);
        for (i, w) in words.into_iter().enumerate() {
            self.space.write(buf_addr + i as u64 * WORD, w)?;
        }
        Ok(())
    }

    fn legacy_setjmp(&mut self, buf_addr: u64) -> Result<JmpBuf, MachineError> {
        let dedicated = self.state().regs.get(Reg::rsp_dedicated(self.arch()));
        self.write_jmp_buf(buf_addr, dedicated)?;
        Ok(JmpBuf { addr: buf_addr, marker: None, kind: JmpKind::Legacy, depth: self.state().call_depth })
    }

    /// Pushes a fresh marker on the return stack and stores it, not the
    /// return-stack pointer, in the buffer.
    pub fn safe_setjmp(&mut self, buf_addr: u64) -> Result<JmpBuf, MachineError> {
        if self.config.scheme != Scheme::ReturnStack {
            return Err(MachineError::WrongScheme(Scheme::ReturnStack));
        }
        if self.state().frames.is_empty() {
            return Err(MachineError::NoFrame);
        }
        let arch = self.arch();
        self.markers += 1;
        let marker = arch.space_size() + self.markers;
        let r = Reg::rsp_dedicated(arch);
        self.space.write(self.state().ret_sp(), PageContent::Data(marker))?;
        self.exec(&Instr::Lea(8, r, r).for_arch(arch))?;
        self.state_mut().frames.last_mut().expect("checked above").markers.push(marker);
        self.write_jmp_buf(buf_addr, PageContent::Data(marker))?;
        Ok(JmpBuf { addr: buf_addr, marker: Some(marker), kind: JmpKind::Safe, depth: self.state().call_depth })
    }

    fn restore_from_buf(&mut self, buf_addr: u64) -> Result<u64, MachineError> {
        let arch = self.arch();
        let regs = Machine::saved_regs(arch);
        let mut vals = Vec::with_capacity(regs.len() + 2);
        for i in 0..regs.len() as u64 + 2 {
            vals.push(self.space.read_content(buf_addr + i * WORD)?);
        }
        let st = self.state_mut();
        for (r, v) in regs.iter().zip(&vals) {
            st.regs.set(*r, *v);
        }
        st.pc = vals[regs.len()].value();
        Ok(vals[regs.len() + 1].value())
    }

    fn truncate_frames(&mut self, keep: usize) {
        let st = self.state_mut();
        while st.frames.len() > keep {
            let f = st.frames.pop().expect("len checked");
            st.usp += f.unsafe_reserved;
        }
        st.call_depth = st.frames.len();
    }

    pub fn longjmp(&mut self, buf: &JmpBuf) -> Result<(), MachineError> {
        match buf.kind {
            JmpKind::Safe => self.safe_longjmp(buf),
            JmpKind::Legacy => {
                let dedicated = self.restore_from_buf(buf.addr)?;
                let r = Reg::rsp_dedicated(self.arch());
                self.state_mut().regs.set(r, PageContent::Data(dedicated));
                self.truncate_frames(buf.depth);
                Ok(())
            }
        }
    }

    /// Walks the return stack down to the buffer's marker and leaves the
    /// pointer just above it, i.e. where `safe_setjmp` left it.
    pub fn safe_longjmp(&mut self, buf: &JmpBuf) -> Result<(), MachineError> {
        let arch = self.arch();
        let words = jmp_buf_words(arch);
        let marker = self.space.read(buf.addr + (words - 1) * WORD)?;
        let mut p = self.state().ret_sp();
        loop {
            p -= WORD;
            match self.space.read(p) {
                Ok(v) if v == marker => break,
                Ok(_) => {}
                Err(_) => return Err(MachineError::Corruption(format!("marker {marker:#x} not on the return stack"))),
            }
        }
        let owner = self
            .state()
            .frames
            .iter()
            .rposition(|f| f.markers.contains(&marker))
            .ok_or_else(|| MachineError::Corruption(format!("marker {marker:#x} has no live frame")))?;
        self.restore_from_buf(buf.addr)?;
        let r = Reg::rsp_dedicated(arch);
        self.state_mut().regs.set(r, PageContent::Data(p + WORD));
        self.truncate_frames(owner + 1);
        let f = self.state_mut().frames.last_mut().expect("owner kept");
        let keep = f.markers.iter().position(|m| *m == marker).expect("owner holds marker") + 1;
        f.markers.truncate(keep);
        Ok(())
    }

    /// Return-stack spill size of the top `frames` frames, innermost first:
    /// 8 per return address plus 8 per setjmp marker; 0 for frames of
    /// uninstrumented code.
    pub fn unwind_directives(&self, frames: usize) -> Vec<u64> {
        self.state()
            .frames
            .iter()
            .rev()
            .take(frames)
            .map(|f| if f.instrumented { WORD * (1 + f.markers.len() as u64) } else { 0 })
            .collect()
    }

    /// Unwinds one frame per directive, accumulating the offset in a heap
    /// context and finally subtracting it from the return-stack pointer.
    pub fn unwind(&mut self, directives: &[u64]) -> Result<UnwindContext, MachineError> {
        let n = directives.len();
        if n == 0 {
            return Ok(UnwindContext::default());
        }
        if n > self.state().frames.len() {
            return Err(MachineError::NoFrame);
        }
        let arch = self.arch();
        let scheme = self.config.scheme;
        let ctx_addr = match self.state().unwind_ctx {
            Some(a) => a,
            None => {
                let a = self.heap_alloc(2 * WORD)?;
                self.state_mut().unwind_ctx = Some(a);
                a
            }
        };
        let mut ctx = UnwindContext { addr: ctx_addr, ..Default::default() };
        let frames: Vec<Frame> = self.state().frames.iter().rev().take(n).cloned().collect();
        for (d, f) in directives.iter().zip(&frames) {
            ctx.accumulated_rsp_offset += d;
            ctx.frame_cursor += 1;
            let cursor = match scheme {
                Scheme::ReturnStack => ctx.accumulated_rsp_offset,
                // the stock unwinder records the frame's stack pointer
                _ => f.call_site_sp,
            };
            self.space.write(ctx_addr, PageContent::Data(cursor))?;
            self.space.write(ctx_addr + WORD, PageContent::Data(ctx.frame_cursor as u64))?;
        }
        if scheme == Scheme::ReturnStack {
            let rs = self.state().return_stack.expect("return-stack thread");
            let cur = self.state().ret_sp();
            let target = cur
                .checked_sub(ctx.accumulated_rsp_offset)
                .filter(|t| *t >= rs.base)
                .ok_or_else(|| MachineError::Corruption("unwound below the return stack base".into()))?;
            let r = Reg::rsp_dedicated(arch);
            self.exec(&Instr::Lea(-(ctx.accumulated_rsp_offset as i64), r, r).for_arch(arch))?;
            debug_assert_eq!(self.state().ret_sp(), target);
        }
        let landing = frames.last().expect("n > 0");
        let (sp, pc) = (landing.call_site_sp, landing.expected_return);
        let keep = self.state().frames.len() - n;
        self.truncate_frames(keep);
        let st = self.state_mut();
        st.regs.set(Reg::sp(arch), PageContent::Data(sp));
        st.pc = pc;
        Ok(ctx)
    }

    /// Unwinds the top `frames` frames using their own directives.
    pub fn unwind_frames(&mut self, frames: usize) -> Result<UnwindContext, MachineError> {
        let d = self.unwind_directives(frames);
        if d.len() < frames {
            return Err(MachineError::NoFrame);
        }
        self.unwind(&d)
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Drops one slot from the return stack.
fn drop_slot(arch: Arch) -> Instr {
    Instr::Lea(-8, Reg::R15, Reg::R15).for_arch(arch)
}

/// Words in a jump buffer: callee-saved registers, frame pointer, stack
/// pointer, resume address, and the marker (or dedicated register).
pub fn jmp_buf_words(arch: Arch) -> u64 {
    Reg::spill_order(arch).len() as u64 + 4
}

impl Instr {
    /// Maps a flag-free x86 `LEA` on R15 to the equivalent ARM64 `ADD`/`SUB`
    /// on X28; other instructions are returned unchanged.
    fn for_arch(self, arch: Arch) -> Instr {
        match (arch, self) {
            (Arch::Arm64, Instr::Lea(off, Reg::R15, Reg::R15)) if off >= 0 => {
                Instr::AAdd(Reg::X(28), Reg::X(28), off as u64)
            }
            (Arch::Arm64, Instr::Lea(off, Reg::R15, Reg::R15)) => Instr::ASub(Reg::X(28), Reg::X(28), off.unsigned_abs()),
            (_, i) => i,
        }
    }
}

#[cfg(test)]
mod tests;
