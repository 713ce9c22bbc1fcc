//! The deterministic virtual machine.
//!
//! [`Machine::step`] executes one instruction and returns a [`StepEvent`]
//! that lists every data flow the instruction performed (which bytes or
//! registers were written, and from what), plus control-transfer and
//! intrinsic details. Taint engines consume the event; they never decode
//! instructions themselves.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use smallvec::SmallVec;

use crate::asm::Program;
use crate::isa::{Instruction, MemOperand, Opcode, Operand, Reg, SourceKind, NUM_REGS};
use crate::layout::{Layout, BOUNDARY_TAG_SIZE, HALT_RETURN_ADDRESS, HEAP_BASE, STACK_BASE};

/// Syscall numbers understood by the VM.
pub mod syscall {
    pub const EXIT: u32 = 1;
    pub const WRITE: u32 = 4;
    /// Program execution; the one whose arguments the policy inspects.
    pub const EXEC: u32 = 11;
}

/// Second operand of a binary arithmetic flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithRhs {
    Const,
    Reg(Reg),
    Mem { addr: u32, len: u32 },
}

/// One data movement performed by an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    /// `dst := immediate`
    ConstToReg {
        dst: Reg,
    },
    RegToReg {
        dst: Reg,
        src: Reg,
    },
    /// Load (or POP) of `len` bytes; `index` is the index register of an
    /// indexed address, whose taint also flows into `dst`.
    MemToReg {
        dst: Reg,
        addr: u32,
        len: u32,
        index: Option<Reg>,
    },
    /// Store of a register to `len` bytes (STORE, PUSH, MEMSET fill).
    RegToMem {
        addr: u32,
        len: u32,
        src: Reg,
    },
    /// Constant store (STORE/PUSH immediate, CALL's return address,
    /// MEMSET with constant fill, allocator metadata).
    ConstToMem {
        addr: u32,
        len: u32,
    },
    /// Byte-parallel copy: byte `dst+i` receives byte `src+i`.
    MemToMem {
        dst: u32,
        src: u32,
        len: u32,
    },
    /// Every byte of `[dst, dst+len)` is derived from all of
    /// `[src, src+src_len)` (printf's `%n` count).
    MergeToMem {
        dst: u32,
        len: u32,
        src: u32,
        src_len: u32,
    },
    /// `dst := dst op rhs`
    Arith {
        dst: Reg,
        rhs: ArithRhs,
    },
    /// `XOR r, r` / `SUB r, r`: result is zero regardless of `r`.
    ZeroIdiom {
        dst: Reg,
    },
    /// INC/DEC.
    Unary {
        dst: Reg,
    },
    /// Bytes delivered by READINPUT.
    Input {
        addr: u32,
        len: u32,
        source: SourceKind,
    },
}

/// How a branch target was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    Direct,
    Reg(Reg),
    Mem { addr: u32 },
    ReturnSlot { addr: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Jump {
        target: u32,
        via: TargetSource,
    },
    Conditional {
        target: u32,
        taken: bool,
    },
    Call {
        target: u32,
        via: TargetSource,
        ret_slot: u32,
        new_fp: u32,
        function: Option<usize>,
        depth: usize,
    },
    /// `depth` is the frame depth being left (1 = entry function).
    Return {
        target: u32,
        ret_slot: u32,
        depth: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Intrinsic {
    Alloc {
        tag_addr: u32,
        base: u32,
        size: u32,
    },
    AllocFailed {
        size: u32,
    },
    /// `valid` is false for a base that is not a live chunk.
    Free {
        base: u32,
        valid: bool,
        size: u32,
    },
    Printf {
        fmt_addr: u32,
        fmt_len: u32,
        output: Vec<u8>,
    },
    Syscall {
        number: u32,
        args: [u32; 3],
    },
    Input {
        addr: u32,
        len: u32,
        source: SourceKind,
    },
    Copy {
        dst: u32,
        src: u32,
        len: u32,
    },
    Set {
        dst: u32,
        len: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    OutOfBounds,
    ReadOnlyWrite,
    BadPc,
    StackOverflow,
    BadOperand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub addr: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepEvent {
    pub step: u64,
    pub pc: u32,
    pub opcode: Opcode,
    pub flows: SmallVec<[Flow; 2]>,
    pub control: Option<Control>,
    pub intrinsic: Option<Intrinsic>,
    pub fault: Option<Fault>,
    pub halted: bool,
}

impl StepEvent {
    pub fn new(step: u64, pc: u32, opcode: Opcode) -> Self {
        StepEvent {
            step,
            pc,
            opcode,
            flows: SmallVec::new(),
            control: None,
            intrinsic: None,
            fault: None,
            halted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub function: Option<usize>,
    pub saved_fp: u32,
    pub ret_slot: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    Halt,
    Returned,
    Exit(u32),
    Exec,
    Fault(Fault),
}

/// Registers, memory, frames and I/O of one VM instance.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: [u32; NUM_REGS],
    pub pc: u32,
    pub zero_flag: bool,
    pub mem: Vec<u8>,
    pub frames: Vec<Frame>,
    pub halted: Option<HaltReason>,
    pub layout: Layout,
    pub input: VecDeque<Vec<u8>>,
    pub output: Vec<u8>,
    pub heap_next: u32,
    /// Live heap chunks: payload base -> size.
    pub chunks: BTreeMap<u32, u32>,
    pub steps: u64,
}

/// A program loaded into a machine.
#[derive(Debug, Clone)]
pub struct Machine {
    pub program: Arc<Program>,
    pub state: MachineState,
}

/// Decodes an input script: one line per READINPUT, with `\n`, `\t`,
/// `\\` and `\xHH` escapes.
pub fn parse_input_script(text: &str) -> Vec<Vec<u8>> {
    text.lines().map(unescape_line).collect()
}

fn unescape_line(line: &str) -> Vec<u8> {
    let bytes = line.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' && i + 1 < bytes.len() {
            match bytes[i + 1] {
                b'n' => {
                    out.push(b'\n');
                    i += 2;
                    continue;
                }
                b't' => {
                    out.push(b'\t');
                    i += 2;
                    continue;
                }
                b'\\' => {
                    out.push(b'\\');
                    i += 2;
                    continue;
                }
                b'x' if i + 4 <= bytes.len() => {
                    if let Some(b) =
                        std::str::from_utf8(&bytes[i + 2..i + 4]).ok().and_then(|h| u8::from_str_radix(h, 16).ok())
                    {
                        out.push(b);
                        i += 4;
                        continue;
                    }
                }
                _ => {}
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    out
}

type ExecResult = Result<(), Fault>;

impl Machine {
    pub fn new(program: impl Into<Arc<Program>>, layout: Layout, input: Vec<Vec<u8>>) -> Machine {
        let program = program.into();
        let mut mem = vec![0u8; layout.mem_size as usize];
        for seg in &program.data {
            let start = seg.addr as usize;
            mem[start..start + seg.bytes.len()].copy_from_slice(&seg.bytes);
        }
        let top = layout.stack_top();
        let mut regs = [0u32; NUM_REGS];
        regs[Reg::FP.index()] = top;
        regs[Reg::SP.index()] = top;
        let entry = program.function(&program.entry).map(|f| f.entry).unwrap_or(0);
        Machine {
            program,
            state: MachineState {
                regs,
                pc: entry,
                zero_flag: false,
                mem,
                frames: Vec::new(),
                halted: None,
                layout,
                input: input.into(),
                output: Vec::new(),
                heap_next: HEAP_BASE,
                chunks: BTreeMap::new(),
                steps: 0,
            },
        }
    }

    pub fn is_halted(&self) -> bool {
        self.state.halted.is_some()
    }

    pub fn reg(&self, r: Reg) -> u32 {
        self.state.regs[r.index()]
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        let a = addr as usize;
        self.state.layout.in_bounds(addr, 4).then(|| u32::from_le_bytes(self.state.mem[a..a + 4].try_into().unwrap()))
    }

    /// NUL-terminated string at `addr` (without the NUL), bounded by memory.
    pub fn c_string(&self, addr: u32) -> &[u8] {
        let start = (addr as usize).min(self.state.mem.len());
        let rest = &self.state.mem[start..];
        let n = rest.iter().position(|&b| b == 0).unwrap_or(rest.len());
        &rest[..n]
    }

    /// Performs the call into the entry function: pushes the halting
    /// return address and opens frame 1. This is step 0.
    pub fn boot(&mut self) -> StepEvent {
        let entry = self.state.pc;
        let mut ev = StepEvent::new(self.state.steps, entry, Opcode::Call);
        self.state.steps += 1;
        let function = self.program.function_at_entry(entry);
        if let Err(f) = self.do_call(&mut ev, entry, TargetSource::Direct, HALT_RETURN_ADDRESS, function) {
            self.fault(&mut ev, f);
        }
        ev
    }

    /// Executes one instruction.
    pub fn step(&mut self) -> StepEvent {
        let pc = self.state.pc;
        let program = Arc::clone(&self.program);
        let Some(instr) = program.instructions.get(pc as usize) else {
            let mut ev = StepEvent::new(self.state.steps, pc, Opcode::Halt);
            self.state.steps += 1;
            self.fault(&mut ev, Fault { kind: FaultKind::BadPc, addr: pc });
            return ev;
        };
        let mut ev = StepEvent::new(self.state.steps, pc, instr.opcode);
        self.state.steps += 1;
        if self.state.halted.is_some() {
            ev.halted = true;
            return ev;
        }
        self.state.pc = pc.wrapping_add(1);
        match self.execute(instr, &mut ev) {
            Ok(()) => {
                let sp = self.state.regs[Reg::SP.index()];
                let fp = self.state.regs[Reg::FP.index()];
                let top = self.state.layout.stack_top();
                for v in [sp, fp] {
                    if !(STACK_BASE..=top).contains(&v) {
                        self.fault(&mut ev, Fault { kind: FaultKind::StackOverflow, addr: v });
                        break;
                    }
                }
            }
            Err(f) => self.fault(&mut ev, f),
        }
        ev.halted = self.state.halted.is_some();
        ev
    }

    /// Runs to completion (or `max_steps`), collecting events.
    pub fn run_collect(&mut self, max_steps: u64) -> Vec<StepEvent> {
        let mut events = vec![self.boot()];
        while !self.is_halted() && (events.len() as u64) < max_steps {
            events.push(self.step());
        }
        events
    }

    fn fault(&mut self, ev: &mut StepEvent, f: Fault) {
        ev.fault = Some(f);
        ev.halted = true;
        self.state.halted = Some(HaltReason::Fault(f));
    }

    fn effective_address(&self, m: &MemOperand) -> u32 {
        let mut a = m.disp as u32;
        if let Some(b) = m.base {
            a = a.wrapping_add(self.reg(b));
        }
        if let Some(i) = m.index {
            a = a.wrapping_add(self.reg(i).wrapping_mul(u32::from(m.scale)));
        }
        a
    }

    fn value(&self, op: &Operand) -> u32 {
        match op {
            Operand::Reg(r) => self.reg(*r),
            Operand::Imm(v) => *v,
            Operand::Mem(m) => self.effective_address(m),
        }
    }

    fn check_read(&self, addr: u32, len: u32) -> ExecResult {
        if self.state.layout.in_bounds(addr, len) {
            Ok(())
        } else {
            Err(Fault { kind: FaultKind::OutOfBounds, addr })
        }
    }

    fn check_write(&self, addr: u32, len: u32) -> ExecResult {
        self.check_read(addr, len)?;
        if len > 0 && self.state.layout.is_read_only(addr) {
            return Err(Fault { kind: FaultKind::ReadOnlyWrite, addr });
        }
        Ok(())
    }

    fn load(&self, addr: u32, width: u8) -> Result<u32, Fault> {
        self.check_read(addr, u32::from(width))?;
        let a = addr as usize;
        Ok(match width {
            1 => u32::from(self.state.mem[a]),
            _ => u32::from_le_bytes(self.state.mem[a..a + 4].try_into().unwrap()),
        })
    }

    fn store(&mut self, addr: u32, width: u8, value: u32) -> ExecResult {
        self.check_write(addr, u32::from(width))?;
        let a = addr as usize;
        match width {
            1 => self.state.mem[a] = value as u8,
            _ => self.state.mem[a..a + 4].copy_from_slice(&value.to_le_bytes()),
        }
        Ok(())
    }

    fn set_reg(&mut self, r: Reg, v: u32) {
        self.state.regs[r.index()] = v;
    }

    fn do_call(
        &mut self,
        ev: &mut StepEvent,
        target: u32,
        via: TargetSource,
        ret: u32,
        function: Option<usize>,
    ) -> ExecResult {
        let sp = self.reg(Reg::SP).wrapping_sub(4);
        if sp < STACK_BASE {
            return Err(Fault { kind: FaultKind::StackOverflow, addr: sp });
        }
        self.store(sp, 4, ret)?;
        self.state.frames.push(Frame { function, saved_fp: self.reg(Reg::FP), ret_slot: sp });
        self.set_reg(Reg::SP, sp);
        self.set_reg(Reg::FP, sp);
        self.state.pc = target;
        ev.flows.push(Flow::ConstToMem { addr: sp, len: 4 });
        ev.control =
            Some(Control::Call { target, via, ret_slot: sp, new_fp: sp, function, depth: self.state.frames.len() });
        Ok(())
    }

    fn branch_target(&self, op: &Operand) -> Result<(u32, TargetSource), Fault> {
        Ok(match op {
            Operand::Imm(t) => (*t, TargetSource::Direct),
            Operand::Reg(r) => (self.reg(*r), TargetSource::Reg(*r)),
            Operand::Mem(m) => {
                let addr = self.effective_address(m);
                (self.load(addr, 4)?, TargetSource::Mem { addr })
            }
        })
    }

    fn execute(&mut self, instr: &Instruction, ev: &mut StepEvent) -> ExecResult {
        let ops = &instr.operands;
        let reg_at = |i: usize| match ops[i] {
            Operand::Reg(r) => r,
            _ => unreachable!("assembler guarantees a register operand"),
        };
        match instr.opcode {
            Opcode::Mov => {
                let dst = reg_at(0);
                let v = self.value(&ops[1]);
                self.set_reg(dst, v);
                ev.flows.push(match ops[1] {
                    Operand::Reg(src) => Flow::RegToReg { dst, src },
                    _ => Flow::ConstToReg { dst },
                });
            }
            Opcode::Load => {
                let dst = reg_at(0);
                let Operand::Mem(m) = ops[1] else { unreachable!() };
                let addr = self.effective_address(&m);
                let v = self.load(addr, instr.width)?;
                self.set_reg(dst, v);
                ev.flows.push(Flow::MemToReg { dst, addr, len: u32::from(instr.width), index: m.index });
            }
            Opcode::Store => {
                let Operand::Mem(m) = ops[0] else { unreachable!() };
                let addr = self.effective_address(&m);
                let v = self.value(&ops[1]);
                self.store(addr, instr.width, v)?;
                let len = u32::from(instr.width);
                ev.flows.push(match ops[1] {
                    Operand::Reg(src) => Flow::RegToMem { addr, len, src },
                    _ => Flow::ConstToMem { addr, len },
                });
            }
            Opcode::Push => {
                let sp = self.reg(Reg::SP).wrapping_sub(4);
                if sp < STACK_BASE {
                    return Err(Fault { kind: FaultKind::StackOverflow, addr: sp });
                }
                let v = self.value(&ops[0]);
                self.store(sp, 4, v)?;
                self.set_reg(Reg::SP, sp);
                ev.flows.push(match ops[0] {
                    Operand::Reg(src) => Flow::RegToMem { addr: sp, len: 4, src },
                    _ => Flow::ConstToMem { addr: sp, len: 4 },
                });
            }
            Opcode::Pop => {
                let dst = reg_at(0);
                let sp = self.reg(Reg::SP);
                let v = self.load(sp, 4)?;
                self.set_reg(Reg::SP, sp.wrapping_add(4));
                self.set_reg(dst, v);
                ev.flows.push(Flow::MemToReg { dst, addr: sp, len: 4, index: None });
            }
            Opcode::Add | Opcode::Sub | Opcode::Xor | Opcode::Cmp => {
                let dst = reg_at(0);
                let a = self.reg(dst);
                let (b, rhs) = match ops[1] {
                    Operand::Reg(r) => (self.reg(r), ArithRhs::Reg(r)),
                    Operand::Imm(v) => (v, ArithRhs::Const),
                    Operand::Mem(m) => {
                        let addr = self.effective_address(&m);
                        (self.load(addr, 4)?, ArithRhs::Mem { addr, len: 4 })
                    }
                };
                let result = match instr.opcode {
                    Opcode::Add => a.wrapping_add(b),
                    Opcode::Xor => a ^ b,
                    _ => a.wrapping_sub(b),
                };
                self.state.zero_flag = result == 0;
                if instr.opcode != Opcode::Cmp {
                    self.set_reg(dst, result);
                    let idiom = matches!(instr.opcode, Opcode::Xor | Opcode::Sub) && rhs == ArithRhs::Reg(dst);
                    ev.flows.push(if idiom { Flow::ZeroIdiom { dst } } else { Flow::Arith { dst, rhs } });
                }
            }
            Opcode::Inc | Opcode::Dec => {
                let dst = reg_at(0);
                let v = self.reg(dst);
                let r = if instr.opcode == Opcode::Inc { v.wrapping_add(1) } else { v.wrapping_sub(1) };
                self.set_reg(dst, r);
                self.state.zero_flag = r == 0;
                ev.flows.push(Flow::Unary { dst });
            }
            Opcode::Jmp => {
                let (target, via) = self.branch_target(&ops[0])?;
                self.state.pc = target;
                ev.control = Some(Control::Jump { target, via });
            }
            Opcode::Jz | Opcode::Jnz => {
                let target = self.value(&ops[0]);
                let taken = self.state.zero_flag == (instr.opcode == Opcode::Jz);
                if taken {
                    self.state.pc = target;
                }
                ev.control = Some(Control::Conditional { target, taken });
            }
            Opcode::Call => {
                let (target, via) = self.branch_target(&ops[0])?;
                let function = self.program.function_at_entry(target);
                let ret = self.state.pc;
                self.do_call(ev, target, via, ret, function)?;
            }
            Opcode::Ret => {
                let Some(frame) = self.state.frames.last().copied() else {
                    self.state.halted = Some(HaltReason::Returned);
                    return Ok(());
                };
                let target = self.load(frame.ret_slot, 4)?;
                let depth = self.state.frames.len();
                self.state.frames.pop();
                self.set_reg(Reg::SP, frame.ret_slot.wrapping_add(4));
                self.set_reg(Reg::FP, frame.saved_fp);
                ev.control = Some(Control::Return { target, ret_slot: frame.ret_slot, depth });
                if target == HALT_RETURN_ADDRESS && self.state.frames.is_empty() {
                    self.state.halted = Some(HaltReason::Returned);
                } else {
                    self.state.pc = target;
                }
            }
            Opcode::Syscall => {
                let number = self.reg(Reg::gp(0));
                let args = [self.reg(Reg::gp(1)), self.reg(Reg::gp(2)), self.reg(Reg::gp(3))];
                ev.intrinsic = Some(Intrinsic::Syscall { number, args });
                match number {
                    syscall::EXIT => self.state.halted = Some(HaltReason::Exit(args[0])),
                    syscall::WRITE => {
                        self.check_read(args[1], args[2])?;
                        let (s, n) = (args[1] as usize, args[2] as usize);
                        let bytes = self.state.mem[s..s + n].to_vec();
                        self.state.output.extend_from_slice(&bytes);
                    }
                    syscall::EXEC => {
                        let path = self.c_string(args[0]).to_vec();
                        self.state.output.extend_from_slice(b"[exec ");
                        self.state.output.extend_from_slice(&path);
                        self.state.output.extend_from_slice(b"]\n");
                        self.state.halted = Some(HaltReason::Exec);
                    }
                    _ => {}
                }
                if !matches!(number, syscall::EXIT | syscall::EXEC) {
                    self.set_reg(Reg::gp(0), 0);
                    ev.flows.push(Flow::ConstToReg { dst: Reg::gp(0) });
                }
            }
            Opcode::Memcpy | Opcode::Strcpy => {
                let dst = self.value(&ops[0]);
                let src = self.value(&ops[1]);
                let len = if instr.opcode == Opcode::Memcpy {
                    self.value(&ops[2])
                } else {
                    self.check_read(src, 1)?;
                    self.c_string(src).len() as u32 + 1
                };
                self.check_read(src, len)?;
                self.check_write(dst, len)?;
                self.state.mem.copy_within(src as usize..(src + len) as usize, dst as usize);
                ev.flows.push(Flow::MemToMem { dst, src, len });
                ev.intrinsic = Some(Intrinsic::Copy { dst, src, len });
            }
            Opcode::Memset => {
                let dst = self.value(&ops[0]);
                let fill = self.value(&ops[1]) as u8;
                let len = self.value(&ops[2]);
                self.check_write(dst, len)?;
                self.state.mem[dst as usize..(dst + len) as usize].fill(fill);
                ev.flows.push(match ops[1] {
                    Operand::Reg(src) => Flow::RegToMem { addr: dst, len, src },
                    _ => Flow::ConstToMem { addr: dst, len },
                });
                ev.intrinsic = Some(Intrinsic::Set { dst, len });
            }
            Opcode::Malloc => {
                let dst = reg_at(0);
                let size = self.value(&ops[1]);
                let tag_addr = self.state.heap_next;
                let rounded = (u64::from(size.max(1)) + 7) & !7;
                let end = u64::from(tag_addr) + u64::from(BOUNDARY_TAG_SIZE) + rounded;
                if size == 0 || end > u64::from(STACK_BASE) {
                    self.set_reg(dst, 0);
                    ev.flows.push(Flow::ConstToReg { dst });
                    ev.intrinsic = Some(Intrinsic::AllocFailed { size });
                } else {
                    let base = tag_addr + BOUNDARY_TAG_SIZE;
                    self.store(tag_addr, 4, size)?;
                    self.store(tag_addr + 4, 4, 1)?;
                    self.state.heap_next = end as u32;
                    self.state.chunks.insert(base, size);
                    self.set_reg(dst, base);
                    ev.flows.push(Flow::ConstToMem { addr: tag_addr, len: BOUNDARY_TAG_SIZE });
                    ev.flows.push(Flow::ConstToReg { dst });
                    ev.intrinsic = Some(Intrinsic::Alloc { tag_addr, base, size });
                }
            }
            Opcode::Free => {
                let base = self.value(&ops[0]);
                match self.state.chunks.remove(&base) {
                    Some(size) => {
                        self.store(base - 4, 4, 0)?;
                        ev.flows.push(Flow::ConstToMem { addr: base - 4, len: 4 });
                        ev.intrinsic = Some(Intrinsic::Free { base, valid: true, size });
                    }
                    None => ev.intrinsic = Some(Intrinsic::Free { base, valid: false, size: 0 }),
                }
            }
            Opcode::Printf => self.printf(instr, ev)?,
            Opcode::Readinput => {
                let dst = self.value(&ops[0]);
                let max = self.value(&ops[1]);
                let source = SourceKind::from_code(self.value(&ops[2]))
                    .ok_or(Fault { kind: FaultKind::BadOperand, addr: self.value(&ops[2]) })?;
                let line = self.state.input.pop_front().unwrap_or_default();
                if max > 0 {
                    let n = (line.len() as u32).min(max - 1);
                    let len = n + 1;
                    self.check_write(dst, len)?;
                    let d = dst as usize;
                    self.state.mem[d..d + n as usize].copy_from_slice(&line[..n as usize]);
                    self.state.mem[d + n as usize] = 0;
                    ev.flows.push(Flow::Input { addr: dst, len, source });
                    ev.intrinsic = Some(Intrinsic::Input { addr: dst, len, source });
                }
            }
            Opcode::Halt => self.state.halted = Some(HaltReason::Halt),
        }
        Ok(())
    }

    /// Minimal printf: `%s %d %x %c %%` and `%n`. Arguments come from the
    /// optional second operand, then from successive stack words at `sp`.
    fn printf(&mut self, instr: &Instruction, ev: &mut StepEvent) -> ExecResult {
        let fmt_addr = self.value(&instr.operands[0]);
        self.check_read(fmt_addr, 1)?;
        let fmt = self.c_string(fmt_addr).to_vec();
        let fmt_len = fmt.len() as u32 + 1;
        let mut explicit = instr.operands.get(1).map(|op| self.value(op));
        let mut stack_cursor = self.reg(Reg::SP);
        let mut out = Vec::new();
        let mut i = 0;
        while i < fmt.len() {
            let c = fmt[i];
            if c != b'%' || i + 1 >= fmt.len() {
                out.push(c);
                i += 1;
                continue;
            }
            let spec = fmt[i + 1];
            i += 2;
            if spec == b'%' {
                out.push(b'%');
                continue;
            }
            let arg = match explicit.take() {
                Some(v) => v,
                None => {
                    let v = self.load(stack_cursor, 4)?;
                    stack_cursor = stack_cursor.wrapping_add(4);
                    v
                }
            };
            match spec {
                b's' => {
                    self.check_read(arg, 1)?;
                    out.extend_from_slice(self.c_string(arg));
                }
                b'd' => out.extend_from_slice((arg as i32).to_string().as_bytes()),
                b'x' => out.extend_from_slice(format!("{arg:x}").as_bytes()),
                b'c' => out.push(arg as u8),
                b'n' => {
                    self.store(arg, 4, out.len() as u32)?;
                    ev.flows.push(Flow::MergeToMem { dst: arg, len: 4, src: fmt_addr, src_len: fmt_len });
                }
                other => {
                    out.push(b'%');
                    out.push(other);
                }
            }
        }
        self.state.output.extend_from_slice(&out);
        ev.intrinsic = Some(Intrinsic::Printf { fmt_addr, fmt_len, output: out });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    fn machine(src: &str, input: &[&str]) -> Machine {
        let prog = assemble(src).unwrap();
        Machine::new(prog, Layout::default(), input.iter().map(|s| s.as_bytes().to_vec()).collect())
    }

    #[test]
    fn mov_constant_event() {
        let mut m = machine("fn main { MOV r1, 5 HALT }", &[]);
        m.boot();
        let ev = m.step();
        assert_eq!(ev.flows.as_slice(), &[Flow::ConstToReg { dst: Reg::gp(1) }]);
        assert_eq!(m.reg(Reg::gp(1)), 5);
    }

    #[test]
    fn store_fp_relative_event() {
        let mut m = machine("fn main { MOV r2, 7 STORE [fp-8], r2 HALT }", &[]);
        m.boot();
        m.step();
        let fp = m.reg(Reg::FP);
        let ev = m.step();
        assert_eq!(ev.flows.as_slice(), &[Flow::RegToMem { addr: fp - 8, len: 4, src: Reg::gp(2) }]);
        assert_eq!(m.read_u32(fp - 8), Some(7));
    }

    #[test]
    fn call_writes_return_slot_below_sp() {
        // Boot frame: sp = top-4. CALL f then pushes at top-8.
        let mut m = machine("fn main { CALL f HALT }\nfn f { RET }", &[]);
        let top = m.state.layout.stack_top();
        let boot = m.boot();
        assert_eq!(boot.flows.as_slice(), &[Flow::ConstToMem { addr: top - 4, len: 4 }]);
        let sp_before = m.reg(Reg::SP);
        let ev = m.step();
        assert_eq!(ev.flows.as_slice(), &[Flow::ConstToMem { addr: sp_before - 4, len: 4 }]);
        match ev.control {
            Some(Control::Call { target, ret_slot, depth, .. }) => {
                assert_eq!(target, 2);
                assert_eq!(ret_slot, sp_before - 4);
                assert_eq!(depth, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(m.read_u32(sp_before - 4), Some(1));
        let depth_before_ret = m.state.frames.len();
        let ret = m.step();
        assert!(matches!(ret.control, Some(Control::Return { target: 1, .. })));
        assert_eq!(m.state.frames.len(), depth_before_ret - 1);
        assert_eq!(m.reg(Reg::SP), sp_before);
        assert_eq!(m.state.pc, 1);
    }

    #[test]
    fn zero_idioms_are_recognized() {
        let mut m = machine("fn main { XOR r2, r2 SUB r5, r5 XOR r2, r3 HALT }", &[]);
        m.boot();
        assert_eq!(m.step().flows.as_slice(), &[Flow::ZeroIdiom { dst: Reg::gp(2) }]);
        assert_eq!(m.step().flows.as_slice(), &[Flow::ZeroIdiom { dst: Reg::gp(5) }]);
        assert_eq!(m.step().flows.as_slice(), &[Flow::Arith { dst: Reg::gp(2), rhs: ArithRhs::Reg(Reg::gp(3)) }]);
    }

    #[test]
    fn out_of_bounds_access_faults() {
        let mut m = machine("fn main { LOAD r1, [0x60000000] HALT }", &[]);
        m.boot();
        let ev = m.step();
        assert_eq!(ev.fault, Some(Fault { kind: FaultKind::OutOfBounds, addr: 0x6000_0000 }));
        assert!(m.is_halted());
    }

    #[test]
    fn rodata_is_not_writable() {
        let mut m = machine("fn main { STORE [0x100], 1 HALT }", &[]);
        m.boot();
        assert_eq!(m.step().fault.map(|f| f.kind), Some(FaultKind::ReadOnlyWrite));
    }

    #[test]
    fn malloc_layout_and_double_free() {
        let mut m = machine("fn main { MALLOC r1, 32 MALLOC r2, 4 FREE r1 FREE r1 HALT }", &[]);
        m.boot();
        let ev = m.step();
        assert_eq!(ev.intrinsic, Some(Intrinsic::Alloc { tag_addr: 0x80000, base: 0x80008, size: 32 }));
        let ev = m.step();
        assert_eq!(ev.intrinsic, Some(Intrinsic::Alloc { tag_addr: 0x80028, base: 0x80030, size: 4 }));
        assert!(matches!(m.step().intrinsic, Some(Intrinsic::Free { valid: true, .. })));
        assert!(matches!(m.step().intrinsic, Some(Intrinsic::Free { valid: false, .. })));
    }

    #[test]
    fn readinput_and_strcpy() {
        let mut m = machine("fn main { READINPUT 0x2000, 64, argv STRCPY 0x3000, 0x2000 HALT }", &["hello"]);
        m.boot();
        let ev = m.step();
        assert_eq!(ev.flows.as_slice(), &[Flow::Input { addr: 0x2000, len: 6, source: SourceKind::Argv }]);
        let ev = m.step();
        assert_eq!(ev.flows.as_slice(), &[Flow::MemToMem { dst: 0x3000, src: 0x2000, len: 6 }]);
        assert_eq!(m.c_string(0x3000), b"hello");
    }

    #[test]
    fn printf_percent_n_writes_count_through_stack_argument() {
        let mut m =
            machine("fn main { MOV r3, 0x1100 PUSH r3 READINPUT 0x2000, 64, argv PRINTF 0x2000 HALT }", &["AAAA%n"]);
        m.boot();
        m.step();
        m.step();
        m.step();
        let ev = m.step();
        assert_eq!(ev.flows.as_slice(), &[Flow::MergeToMem { dst: 0x1100, len: 4, src: 0x2000, src_len: 7 }]);
        assert_eq!(m.read_u32(0x1100), Some(4));
        assert_eq!(m.state.output, b"AAAA");
    }

    #[test]
    fn input_script_escapes() {
        assert_eq!(parse_input_script("a\\x41b\\\\\nsecond"), vec![b"aAb\\".to_vec(), b"second".to_vec()]);
    }

    #[test]
    fn runs_are_deterministic() {
        let src = "fn main { MOV r1, 3 loop: DEC r1 JNZ loop CALL f HALT }\nfn f { PUSH r1 POP r2 RET }";
        let a = machine(src, &[]).run_collect(1000);
        let b = machine(src, &[]).run_collect(1000);
        assert_eq!(a, b);
        assert!(a.last().unwrap().halted);
    }
}
