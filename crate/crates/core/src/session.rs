//! Runs a program under the object engine, the byte oracle, or both in
//! lockstep, keeping the object table in step with calls, returns,
//! allocations and frees, and applying the policy after every step.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::asm::Program;
use crate::engine::{TaintEngine, Tracker};
use crate::isa::{Opcode, Reg};
use crate::layout::Layout;
use crate::objects::{LiveObject, ObjectTable, RecordId, Slot};
use crate::oracle::ByteTaintMap;
use crate::policy::{evaluate, exit_code, AttackReport, PolicyConfig, PolicyContext, Severity};
use crate::tags::{CapacityError, TagSpace, DEFAULT_CAPACITY};
use crate::vm::{Control, HaltReason, Intrinsic, Machine, StepEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EngineKind {
    #[default]
    Object,
    Byte,
    Lockstep,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub engine: EngineKind,
    pub continue_after_detect: bool,
    pub max_steps: u64,
    pub policy: PolicyConfig,
    pub capacity: usize,
    /// Run the policy checks at all (off for benchmarks).
    pub checks: bool,
    pub provenance: bool,
    pub layout: Layout,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            engine: EngineKind::Object,
            continue_after_detect: false,
            max_steps: 10_000_000,
            policy: PolicyConfig::default(),
            capacity: DEFAULT_CAPACITY,
            checks: true,
            provenance: true,
            layout: Layout::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error(transparent)]
    Capacity(#[from] CapacityError),
}

/// A byte the oracle holds tainted that the object engine does not cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: u64,
    pub location: ViolationSite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationSite {
    Object { addr: u32, object: String },
    Spill { addr: u32 },
    Register(Reg),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            ViolationSite::Object { addr, object } => {
                write!(f, "step {}: byte {addr:#010x} tainted (byte) but object {object} has tag 0 (object)", self.step)
            }
            ViolationSite::Spill { addr } => {
                write!(f, "step {}: spill byte {addr:#010x} tainted (byte) but clean (object)", self.step)
            }
            ViolationSite::Register(r) => {
                write!(f, "step {}: register {r} tainted (byte) but clean (object)", self.step)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stop {
    Halted(HaltReason),
    Detected,
    StepLimit,
    Divergence,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub reports: Vec<AttackReport>,
    pub stop: Stop,
    pub steps: u64,
    pub output: Vec<u8>,
    pub violations: Vec<Violation>,
    /// (reads, writes) of the object engine, when it ran.
    pub object_ops: Option<(u64, u64)>,
    /// (reads, writes) of the byte oracle, when it ran.
    pub byte_ops: Option<(u64, u64)>,
}

impl RunResult {
    pub fn exit_code(&self) -> i32 {
        if !self.violations.is_empty() {
            return 1;
        }
        exit_code(&self.reports)
    }
}

pub struct Session {
    pub machine: Machine,
    pub table: ObjectTable,
    pub object: Option<TaintEngine>,
    pub oracle: Option<ByteTaintMap>,
    pub reports: Vec<AttackReport>,
    pub violations: Vec<Violation>,
    cfg: SessionConfig,
    booted: bool,
    /// Locals per function index, looked up on first call.
    locals: Vec<Option<Arc<[RecordId]>>>,
    born_buf: Vec<Slot>,
    dead_buf: Vec<(Slot, LiveObject)>,
}

impl Session {
    pub fn new(
        program: impl Into<Arc<Program>>,
        table: ObjectTable,
        input: Vec<Vec<u8>>,
        cfg: SessionConfig,
    ) -> Result<Session, SessionError> {
        let machine = Machine::new(program, cfg.layout, input);
        let object = matches!(cfg.engine, EngineKind::Object | EngineKind::Lockstep).then(|| {
            let mut e = TaintEngine::new(TagSpace::new(cfg.capacity));
            e.record_provenance(cfg.provenance);
            e.set_sources(cfg.policy.sources);
            e
        });
        let oracle = matches!(cfg.engine, EngineKind::Byte | EngineKind::Lockstep).then(|| {
            let mut o = ByteTaintMap::new(cfg.layout.mem_size);
            o.set_sources(cfg.policy.sources);
            o
        });
        let mut s = Session {
            machine,
            table,
            object,
            oracle,
            reports: Vec::new(),
            violations: Vec::new(),
            cfg,
            booted: false,
            locals: Vec::new(),
            born_buf: Vec::new(),
            dead_buf: Vec::new(),
        };
        let globals: Vec<Slot> = s.table.live_objects().map(|(slot, _)| slot).collect();
        s.born(&globals)?;
        Ok(s)
    }

    fn born(&mut self, slots: &[Slot]) -> Result<(), SessionError> {
        if let Some(e) = &mut self.object {
            e.objects_born(&self.table, slots)?;
        }
        if let Some(o) = &mut self.oracle {
            o.objects_born(&self.table, slots)?;
        }
        Ok(())
    }

    fn died(&mut self, dead: &[(Slot, LiveObject)]) {
        if let Some(e) = &mut self.object {
            e.objects_died(dead);
        }
        if let Some(o) = &mut self.oracle {
            o.objects_died(dead);
        }
    }

    /// The engine policy decisions are made against.
    pub fn tracker(&self) -> &dyn Tracker {
        match (&self.object, &self.oracle) {
            (Some(e), _) => e,
            (None, Some(o)) => o,
            (None, None) => unreachable!("a session always has an engine"),
        }
    }

    /// Executes one step; returns the event.
    pub fn step(&mut self) -> Result<StepEvent, SessionError> {
        let ev = if self.booted {
            self.machine.step()
        } else {
            self.booted = true;
            self.machine.boot()
        };

        // A bare byte tracker needs no object table.
        let maintain = (self.object.is_some() || self.cfg.checks)
            && matches!(ev.opcode, Opcode::Call | Opcode::Ret | Opcode::Malloc | Opcode::Free);
        if maintain && ev.fault.is_none() {
            if let Some(Control::Call { ret_slot, new_fp, function, .. }) = ev.control {
                let locals = match function {
                    Some(i) => {
                        if self.locals.len() <= i {
                            self.locals.resize(i + 1, None);
                        }
                        let program = &self.machine.program;
                        let table = &self.table;
                        self.locals[i].get_or_insert_with(|| table.locals_of(&program.functions[i].name)).clone()
                    }
                    None => self.table.locals_of(""),
                };
                let mut slots = std::mem::take(&mut self.born_buf);
                slots.clear();
                self.table.enter_frame_into(&locals, new_fp, &mut slots);
                slots.push(self.table.attach_return_slot(ret_slot).0);
                let r = self.born(&slots);
                self.born_buf = slots;
                r?;
            }
            if let Some(Intrinsic::Alloc { base, size, .. }) = ev.intrinsic {
                let slots: Vec<Slot> = self.table.register_heap_object(base, size).iter().map(|(s, _)| *s).collect();
                self.born(&slots)?;
            }
        }

        if let Some(e) = &mut self.object {
            e.apply(&self.table, &ev);
        }
        if let Some(o) = &mut self.oracle {
            o.apply(&self.table, &ev);
        }

        if self.cfg.checks {
            let instruction = if ev.step == 0 {
                format!("<boot> CALL {}", self.machine.program.entry)
            } else {
                self.machine
                    .program
                    .instructions
                    .get(ev.pc as usize)
                    .map(|i| i.to_string())
                    .unwrap_or_else(|| "<invalid pc>".into())
            };
            let ctx = PolicyContext {
                table: &self.table,
                tracker: self.tracker(),
                mem: &self.machine.state.mem,
                instruction,
            };
            let found = evaluate(&self.cfg.policy, &ctx, &ev);
            self.reports.extend(found);
        }

        if maintain && ev.fault.is_none() {
            if let Some(Control::Return { depth, .. }) = ev.control {
                let mut dead = std::mem::take(&mut self.dead_buf);
                dead.clear();
                self.table.exit_frame_into(depth, &mut dead);
                self.died(&dead);
                self.dead_buf = dead;
            }
            if let Some(Intrinsic::Free { base, valid: true, .. }) = ev.intrinsic {
                if let Ok(dead) = self.table.unregister_heap_object(base) {
                    self.died(&dead);
                }
            }
        }

        if self.cfg.engine == EngineKind::Lockstep {
            let found = self.superset_violations(ev.step);
            self.violations.extend(found);
        }
        Ok(ev)
    }

    /// Every byte the oracle holds tainted must be covered: by a tainted
    /// innermost object, or by a tainted spill byte. Tainted oracle
    /// registers must be tainted in the object engine.
    pub fn superset_violations(&self, step: u64) -> Vec<Violation> {
        let (Some(e), Some(o)) = (&self.object, &self.oracle) else { return Vec::new() };
        let mut out = Vec::new();
        for r in Reg::all() {
            if o.reg(r) && !e.reg_tainted(r) {
                out.push(Violation { step, location: ViolationSite::Register(r) });
            }
        }
        for addr in o.tainted_bytes() {
            match self.table.resolve_slot(addr) {
                Some(slot) => {
                    if !e.object_tag(slot) {
                        let object = self.table.describe(self.table.get(slot));
                        out.push(Violation { step, location: ViolationSite::Object { addr, object } });
                    }
                }
                None => {
                    if !e.tags.spill_read(addr) {
                        out.push(Violation { step, location: ViolationSite::Spill { addr } });
                    }
                }
            }
            if out.len() >= 32 {
                break;
            }
        }
        out
    }

    fn should_stop(&self) -> bool {
        !self.cfg.continue_after_detect
            && self.reports.iter().any(|r| matches!(r.severity, Severity::Control | Severity::Noncontrol))
    }

    /// Runs until the machine halts, a detection stops it, the step limit
    /// is hit, or (in lockstep) the engines diverge.
    pub fn run(mut self) -> Result<RunResult, SessionError> {
        let stop = self.run_loop()?;
        Ok(self.finish(stop))
    }

    fn run_loop(&mut self) -> Result<Stop, SessionError> {
        Ok(loop {
            if let Some(h) = self.machine.state.halted {
                break Stop::Halted(h);
            }
            if self.machine.state.steps >= self.cfg.max_steps {
                break Stop::StepLimit;
            }
            self.step()?;
            if !self.violations.is_empty() {
                break Stop::Divergence;
            }
            if self.should_stop() {
                break Stop::Detected;
            }
        })
    }

    /// Like [`Session::run`], also returning a dump of the final tag state
    /// (object tag space, or the oracle's tainted bytes).
    pub fn run_and_dump(mut self) -> Result<(RunResult, String), SessionError> {
        let stop = self.run_loop()?;
        let dump = self.dump_tags();
        Ok((self.finish(stop), dump))
    }

    pub fn dump_tags(&self) -> String {
        let mut out = String::new();
        if let Some(e) = &self.object {
            out.push_str(&e.tags.dump());
            for (slot, o) in self.table.live_objects() {
                if e.object_tag(slot) {
                    out.push_str(&format!("tainted {} [{:#010x}, +{}]\n", self.table.describe(o), o.base, o.size));
                }
            }
        } else if let Some(o) = &self.oracle {
            let bytes: Vec<u32> = o.tainted_bytes().collect();
            out.push_str(&format!("byte map: {} tainted byte(s)\n", bytes.len()));
            for a in bytes {
                out.push_str(&format!("  {a:#010x}\n"));
            }
        }
        out
    }

    fn finish(self, stop: Stop) -> RunResult {
        RunResult {
            reports: self.reports,
            stop,
            steps: self.machine.state.steps,
            output: self.machine.state.output,
            violations: self.violations,
            object_ops: self.object.as_ref().map(|e| e.counters()),
            byte_ops: self.oracle.as_ref().map(|o| (o.shadow_reads(), o.shadow_writes())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::objects::load_object_table;

    fn run(src: &str, table: &str, input: &[&str], engine: EngineKind) -> RunResult {
        let prog = assemble(src).unwrap();
        let table = load_object_table(table).unwrap();
        let input = input.iter().map(|s| s.as_bytes().to_vec()).collect();
        let cfg = SessionConfig { engine, ..SessionConfig::default() };
        Session::new(prog, table, input, cfg).unwrap().run().unwrap()
    }

    const SMASH: &str = "
        entry main
        fn main {
            SUB sp, 32
            READINPUT 0x2000, 64, argv
            CALL copy
            HALT
        }
        fn copy {
            SUB sp, 16
            MOV r1, fp
            SUB r1, 16
            STRCPY r1, 0x2000
            ADD sp, 16
            RET
        }
    ";
    const SMASH_TABLE: &str = "global input 0x2000 64\nlocal copy buf -16 16\n";

    #[test]
    fn clean_run_exits_zero() {
        let r = run(SMASH, SMASH_TABLE, &["hello"], EngineKind::Lockstep);
        assert_eq!(r.stop, Stop::Halted(HaltReason::Halt));
        assert!(r.reports.is_empty(), "{:?}", r.reports);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.exit_code(), 0);
    }

    #[test]
    fn overflow_into_return_slot_is_control() {
        let long = "A".repeat(30);
        let r = run(SMASH, SMASH_TABLE, &[&long], EngineKind::Object);
        assert_eq!(r.exit_code(), 3, "{:?}", r.reports);
        assert_eq!(r.stop, Stop::Detected);
        assert!(!r.reports[0].taint_chain.is_empty());
        assert!(r.reports[0].taint_chain[0].contains(" mark "));
    }

    #[test]
    fn continue_mode_also_catches_the_return() {
        let prog = assemble(SMASH).unwrap();
        let table = load_object_table(SMASH_TABLE).unwrap();
        let cfg =
            SessionConfig { engine: EngineKind::Lockstep, continue_after_detect: true, ..SessionConfig::default() };
        let r = Session::new(prog, table, vec![b"AAAAAAAAAAAAAAAAAAAAAAAA".to_vec()], cfg).unwrap().run().unwrap();
        let policies: Vec<_> = r.reports.iter().map(|r| r.policy).collect();
        use crate::policy::Check;
        assert_eq!(policies, vec![Check::NoncontrolBounds, Check::Branch]);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
    }

    #[test]
    fn byte_engine_detects_too() {
        let long = "A".repeat(30);
        let r = run(SMASH, SMASH_TABLE, &[&long], EngineKind::Byte);
        assert_eq!(r.exit_code(), 3);
    }
}
