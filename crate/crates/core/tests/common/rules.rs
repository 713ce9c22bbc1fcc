//! One small program per propagation rule example, run on the object
//! engine through the public session API.

use taintvm::asm::assemble;
use taintvm::engine::Tracker;
use taintvm::isa::Reg;
use taintvm::objects::load_object_table;
use taintvm::policy::PolicyConfig;
use taintvm::session::{EngineKind, Session, SessionConfig};
use taintvm::vm::parse_input_script;

const TABLE: &str = "\
global n 0x00002000 4
global buf 0x00002010 16
global src 0x00003000 1024
global dst 0x00003400 1024
global a 0x00004000 8
global b 0x00004008 8
global table 0x00005000 16
local f x -4 4
local g x -4 4
";

pub struct Probe {
    s: Session,
}

impl Probe {
    fn with_policy(program: &str, input: &str, policy: PolicyConfig) -> Probe {
        let program = assemble(program).unwrap_or_else(|e| panic!("{e}: {program}"));
        let table = load_object_table(TABLE).unwrap();
        let cfg = SessionConfig {
            engine: EngineKind::Object,
            continue_after_detect: true,
            policy,
            ..SessionConfig::default()
        };
        Probe { s: Session::new(program, table, parse_input_script(input), cfg).unwrap() }
    }

    fn new(program: &str, input: &str) -> Probe {
        Probe::with_policy(program, input, PolicyConfig::default())
    }

    /// Runs `main`'s body to HALT.
    fn run(body: &str, input: &str) -> Probe {
        let mut p = Probe::new(&format!("fn main {{ {body} HALT }}"), input);
        p.finish();
        p
    }

    fn step(&mut self) -> (u64, u64) {
        let before = self.counters();
        self.s.step().unwrap();
        let after = self.counters();
        (after.0 - before.0, after.1 - before.1)
    }

    fn finish(&mut self) {
        while self.s.machine.state.halted.is_none() {
            self.s.step().unwrap();
        }
    }

    fn counters(&self) -> (u64, u64) {
        let e = self.s.object.as_ref().unwrap();
        (e.shadow_reads(), e.shadow_writes())
    }

    fn obj(&self, name: &str) -> bool {
        let addr = match self.s.table.record_by_name(name).unwrap().location {
            taintvm::objects::Location::Address(a) => a,
            _ => unreachable!(),
        };
        let slot = self.s.table.resolve_slot(addr).unwrap();
        self.s.object.as_ref().unwrap().object_tag(slot)
    }

    fn reg(&self, n: u8) -> bool {
        self.s.object.as_ref().unwrap().reg_tainted(Reg::gp(n))
    }

    fn spill(&self, addr: u32) -> bool {
        self.s.object.as_ref().unwrap().tags.spill_read(addr)
    }
}

type Check = Result<(), String>;
pub type Case = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr) => {
        if !$cond {
            return Err(format!("{} ({}:{})", stringify!($cond), file!(), line!()));
        }
    };
}

/// Taints r1 from `src` (READINPUT then a load).
const TAINT_R1: &str = "READINPUT 0x3000, 1024, net LOAD r1, [0x3000]";

fn input_marks_object_once() -> Check {
    let mut p = Probe::new("fn main { READINPUT 0x3000, 1024, net HALT }", &"z".repeat(1023));
    p.step();
    ensure!(p.step().1 == 1);
    ensure!(p.obj("src"));
    Ok(())
}

fn input_spanning_two_objects() -> Check {
    let mut p = Probe::new("fn main { READINPUT 0x4004, 8, stdin HALT }", "1234567");
    p.step();
    ensure!(p.step().1 == 2);
    ensure!(p.obj("a") && p.obj("b"));
    Ok(())
}

fn input_into_gap_spills_per_byte() -> Check {
    let mut p = Probe::new("fn main { READINPUT 0x2100, 7, argv HALT }", "abcdef");
    p.step();
    ensure!(p.step().1 == 7);
    ensure!((0x2100..0x2107).all(|a| p.spill(a)) && !p.spill(0x2107));
    Ok(())
}

fn disabled_source_is_untainted() -> Check {
    let policy = PolicyConfig::parse("source env off").unwrap();
    let mut p = Probe::with_policy("fn main { READINPUT 0x3000, 1024, env HALT }", "abc", policy);
    p.finish();
    ensure!(!p.obj("src"));
    Ok(())
}

fn move_full_tainted() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} STORE [0x2000], r1"), "x");
    ensure!(p.obj("n"));
    Ok(())
}

fn move_full_untainted_clears() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} STORE [0x2000], r1 MOV r2, r7 STORE [0x2000], r2"), "x");
    ensure!(!p.obj("n"));
    Ok(())
}

fn move_partial_tainted_taints_whole() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} STORE.b [0x2015], r1"), "x");
    ensure!(p.obj("buf"));
    Ok(())
}

fn const_into_register() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} MOV r3, r1 MOV r3, 0x0400"), "x");
    ensure!(p.reg(1) && !p.reg(3));
    Ok(())
}

fn const_full_store_clears() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} STORE [0x2000], r1 STORE [0x2000], 5"), "x");
    ensure!(!p.obj("n"));
    Ok(())
}

fn const_partial_store_keeps() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} STORE [0x2010], r1 STORE.b [0x2010], 0"), "x");
    ensure!(p.obj("buf"));
    Ok(())
}

fn arith_tainted_plus_clean() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} MOV r2, 3 ADD r2, r1"), "x");
    ensure!(p.reg(2));
    Ok(())
}

fn arith_clean_plus_clean() -> Check {
    let p = Probe::run("MOV r2, 3 MOV r4, 9 ADD r2, r4", "");
    ensure!(!p.reg(2));
    Ok(())
}

fn arith_xor_distinct_tainted() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} MOV r2, r1 XOR r2, r1"), "x");
    ensure!(p.reg(2));
    Ok(())
}

fn unary_keeps_tags() -> Check {
    let incs = "INC r1 ".repeat(100);
    let p = Probe::run(&format!("{TAINT_R1} {incs} MOV r4, 1 DEC r4"), "x");
    ensure!(p.reg(1) && !p.reg(4));
    Ok(())
}

fn zero_idioms_clear() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} MOV r2, r1 MOV r5, r1 XOR r2, r2 SUB r5, r5"), "x");
    ensure!(!p.reg(2) && !p.reg(5));
    Ok(())
}

fn distinct_xor_is_not_an_idiom() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} MOV r3, r1 MOV r2, 0 XOR r2, r3"), "x");
    ensure!(p.reg(2));
    Ok(())
}

fn strcpy_reads_and_writes_once() -> Check {
    let mut p = Probe::new("fn main { READINPUT 0x3000, 1024, net STRCPY 0x3400, 0x3000 HALT }", &"q".repeat(1023));
    p.step();
    p.step();
    ensure!(p.step() == (1, 1));
    ensure!(p.obj("dst"));
    Ok(())
}

fn memcpy_clean_full_coverage_clears() -> Check {
    let body = "READINPUT 0x3400, 1024, net MEMCPY 0x3400, 0x3000, 1024";
    let p = Probe::run(body, "tainted");
    ensure!(!p.obj("dst"));
    Ok(())
}

fn memcpy_per_destination_slice() -> Check {
    let body = "READINPUT 0x4008, 8, net READINPUT 0x2100, 8, net MEMCPY 0x4000, 0x2100, 16";
    let p = Probe::run(body, "1234567\nabcdefg");
    ensure!(p.obj("a") && !p.obj("b"));
    Ok(())
}

fn memset_constant_clears() -> Check {
    let p = Probe::run("READINPUT 0x2010, 16, net MEMSET 0x2010, 0, 16", "abc");
    ensure!(!p.obj("buf"));
    Ok(())
}

fn memset_tainted_fill_taints() -> Check {
    let p = Probe::run(&format!("{TAINT_R1} MEMSET 0x2010, r1, 16"), "x");
    ensure!(p.obj("buf"));
    Ok(())
}

fn memset_half_keeps() -> Check {
    let p = Probe::run("READINPUT 0x2010, 16, net MEMSET 0x2010, 0, 8", "abc");
    ensure!(p.obj("buf"));
    Ok(())
}

fn indexed_tainted_index() -> Check {
    let p = Probe::run("READINPUT 0x3000, 4, net LOAD.b r1, [0x3000] SUB r1, 0x30 LOAD.b r2, [0x5000+r1*1]", "3");
    ensure!(!p.obj("table") && p.reg(2));
    Ok(())
}

fn indexed_clean_index() -> Check {
    let p = Probe::run("MOV r1, 3 LOAD.b r2, [0x5000+r1*1]", "");
    ensure!(!p.reg(2));
    Ok(())
}

fn indexed_tainted_element() -> Check {
    let p = Probe::run("READINPUT 0x5000, 16, net MOV r1, 3 LOAD.b r2, [0x5000+r1*1]", "abcdef");
    ensure!(p.reg(2));
    Ok(())
}

fn frame_exit_recycles_clean() -> Check {
    let program = format!(
        "fn main {{ {TAINT_R1} CALL f CALL g HALT }}
         fn f {{ SUB sp, 4 STORE [fp-4], r1 ADD sp, 4 RET }}
         fn g {{ SUB sp, 4 LOAD r2, [fp-4] STORE [0x2000], r2 ADD sp, 4 RET }}"
    );
    let mut p = Probe::new(&program, "x");
    p.finish();
    // The bytes are still there; the new local's tag is not.
    ensure!(!p.obj("n"));
    Ok(())
}

fn empty_frame_exit_is_noop() -> Check {
    let mut p = Probe::new(&format!("fn main {{ {TAINT_R1} STORE [0x2000], r1 CALL h HALT }} fn h {{ RET }}"), "x");
    p.finish();
    ensure!(p.obj("n") && p.obj("src") && !p.obj("buf"));
    Ok(())
}

fn frame_exit_leaves_globals() -> Check {
    let program = format!(
        "fn main {{ {TAINT_R1} STORE [0x2000], r1 CALL f HALT }} fn f {{ SUB sp, 4 STORE [fp-4], 0 ADD sp, 4 RET }}"
    );
    let mut p = Probe::new(&program, "x");
    p.finish();
    ensure!(p.obj("n"));
    Ok(())
}

pub const CASES: &[Case] = &[
    ("input_marks_object_once", input_marks_object_once),
    ("input_spanning_two_objects", input_spanning_two_objects),
    ("input_into_gap_spills_per_byte", input_into_gap_spills_per_byte),
    ("disabled_source_is_untainted", disabled_source_is_untainted),
    ("move_full_tainted", move_full_tainted),
    ("move_full_untainted_clears", move_full_untainted_clears),
    ("move_partial_tainted_taints_whole", move_partial_tainted_taints_whole),
    ("const_into_register", const_into_register),
    ("const_full_store_clears", const_full_store_clears),
    ("const_partial_store_keeps", const_partial_store_keeps),
    ("arith_tainted_plus_clean", arith_tainted_plus_clean),
    ("arith_clean_plus_clean", arith_clean_plus_clean),
    ("arith_xor_distinct_tainted", arith_xor_distinct_tainted),
    ("unary_keeps_tags", unary_keeps_tags),
    ("zero_idioms_clear", zero_idioms_clear),
    ("distinct_xor_is_not_an_idiom", distinct_xor_is_not_an_idiom),
    ("strcpy_reads_and_writes_once", strcpy_reads_and_writes_once),
    ("memcpy_clean_full_coverage_clears", memcpy_clean_full_coverage_clears),
    ("memcpy_per_destination_slice", memcpy_per_destination_slice),
    ("memset_constant_clears", memset_constant_clears),
    ("memset_tainted_fill_taints", memset_tainted_fill_taints),
    ("memset_half_keeps", memset_half_keeps),
    ("indexed_tainted_index", indexed_tainted_index),
    ("indexed_clean_index", indexed_clean_index),
    ("indexed_tainted_element", indexed_tainted_element),
    ("frame_exit_recycles_clean", frame_exit_recycles_clean),
    ("empty_frame_exit_is_noop", empty_frame_exit_is_noop),
    ("frame_exit_leaves_globals", frame_exit_leaves_globals),
];

pub fn check(name: &str) {
    let (_, f) = CASES.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("no case {name}"));
    if let Err(e) = f() {
        panic!("{name}: {e}");
    }
}
