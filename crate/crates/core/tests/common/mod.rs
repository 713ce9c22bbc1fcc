//! Seeded straight-line programs over a fixed four-object layout, for the
//! lockstep superset checks.

#![allow(dead_code)]

pub mod rules;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taintvm::asm::assemble;
use taintvm::objects::load_object_table;
use taintvm::session::{EngineKind, RunResult, Session, SessionConfig};
use taintvm::vm::parse_input_script;

/// `rec` has two members and an uncovered tail; 0x2100.. is outside
/// every object.
pub const LAYOUT: &str = "\
global rec 0x00002000 32
member rec head 0 8
member rec body 8 16
global word 0x00002020 4
global blob 0x00002040 64
global flag 0x00002080 1
";

const LO: u32 = 0x2000;
const HI: u32 = 0x2140;

const SOURCES: [&str; 5] = ["stdin", "argv", "env", "net", "file"];

pub struct Generated {
    pub program: String,
    pub input: String,
}

fn reg(rng: &mut ChaCha8Rng) -> String {
    format!("r{}", rng.gen_range(0..8))
}

fn addr(rng: &mut ChaCha8Rng, len: u32) -> u32 {
    rng.gen_range(LO..HI - len)
}

fn instruction(rng: &mut ChaCha8Rng, out: &mut Vec<String>, inputs: &mut Vec<String>) {
    match rng.gen_range(0..17) {
        0 | 1 => {
            let n = rng.gen_range(1..48);
            let a = addr(rng, n);
            let src = SOURCES.choose(rng).unwrap();
            out.push(format!("READINPUT {a:#x}, {n}, {src}"));
            let len = rng.gen_range(0..n + 4);
            inputs.push((0..len).map(|_| rng.gen_range(b'!'..=b'~') as char).filter(|&c| c != '\\').collect());
        }
        2 => out.push(format!("MOV {}, {}", reg(rng), rng.gen_range(0..1000))),
        3 => out.push(format!("MOV {}, {}", reg(rng), reg(rng))),
        4 => out.push(format!("LOAD {}, [{:#x}]", reg(rng), addr(rng, 4))),
        5 => out.push(format!("LOAD.b {}, [{:#x}]", reg(rng), addr(rng, 1))),
        6 => {
            // Index loaded from memory so it can carry taint and stays small.
            out.push(format!("LOAD.b r7, [{:#x}]", addr(rng, 1)));
            out.push(format!("LOAD.b {}, [{LO:#x}+r7*1]", reg(rng)));
        }
        7 => out.push(format!("STORE [{:#x}], {}", addr(rng, 4), reg(rng))),
        8 => out.push(format!("STORE.b [{:#x}], {}", addr(rng, 1), reg(rng))),
        9 => out.push(format!("STORE [{:#x}], {}", addr(rng, 4), rng.gen_range(0..100))),
        10 => {
            let op = ["ADD", "SUB", "XOR"].choose(rng).unwrap();
            let rhs = match rng.gen_range(0..3) {
                0 => reg(rng),
                1 => rng.gen_range(0..50).to_string(),
                _ => format!("[{:#x}]", addr(rng, 4)),
            };
            out.push(format!("{op} {}, {rhs}", reg(rng)));
        }
        11 => {
            let r = reg(rng);
            let op = ["XOR", "SUB"].choose(rng).unwrap();
            out.push(format!("{op} {r}, {r}"));
        }
        12 => out.push(format!("{} {}", ["INC", "DEC"].choose(rng).unwrap(), reg(rng))),
        13 => {
            let n = rng.gen_range(1..72);
            out.push(format!("MEMCPY {:#x}, {:#x}, {n}", addr(rng, n), addr(rng, n)));
        }
        14 => {
            // Bounded by a terminator planted within 32 bytes of the source.
            let src = addr(rng, 40);
            let stop = src + rng.gen_range(0..32);
            out.push(format!("STORE.b [{stop:#x}], 0"));
            out.push(format!("STRCPY {:#x}, {src:#x}", addr(rng, 40)));
        }
        15 => {
            let n = rng.gen_range(1..72);
            let fill = if rng.gen_bool(0.5) { reg(rng) } else { rng.gen_range(0..256).to_string() };
            out.push(format!("MEMSET {:#x}, {fill}, {n}", addr(rng, n)));
        }
        _ => {
            let r = reg(rng);
            out.push(format!("PUSH {r}"));
            out.push(format!("POP {}", reg(rng)));
        }
    }
}

pub fn generate(seed: u64) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Vec::new();
    let mut inputs = Vec::new();
    for _ in 0..rng.gen_range(4..40) {
        instruction(&mut rng, &mut body, &mut inputs);
    }
    let program = format!("fn main {{\n    {}\n    HALT\n}}\n", body.join("\n    "));
    Generated { program, input: inputs.join("\n") }
}

pub fn run_lockstep(g: &Generated) -> RunResult {
    let program = assemble(&g.program).unwrap_or_else(|e| panic!("{e}\n{}", g.program));
    let table = load_object_table(LAYOUT).unwrap();
    let cfg = SessionConfig { engine: EngineKind::Lockstep, continue_after_detect: true, ..SessionConfig::default() };
    Session::new(program, table, parse_input_script(&g.input), cfg).unwrap().run().unwrap()
}
