//! Overhead benchmark: each workload runs on the bare VM, under the object
//! engine and under the byte map, with policy checks and provenance off.
//! Modes are interleaved within every repetition; medians are reported and
//! the raw samples kept.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::asm::{assemble, Program};
use crate::layout::Layout;
use crate::objects::{load_object_table, ObjectTable};
use crate::session::{EngineKind, Session, SessionConfig};
use crate::vm::{parse_input_script, Machine};

#[derive(Debug, Clone, Copy)]
pub struct Workload {
    pub name: &'static str,
    pub program: &'static str,
    pub objects: &'static str,
    pub input: &'static str,
}

macro_rules! workload {
    ($name:literal) => {
        Workload {
            name: $name,
            program: include_str!(concat!("../workloads/", $name, "/program.asm")),
            objects: include_str!(concat!("../workloads/", $name, "/objects.tbl")),
            input: include_str!(concat!("../workloads/", $name, "/input.txt")),
        }
    };
}

pub const WORKLOADS: [Workload; 3] = [workload!("factorial"), workload!("copy_heavy"), workload!("parse_like")];

pub fn workload(name: &str) -> Option<&'static Workload> {
    WORKLOADS.iter().find(|w| w.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bare,
    Object,
    Byte,
}

/// Outcome of one untimed-setup, timed-run execution.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub nanos: u64,
    pub steps: u64,
    /// (reads, writes) of the tracker, absent for the bare VM.
    pub ops: Option<(u64, u64)>,
}

struct Prepared {
    program: Arc<Program>,
    table: ObjectTable,
    input: Vec<Vec<u8>>,
}

impl Workload {
    fn prepare(&self) -> Prepared {
        Prepared {
            program: Arc::new(assemble(self.program).expect("bundled workload assembles")),
            table: load_object_table(self.objects).expect("bundled object table loads"),
            input: parse_input_script(self.input),
        }
    }

    /// Runs once in `mode`; setup is excluded from the timing.
    pub fn measure(&self, mode: Mode) -> Measurement {
        self.measure_prepared(&self.prepare(), mode)
    }

    fn measure_prepared(&self, p: &Prepared, mode: Mode) -> Measurement {
        let engine = match mode {
            Mode::Bare => {
                let mut m = Machine::new(p.program.clone(), Layout::default(), p.input.clone());
                let t = Instant::now();
                m.boot();
                while !m.is_halted() {
                    m.step();
                }
                let nanos = t.elapsed().as_nanos() as u64;
                return Measurement { nanos, steps: m.state.steps, ops: None };
            }
            Mode::Object => EngineKind::Object,
            Mode::Byte => EngineKind::Byte,
        };
        let cfg = SessionConfig { engine, checks: false, provenance: false, ..SessionConfig::default() };
        let session =
            Session::new(p.program.clone(), p.table.clone(), p.input.clone(), cfg).expect("capacity suffices");
        let t = Instant::now();
        let r = session.run().expect("capacity suffices");
        let nanos = t.elapsed().as_nanos() as u64;
        let ops = r.object_ops.or(r.byte_ops);
        Measurement { nanos, steps: r.steps, ops }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub workload: String,
    pub reps: usize,
    pub steps: u64,
    pub bare_ns: u64,
    pub object_ns: u64,
    pub byte_ns: u64,
    /// (t - bare) / bare, from medians.
    pub object_overhead: f64,
    pub byte_overhead: f64,
    pub object_shadow_ops: u64,
    pub byte_shadow_ops: u64,
    pub samples_bare: Vec<u64>,
    pub samples_object: Vec<u64>,
    pub samples_byte: Vec<u64>,
}

impl BenchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bench result serializes")
    }

    pub fn object_cheaper(&self) -> bool {
        self.object_overhead < self.byte_overhead
    }
}

pub fn median(samples: &[u64]) -> u64 {
    let mut v = samples.to_vec();
    v.sort_unstable();
    match v.len() {
        0 => 0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2,
    }
}

fn overhead(t: u64, bare: u64) -> f64 {
    (t as f64 - bare as f64) / bare.max(1) as f64
}

/// `reps` interleaved repetitions after one warm-up pass.
pub fn run_workload(w: &Workload, reps: usize) -> BenchResult {
    let p = w.prepare();
    for mode in [Mode::Bare, Mode::Object, Mode::Byte] {
        w.measure_prepared(&p, mode);
    }
    let mut samples = [Vec::new(), Vec::new(), Vec::new()];
    let mut steps = 0;
    let mut ops = [0, 0];
    for rep in 0..reps {
        // Rotate the order so no mode always runs first.
        for k in 0..3 {
            let i = (rep + k) % 3;
            let mode = [Mode::Bare, Mode::Object, Mode::Byte][i];
            let m = w.measure_prepared(&p, mode);
            samples[i].push(m.nanos);
            steps = m.steps;
            if let Some((r, wr)) = m.ops {
                ops[i - 1] = r + wr;
            }
        }
    }
    let [bare, object, byte] = samples;
    let (b, o, y) = (median(&bare), median(&object), median(&byte));
    BenchResult {
        workload: w.name.to_string(),
        reps,
        steps,
        bare_ns: b,
        object_ns: o,
        byte_ns: y,
        object_overhead: overhead(o, b),
        byte_overhead: overhead(y, b),
        object_shadow_ops: ops[0],
        byte_shadow_ops: ops[1],
        samples_bare: bare,
        samples_object: object,
        samples_byte: byte,
    }
}

pub fn run_bench(reps: usize) -> Vec<BenchResult> {
    WORKLOADS.iter().map(|w| run_workload(w, reps)).collect()
}
