//! Bundled attack corpus. Each entry is a small program with an object
//! table, an attack input and a benign twin (same program with harmless
//! input, or the patched program for the format-string entries).

use std::path::Path;
use std::thread;

use serde::Serialize;

use crate::harness::{prepare, LoadError, RunSources};
use crate::policy::{AttackReport, Check, Severity};
use crate::session::{EngineKind, RunResult, SessionConfig};

const DEFAULT_POLICY: &str = include_str!("../corpus/default.policy");

#[derive(Debug, Clone, Copy)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub program: &'static str,
    /// Patched program for the benign run; `None` reuses `program`.
    pub benign_program: Option<&'static str>,
    pub objects: &'static str,
    pub policy: &'static str,
    pub attack: &'static str,
    pub benign: &'static str,
    pub expected_severity: Severity,
    /// The check expected to fire first on the attack input.
    pub expected_check: Check,
}

macro_rules! entry_file {
    ($name:literal, $file:literal) => {
        include_str!(concat!("../corpus/", $name, "/", $file))
    };
}

pub const CORPUS: [CorpusEntry; 7] = [
    CorpusEntry {
        name: "stack_smash",
        description: "strcpy of argv into a 16-byte local; return address target",
        program: entry_file!("stack_smash", "program.asm"),
        benign_program: None,
        objects: entry_file!("stack_smash", "objects.tbl"),
        policy: DEFAULT_POLICY,
        attack: entry_file!("stack_smash", "attack.txt"),
        benign: entry_file!("stack_smash", "benign.txt"),
        expected_severity: Severity::Control,
        expected_check: Check::NoncontrolBounds,
    },
    CorpusEntry {
        name: "heap_overflow",
        description: "strcpy into a heap chunk running into the next boundary tag",
        program: entry_file!("heap_overflow", "program.asm"),
        benign_program: None,
        objects: entry_file!("heap_overflow", "objects.tbl"),
        policy: DEFAULT_POLICY,
        attack: entry_file!("heap_overflow", "attack.txt"),
        benign: entry_file!("heap_overflow", "benign.txt"),
        expected_severity: Severity::Control,
        expected_check: Check::NoncontrolBounds,
    },
    CorpusEntry {
        name: "format_string",
        description: "printf of argv; %n aimed at a function pointer",
        program: entry_file!("format_string", "program.asm"),
        benign_program: Some(entry_file!("format_string", "benign.asm")),
        objects: entry_file!("format_string", "objects.tbl"),
        policy: DEFAULT_POLICY,
        attack: entry_file!("format_string", "attack.txt"),
        benign: entry_file!("format_string", "benign.txt"),
        expected_severity: Severity::Control,
        expected_check: Check::Format,
    },
    CorpusEntry {
        name: "noncontrol_struct",
        description: "overflow of a name buffer into the adjacent filename member",
        program: entry_file!("noncontrol_struct", "program.asm"),
        benign_program: None,
        objects: entry_file!("noncontrol_struct", "objects.tbl"),
        policy: DEFAULT_POLICY,
        attack: entry_file!("noncontrol_struct", "attack.txt"),
        benign: entry_file!("noncontrol_struct", "benign.txt"),
        expected_severity: Severity::Noncontrol,
        expected_check: Check::NoncontrolBounds,
    },
    CorpusEntry {
        name: "double_free",
        description: "input-selected error path frees a chunk twice",
        program: entry_file!("double_free", "program.asm"),
        benign_program: None,
        objects: entry_file!("double_free", "objects.tbl"),
        policy: DEFAULT_POLICY,
        attack: entry_file!("double_free", "attack.txt"),
        benign: entry_file!("double_free", "benign.txt"),
        expected_severity: Severity::Control,
        expected_check: Check::ControlData,
    },
    CorpusEntry {
        name: "ghttpd_like",
        description: "overflow of a saved register later passed to exec",
        program: entry_file!("ghttpd_like", "program.asm"),
        benign_program: None,
        objects: entry_file!("ghttpd_like", "objects.tbl"),
        policy: DEFAULT_POLICY,
        attack: entry_file!("ghttpd_like", "attack.txt"),
        benign: entry_file!("ghttpd_like", "benign.txt"),
        expected_severity: Severity::Control,
        expected_check: Check::Syscall,
    },
    CorpusEntry {
        name: "wuftpd_like",
        description: "format string %n overwriting a cached user id (watched)",
        program: entry_file!("wuftpd_like", "program.asm"),
        benign_program: Some(entry_file!("wuftpd_like", "benign.asm")),
        objects: entry_file!("wuftpd_like", "objects.tbl"),
        policy: entry_file!("wuftpd_like", "policy.txt"),
        attack: entry_file!("wuftpd_like", "attack.txt"),
        benign: entry_file!("wuftpd_like", "benign.txt"),
        expected_severity: Severity::Control,
        expected_check: Check::Format,
    },
];

pub fn entry(name: &str) -> Option<&'static CorpusEntry> {
    CORPUS.iter().find(|e| e.name == name)
}

impl CorpusEntry {
    pub fn run(&self, benign: bool, cfg: SessionConfig) -> Result<RunResult, LoadError> {
        let program = if benign { self.benign_program.unwrap_or(self.program) } else { self.program };
        let input = if benign { self.benign } else { self.attack };
        let sources = RunSources { program, objects: self.objects, policy: Some(self.policy), input };
        let label = format!("corpus/{}", self.name);
        let p = Path::new(&label);
        prepare(sources, [&p.join("program.asm"), &p.join("objects.tbl"), &p.join("policy.txt")], cfg)?
            .run()
            .map_err(LoadError::from)
    }
}

/// One row of the verdict matrix.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub entry: String,
    pub detected: bool,
    pub severity: Option<Severity>,
    pub policy: Option<Check>,
    pub expected_severity: Severity,
    pub expected_policy: Check,
    pub attack_exit: i32,
    pub benign_exit: i32,
    pub benign_reports: usize,
    pub benign_clean: bool,
    pub lockstep_violations: usize,
    pub pass: bool,
}

impl Verdict {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

fn first_severe(reports: &[AttackReport]) -> Option<&AttackReport> {
    reports.iter().find(|r| r.severity != Severity::Shadow)
}

/// Runs one entry's attack and benign twin (each in lockstep, so the
/// superset property is checked along the way).
pub fn evaluate_entry(e: &CorpusEntry) -> Result<Verdict, LoadError> {
    let cfg = SessionConfig { engine: EngineKind::Lockstep, ..SessionConfig::default() };
    let attack = e.run(false, cfg.clone())?;
    let benign = e.run(true, cfg)?;
    let first = first_severe(&attack.reports);
    let severity = attack.reports.iter().map(|r| r.severity).max();
    let detected = first.is_some();
    let benign_clean = benign.reports.is_empty() && benign.exit_code() == 0;
    let violations = attack.violations.len() + benign.violations.len();
    let pass = detected
        && severity == Some(e.expected_severity)
        && first.map(|r| r.policy) == Some(e.expected_check)
        && attack.exit_code() == e.expected_severity.exit_code()
        && benign_clean
        && violations == 0;
    Ok(Verdict {
        entry: e.name.to_string(),
        detected,
        severity,
        policy: first.map(|r| r.policy),
        expected_severity: e.expected_severity,
        expected_policy: e.expected_check,
        attack_exit: attack.exit_code(),
        benign_exit: benign.exit_code(),
        benign_reports: benign.reports.len(),
        benign_clean,
        lockstep_violations: violations,
        pass,
    })
}

/// Evaluates every entry, one worker thread per entry.
pub fn run_corpus() -> Result<Vec<Verdict>, LoadError> {
    thread::scope(|s| {
        let handles: Vec<_> = CORPUS.iter().map(|e| s.spawn(move || evaluate_entry(e))).collect();
        handles.into_iter().map(|h| h.join().expect("corpus worker panicked")).collect()
    })
}

/// Human-readable matrix.
pub fn matrix_table(verdicts: &[Verdict]) -> String {
    let mut out = format!(
        "{:<18} {:<9} {:<11} {:<18} {:<7} {:<7} {}\n",
        "entry", "detected", "severity", "policy", "attack", "benign", "result"
    );
    for v in verdicts {
        let sev = v.severity.map(|s| format!("{s:?}").to_uppercase()).unwrap_or_else(|| "-".into());
        let pol = v.policy.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<18} {:<9} {:<11} {:<18} {:<7} {:<7} {}\n",
            v.entry,
            if v.detected { "yes" } else { "no" },
            sev,
            pol,
            v.attack_exit,
            if v.benign_clean { "clean".to_string() } else { format!("{}!", v.benign_reports) },
            if v.pass { "ok" } else { "FAIL" }
        ));
    }
    out
}
