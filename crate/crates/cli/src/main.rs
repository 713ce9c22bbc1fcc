use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use taintvm::bench::run_bench;
use taintvm::corpus::{matrix_table, run_corpus};
use taintvm::harness::{run, RunConfig};
use taintvm::session::{EngineKind, RunResult, Stop};

#[derive(Parser)]
#[command(name = "taintvm", version, about = "Object-granular taint tracking on a small VM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one program under a taint engine.
    Run(RunArgs),
    /// Run the bundled attack corpus and print the verdict matrix.
    Corpus {
        /// Where to write the verdicts, one JSON record per line.
        #[arg(short, long, default_value = "verdicts.jsonl")]
        out: PathBuf,
    },
    /// Time the bundled workloads on the bare VM and under both engines.
    Bench {
        /// Repetitions per engine and workload.
        #[arg(short = 'n', long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(5..))]
        reps: u32,
        /// Also write the JSON records to this file.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(short, long)]
    program: PathBuf,
    /// Object table.
    #[arg(short = 't', long = "objects")]
    objects: PathBuf,
    /// Policy file; all checks on when absent.
    #[arg(short = 'P', long)]
    policy: Option<PathBuf>,
    /// Input script.
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Engine::Object)]
    engine: Engine,
    #[arg(long)]
    continue_after_detect: bool,
    /// Print the final tag state.
    #[arg(long)]
    dump_tags: bool,
    /// Emit reports as JSON lines instead of text.
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 10_000_000)]
    max_steps: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Object,
    Byte,
    Lockstep,
}

impl From<Engine> for EngineKind {
    fn from(e: Engine) -> Self {
        match e {
            Engine::Object => EngineKind::Object,
            Engine::Byte => EngineKind::Byte,
            Engine::Lockstep => EngineKind::Lockstep,
        }
    }
}

fn stop_line(r: &RunResult) -> String {
    match &r.stop {
        Stop::Halted(h) => format!("halted ({h:?}) after {} steps", r.steps),
        Stop::Detected => format!("stopped on detection after {} steps", r.steps),
        Stop::StepLimit => format!("step limit reached after {} steps", r.steps),
        Stop::Divergence => format!("engines diverged after {} steps", r.steps),
    }
}

fn cmd_run(args: RunArgs) -> u8 {
    let config = RunConfig {
        program: args.program,
        objects: args.objects,
        policy: args.policy,
        input: args.input,
        engine: args.engine.into(),
        continue_after_detect: args.continue_after_detect,
        max_steps: args.max_steps,
    };
    let (result, dump) = match run(&config, args.dump_tags) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}", e.describe());
            return 1;
        }
    };
    let mut out = std::io::stdout().lock();
    if !result.output.is_empty() {
        let _ = out.write_all(&result.output);
        if !result.output.ends_with(b"\n") {
            let _ = writeln!(out);
        }
    }
    for r in &result.reports {
        let line = if args.json { r.to_json() } else { r.summary() };
        let _ = writeln!(out, "{line}");
    }
    for v in &result.violations {
        let _ = writeln!(out, "superset violation: {v}");
    }
    if let Some(d) = dump {
        let _ = write!(out, "{d}");
    }
    eprintln!("{}", stop_line(&result));
    result.exit_code() as u8
}

fn cmd_corpus(out: PathBuf) -> anyhow::Result<u8> {
    let verdicts = run_corpus().map_err(|e| anyhow::anyhow!(e.describe()))?;
    print!("{}", matrix_table(&verdicts));
    let lines: String = verdicts.iter().map(|v| v.to_json() + "\n").collect();
    fs::write(&out, lines).with_context(|| format!("writing {}", out.display()))?;
    Ok(if verdicts.iter().all(|v| v.pass) { 0 } else { 1 })
}

fn cmd_bench(reps: u32, out: Option<PathBuf>) -> anyhow::Result<u8> {
    let results = run_bench(reps as usize);
    let mut lines = String::new();
    for r in &results {
        lines.push_str(&r.to_json());
        lines.push('\n');
        eprintln!(
            "{:<11} object {:>7.1}%  byte {:>9.1}%  shadow ops {} vs {}",
            r.workload,
            r.object_overhead * 100.0,
            r.byte_overhead * 100.0,
            r.object_shadow_ops,
            r.byte_shadow_ops
        );
    }
    print!("{lines}");
    if let Some(path) = out {
        fs::write(&path, &lines).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Run(args) => Ok(cmd_run(args)),
        Command::Corpus { out } => cmd_corpus(out),
        Command::Bench { reps, out } => cmd_bench(reps, out),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
