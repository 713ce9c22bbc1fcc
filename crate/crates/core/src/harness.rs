//! Loading a run from its four input files and executing it.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::asm::{assemble, AsmError};
use crate::objects::{load_object_table, ObjectTableError};
use crate::policy::{PolicyConfig, PolicyError};
use crate::session::{EngineKind, RunResult, Session, SessionConfig, SessionError};
use crate::vm::parse_input_script;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub program: PathBuf,
    pub objects: PathBuf,
    pub policy: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub engine: EngineKind,
    pub continue_after_detect: bool,
    pub max_steps: u64,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{}", path.display(), source)]
    Program { path: PathBuf, source: AsmError },
    #[error("{}:{}", path.display(), source.line)]
    Objects { path: PathBuf, source: ObjectTableError },
    #[error("{}:{}", path.display(), source.line)]
    Policy { path: PathBuf, source: PolicyError },
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl LoadError {
    /// Full message including the underlying cause.
    pub fn describe(&self) -> String {
        match self {
            LoadError::Objects { source, .. } => format!("{self}: {}", source.kind),
            LoadError::Policy { source, .. } => format!("{self}: {}", source.message),
            _ => self.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

/// Text sources of one run, already read.
#[derive(Debug, Clone, Copy)]
pub struct RunSources<'a> {
    pub program: &'a str,
    pub objects: &'a str,
    pub policy: Option<&'a str>,
    pub input: &'a str,
}

/// Parses all inputs and builds a ready session; `names` label errors.
pub fn prepare(src: RunSources<'_>, names: [&Path; 3], cfg: SessionConfig) -> Result<Session, LoadError> {
    let program =
        assemble(src.program).map_err(|source| LoadError::Program { path: names[0].to_path_buf(), source })?;
    let table =
        load_object_table(src.objects).map_err(|source| LoadError::Objects { path: names[1].to_path_buf(), source })?;
    let policy = match src.policy {
        Some(text) => {
            PolicyConfig::parse(text).map_err(|source| LoadError::Policy { path: names[2].to_path_buf(), source })?
        }
        None => PolicyConfig::default(),
    };
    let input = parse_input_script(src.input);
    Ok(Session::new(program, table, input, SessionConfig { policy, ..cfg })?)
}

/// Loads the files named by `config` and runs to completion; with
/// `dump_tags`, also returns a listing of the final tag space.
pub fn run(config: &RunConfig, dump_tags: bool) -> Result<(RunResult, Option<String>), LoadError> {
    let program = read(&config.program)?;
    let objects = read(&config.objects)?;
    let policy = config.policy.as_deref().map(read).transpose()?;
    let input = config.input.as_deref().map(read).transpose()?.unwrap_or_default();
    let names = [
        config.program.as_path(),
        config.objects.as_path(),
        config.policy.as_deref().unwrap_or(Path::new("<default policy>")),
    ];
    let cfg = SessionConfig {
        engine: config.engine,
        continue_after_detect: config.continue_after_detect,
        max_steps: config.max_steps,
        ..SessionConfig::default()
    };
    let sources = RunSources { program: &program, objects: &objects, policy: policy.as_deref(), input: &input };
    let session = prepare(sources, names, cfg)?;
    if !dump_tags {
        return Ok((session.run()?, None));
    }
    let (result, dump) = session.run_and_dump()?;
    Ok((result, Some(dump)))
}
