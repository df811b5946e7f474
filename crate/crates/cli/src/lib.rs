//! Command-line front end for the `gnf` compressor and its benchmark
//! harness.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | missing or unreadable file, failed write |
//! | 3 | corrupt archive or checkpoint, model mismatch, verification failure |
//! | 4 | non-finite value during training |
//! | 64 | bad command line |
//! | 65 | malformed input data (FASTA) |
//!
//! Data goes to stdout; diagnostics go to stderr.

pub mod bench;
pub mod commands;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gnf::baselines::{OrderK, Uniform};
use gnf::codec::CodecError;
use gnf::geneformer::{load_checkpoint, GeneFormer};
use gnf::model::{AnyModel, ModelError, ModelKind};
use gnf::sequence_io::{parse_fasta, FastaRecord, SequenceError};
use gnf::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Internal,
    Io,
    Corrupt,
    NonFinite,
    Usage,
    Data,
}

impl Failure {
    pub fn code(self) -> i32 {
        match self {
            Failure::Internal => 1,
            Failure::Io => 2,
            Failure::Corrupt => 3,
            Failure::NonFinite => 4,
            Failure::Usage => 64,
            Failure::Data => 65,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Failure, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new(Failure::Io, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        let kind = match &e {
            CodecError::Model(_) | CodecError::Pool(_) => Failure::Internal,
            CodecError::Grouping(_) => Failure::Usage,
            _ => Failure::Corrupt,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::Incompatible(_) | ModelError::Grouping(_) => Failure::Usage,
            _ => Failure::Internal,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::NonFinite { .. } => Failure::NonFinite,
            TrainError::BadConfig(_) => Failure::Usage,
            TrainError::NoExamples => Failure::Data,
            TrainError::Codec(_) | TrainError::Model(_) => Failure::Internal,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<SequenceError> for CliError {
    fn from(e: SequenceError) -> Self {
        CliError::new(Failure::Data, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_fasta(path: &Path) -> CliResult<Vec<FastaRecord>> {
    let bytes = read_file(path)?;
    parse_fasta(&bytes).map_err(|e| CliError::new(Failure::Data, format!("{}: {e}", path.display())))
}

/// `uniform`, `order-k:<k>` or a checkpoint path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Uniform,
    OrderK(usize),
    Checkpoint(PathBuf),
}

impl ModelSpec {
    pub fn parse(s: &str) -> CliResult<Self> {
        if s == "uniform" {
            return Ok(ModelSpec::Uniform);
        }
        if let Some(k) = s.strip_prefix("order-k:") {
            let k = k
                .parse()
                .map_err(|_| CliError::new(Failure::Usage, format!("bad context order in {s:?}")))?;
            return Ok(ModelSpec::OrderK(k));
        }
        Ok(ModelSpec::Checkpoint(PathBuf::from(s)))
    }

    /// The baseline an archive header names, if any.
    pub fn from_kind(kind: ModelKind) -> Option<Self> {
        match kind {
            ModelKind::Uniform => Some(ModelSpec::Uniform),
            ModelKind::OrderK(k) => Some(ModelSpec::OrderK(k as usize)),
            ModelKind::GeneFormer => None,
        }
    }

    pub fn load(&self) -> CliResult<AnyModel> {
        Ok(match self {
            ModelSpec::Uniform => AnyModel::Uniform(Uniform),
            ModelSpec::OrderK(k) => AnyModel::OrderK(OrderK::new(*k)?),
            ModelSpec::Checkpoint(path) => AnyModel::GeneFormer(Arc::new(load_model(path)?)),
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Uniform => write!(f, "uniform"),
            ModelSpec::OrderK(k) => write!(f, "order-k:{k}"),
            ModelSpec::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

pub fn load_model(path: &Path) -> CliResult<GeneFormer> {
    let bytes = read_file(path)?;
    load_checkpoint(&bytes).map_err(|e| CliError::new(Failure::Corrupt, format!("{}: {e}", path.display())))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match commands::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Failure::Usage.code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gnf: {e}");
            e.kind.code()
        }
    }
}
