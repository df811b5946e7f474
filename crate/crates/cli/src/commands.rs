use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gnf::codec::{compress, decompress, read_header, verify, ArchiveStats, CodecError, CodecOptions, NMode};
use gnf::geneformer::{save_checkpoint, GeneFormer, ModelConfig};
use gnf::grouping::GroupingConfig;
use gnf::model::AnyModel;
use gnf::sequence_io::{split_dataset, write_fasta};
use gnf::trainer::{history_jsonl, train_with, Dataset, TrainConfig};

use crate::bench::{self, BenchArgs, Variant};
use crate::{read_fasta, read_file, write_file, CliError, CliResult, Failure, ModelSpec};

#[derive(Debug, Parser)]
#[command(
    name = "gnf",
    version,
    about = "Lossless DNA compression with a learned entropy model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a FASTA file into a .gnf archive
    Compress(CompressArgs),
    /// Restore the FASTA file held in an archive
    Decompress(DecompressArgs),
    /// Decode an archive and compare it with the original FASTA
    Verify(VerifyArgs),
    /// Train an entropy model checkpoint
    Train(TrainArgs),
    /// Compare methods and ablations on one FASTA file
    Bench(BenchArgs),
    /// Print an archive header
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GroupingFlags {
    /// Bases per independently decodable group
    #[arg(long, default_value_t = 213_000)]
    pub group_len: usize,
    /// Minimum context length in bases (rounded up to whole token groups)
    #[arg(long, default_value_t = 64)]
    pub context: usize,
    /// Bases per token [default: 2, or the checkpoint's]
    #[arg(long)]
    pub ngram: Option<usize>,
    /// Tokens per encoder position [default: 4, or the checkpoint's]
    #[arg(long)]
    pub byte_group: Option<usize>,
}

impl GroupingFlags {
    /// Grouping for `model`; explicit flags win so that a disagreement
    /// with a checkpoint is reported rather than silently fixed.
    pub fn resolve(&self, model: &AnyModel) -> GroupingConfig {
        match model {
            AnyModel::GeneFormer(m) => {
                let c = m.config();
                let ngram = self.ngram.unwrap_or(c.ngram);
                let byte_group = self.byte_group.unwrap_or(c.byte_group);
                let mut g = GroupingConfig::aligned(self.group_len, c.context_len, ngram, byte_group);
                if (ngram, byte_group) == (c.ngram, c.byte_group) {
                    g.context_len = c.context_len;
                }
                g
            }
            _ => GroupingConfig::aligned(
                self.group_len,
                self.context,
                self.ngram.unwrap_or(2),
                self.byte_group.unwrap_or(4),
            ),
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    pub input: PathBuf,
    /// `uniform`, `order-k:<k>` or a checkpoint file
    #[arg(short, long, default_value = "order-k:4")]
    pub model: String,
    /// Output archive [default: <input>.gnf]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub grouping: GroupingFlags,
    /// Code N bases inside the stream instead of a side table
    #[arg(long)]
    pub in_stream_n: bool,
    /// Groups coded concurrently, on at most one thread per core (0 = logical cores)
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    pub archive: PathBuf,
    /// Model the archive was written with; baselines are read from the header
    #[arg(short, long)]
    pub model: Option<String>,
    /// Output FASTA [default: stdout]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub archive: PathBuf,
    /// The FASTA file that was compressed
    #[arg(long)]
    pub original: PathBuf,
    #[arg(short, long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub archive: PathBuf,
    /// Emit JSON instead of text
    #[arg(long)]
    pub json: bool,
}

/// Model shape and ablation switches shared by `train` and `bench`.
#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// Small preset: d_model 64, d_ff 256, 4 heads, 50k examples and 10 epochs per run
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Carry encoder inputs instead of outputs between windows
    #[arg(long)]
    pub no_latent_array: bool,
    /// Keep several past segments of memory instead of one
    #[arg(long)]
    pub no_segment_cut: bool,
    /// One token per encoder position
    #[arg(long)]
    pub no_bg: bool,
    /// One base per token
    #[arg(long)]
    pub no_ng: bool,
    /// One group per sequence
    #[arg(long)]
    pub no_fg: bool,
}

impl ModelFlags {
    pub fn variant(&self) -> Variant {
        Variant {
            bg: !self.no_bg,
            ng: !self.no_ng,
            fg: !self.no_fg,
            latent: !self.no_latent_array,
            cut: !self.no_segment_cut,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (d, ff, h) = if self.toy { (64, 256, 4) } else { (768, 3072, 8) };
        (
            self.d_model.unwrap_or(d),
            self.d_ff.unwrap_or(ff),
            self.heads.unwrap_or(h),
        )
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training FASTA
    pub input: PathBuf,
    /// Second dataset; enables concatenated batches and lr 0.002
    #[arg(long)]
    pub hybrid: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(short, long, default_value = "model.gfck")]
    pub output: PathBuf,
    /// History log [default: <output>.history.jsonl]
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// [default: 100, or 10 with --toy]
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// [default: 0.001, or 0.002 with --hybrid]
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, env = "GNF_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Examples per epoch after shuffling [default: all, or 50000 with --toy]
    #[arg(long)]
    pub max_examples: Option<usize>,
    /// Fraction of records held out for validation
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, default_value_t = 64)]
    pub context: usize,
    #[arg(long, default_value_t = 213_000)]
    pub group_len: usize,
    #[command(flatten)]
    pub model: ModelFlags,
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Compress(a) => cmd_compress(&a),
        Command::Decompress(a) => cmd_decompress(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Bench(a) => bench::cmd_bench(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn stdout_line(line: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").map_err(|e| CliError::new(Failure::Io, format!("stdout: {e}")))
}

pub fn cmd_compress(a: &CompressArgs) -> CliResult<()> {
    let start = Instant::now();
    let model = ModelSpec::parse(&a.model)?.load()?;
    let records = read_fasta(&a.input)?;
    let grouping = a.grouping.resolve(&model);
    let opts = CodecOptions {
        n_mode: if a.in_stream_n {
            NMode::InStream
        } else {
            NMode::SideChannel
        },
        workers: a.workers,
        ..CodecOptions::default()
    };
    let packed = compress(&records, &model, &grouping, &opts)?;
    let out = a.output.clone().unwrap_or_else(|| with_suffix(&a.input, "gnf"));
    write_file(&out, &packed.bytes)?;
    let s = &packed.stats;
    stdout_line(&format!(
        "{} -> {}: {} bases, {} bytes, {:.6} bpb, {:.3} s",
        a.input.display(),
        out.display(),
        s.bases,
        s.total_bytes,
        s.bpb(),
        start.elapsed().as_secs_f64()
    ))
}

fn with_suffix(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// The model named on the command line, or the baseline the header names.
fn model_for(archive: &[u8], spec: Option<&str>) -> CliResult<AnyModel> {
    match spec {
        Some(s) => ModelSpec::parse(s)?.load(),
        None => {
            let (header, _) = read_header(archive)?;
            ModelSpec::from_kind(header.model)
                .ok_or_else(|| CliError::new(Failure::Usage, "archive needs a checkpoint: pass --model"))?
                .load()
        }
    }
}

pub fn cmd_decompress(a: &DecompressArgs) -> CliResult<()> {
    let bytes = read_file(&a.archive)?;
    let model = model_for(&bytes, a.model.as_deref())?;
    let opts = CodecOptions {
        workers: a.workers,
        ..CodecOptions::default()
    };
    let out = decompress(&bytes, &model, &opts)?;
    let fasta = write_fasta(&out.records);
    match &a.output {
        Some(p) => write_file(p, &fasta),
        None => std::io::stdout()
            .lock()
            .write_all(&fasta)
            .map_err(|e| CliError::new(Failure::Io, format!("stdout: {e}"))),
    }
}

pub fn cmd_verify(a: &VerifyArgs) -> CliResult<()> {
    let bytes = read_file(&a.archive)?;
    let original = read_fasta(&a.original)?;
    let model = model_for(&bytes, a.model.as_deref())?;
    let opts = CodecOptions {
        workers: a.workers,
        ..CodecOptions::default()
    };
    match verify(&original, &bytes, &model, &opts) {
        Ok(report) => stdout_line(&format!(
            "ok: {} bases, {} bytes, {:.6} bpb, decode {:.3} s",
            report.stats.bases,
            report.stats.total_bytes,
            report.bpb(),
            report.decode_time.as_secs_f64()
        )),
        Err(CodecError::Mismatch { sequence, position }) => Err(CliError::new(
            Failure::Corrupt,
            format!(
                "mismatch: sequence {sequence} ({}) first differs at base {position}",
                original.get(sequence).map_or("", |r| r.header.as_str())
            ),
        )),
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct InspectSequence<'a> {
    header: &'a str,
    bases: u64,
    n_runs: usize,
    groups: usize,
    payload_bytes: u64,
}

#[derive(Serialize)]
struct InspectReport<'a> {
    version: u16,
    n_mode: String,
    model: String,
    fingerprint: String,
    group_len: usize,
    context_len: usize,
    ngram: usize,
    byte_group: usize,
    total_bytes: usize,
    header_bytes: usize,
    fragment_bytes: usize,
    payload_bytes: usize,
    bpb: f64,
    sequences: Vec<InspectSequence<'a>>,
}

pub fn cmd_inspect(a: &InspectArgs) -> CliResult<()> {
    let bytes = read_file(&a.archive)?;
    let (header, _) = read_header(&bytes)?;
    let stats = ArchiveStats::from_archive(&bytes)?;
    let g = header.grouping;
    let report = InspectReport {
        version: header.version,
        n_mode: format!("{:?}", header.n_mode),
        model: header.model.to_string(),
        fingerprint: header.fingerprint.iter().map(|b| format!("{b:02x}")).collect(),
        group_len: g.group_len,
        context_len: g.context_len,
        ngram: g.ngram,
        byte_group: g.byte_group,
        total_bytes: stats.total_bytes,
        header_bytes: stats.header_bytes,
        fragment_bytes: stats.fragment_bytes,
        payload_bytes: stats.payload_bytes,
        bpb: stats.bpb(),
        sequences: header
            .sequences
            .iter()
            .map(|s| InspectSequence {
                header: &s.header,
                bases: s.original_len,
                n_runs: s.n_runs.runs.len(),
                groups: s.payload_lens.len(),
                payload_bytes: s.payload_lens.iter().map(|&l| l as u64).sum(),
            })
            .collect(),
    };
    if a.json {
        return stdout_line(&serde_json::to_string_pretty(&report).expect("report serializes"));
    }
    let mut text = format!(
        "version      {}\nn mode       {}\nmodel        {}\nfingerprint  {}\ngrouping     group {} context {} ngram {} byte-group {}\nsize         {} bytes (header {}, fragments {}, payload {})\nbpb          {:.6}\n",
        report.version,
        report.n_mode,
        report.model,
        report.fingerprint,
        g.group_len,
        g.context_len,
        g.ngram,
        g.byte_group,
        report.total_bytes,
        report.header_bytes,
        report.fragment_bytes,
        report.payload_bytes,
        report.bpb
    );
    for s in &report.sequences {
        text.push_str(&format!(
            "  {:<24} {:>10} bases {:>4} groups {:>10} payload bytes {:>5} N runs\n",
            s.header, s.bases, s.groups, s.payload_bytes, s.n_runs
        ));
    }
    stdout_line(text.trim_end())
}

/// Splits records into training and validation sets.
fn dataset(path: &Path, val_fraction: f64, seed: u64) -> CliResult<Dataset> {
    let records = read_fasta(path)?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CliError::new(
            Failure::Usage,
            format!("val fraction {val_fraction} outside [0, 1)"),
        ));
    }
    let (train, val, _) = split_dataset(&records, (1.0 - val_fraction, val_fraction, 0.0), seed)?;
    if val.is_empty() {
        log::warn!("{}: no records held out for validation", path.display());
    }
    Ok(Dataset { train, val })
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let start = Instant::now();
    let variant = a.model.variant();
    let grouping = variant.grouping(a.group_len, a.context, usize::MAX);
    let config: ModelConfig = variant.model_config(a.model.dims(), a.model.dropout, &grouping, a.seed);
    let model = GeneFormer::new(config)?;
    let mut cfg = if a.hybrid.is_some() {
        TrainConfig::hybrid()
    } else {
        TrainConfig::default()
    };
    cfg.batch_size = a.batch_size;
    cfg.seed = a.seed;
    cfg.eval_every = a.eval_every;
    cfg.workers = a.workers;
    cfg.group_len = grouping.group_len;
    cfg.epochs = a.epochs.unwrap_or(if a.model.toy { 10 } else { cfg.epochs });
    cfg.max_examples = a.max_examples.or(a.model.toy.then_some(50_000));
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }

    let first = dataset(&a.input, a.val_fraction, a.seed)?;
    let second = a
        .hybrid
        .as_deref()
        .map(|p| dataset(p, a.val_fraction, a.seed))
        .transpose()?;
    let sets: Vec<&Dataset> = std::iter::once(&first).chain(second.as_ref()).collect();

    let history_path = a
        .history
        .clone()
        .unwrap_or_else(|| with_suffix(&a.output, "history.jsonl"));
    let mut log = std::fs::File::create(&history_path).map_err(|e| CliError::io(&history_path, e))?;
    let mut write_err = None;
    let outcome = train_with(&sets, model, &cfg, &mut |r| {
        if let Err(e) = log.write_all(history_jsonl(std::slice::from_ref(r)).as_bytes()) {
            write_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {:>3}  loss {:.5}  val bpb {}",
            r.epoch,
            r.loss,
            r.val_bpb.map_or("-".into(), |v| format!("{v:.5}"))
        );
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&history_path, e));
    }
    write_file(&a.output, &save_checkpoint(&outcome.model))?;
    stdout_line(&format!(
        "{}: {} parameters, best epoch {} (val bpb {}), {:.1} s",
        a.output.display(),
        outcome.model.param_count(),
        outcome.best_epoch,
        outcome.best_val_bpb.map_or("-".into(), |v| format!("{v:.5}")),
        start.elapsed().as_secs_f64()
    ))
}
