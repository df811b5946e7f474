//! Benchmark harness: baselines, checkpoints, trained ablation variants
//! and, when installed, general-purpose compressors, all scored on the
//! same FASTA file.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::Serialize;

use gnf::codec::{compress, decompress, CodecOptions};
use gnf::geneformer::{GeneFormer, ModelConfig};
use gnf::grouping::GroupingConfig;
use gnf::model::{AnyModel, EntropyModel};
use gnf::sequence_io::{parse_fasta, write_fasta, FastaRecord};
use gnf::trainer::{train, Dataset, TrainConfig};

use crate::commands::ModelFlags;
use crate::{read_fasta, read_file, write_file, CliError, CliResult, Failure, ModelSpec};

/// Which parts of the model and grouping scheme are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub bg: bool,
    pub ng: bool,
    pub fg: bool,
    pub latent: bool,
    pub cut: bool,
}

/// Past segments kept when segment cut is off.
pub const UNCUT_SEGMENTS: usize = 4;

impl Variant {
    pub const FULL: Variant = Variant {
        bg: true,
        ng: true,
        fg: true,
        latent: true,
        cut: true,
    };

    /// `longest` is the longest sequence; without fixed-length grouping
    /// every sequence is a single group.
    pub fn grouping(&self, group_len: usize, context: usize, longest: usize) -> GroupingConfig {
        let ngram = if self.ng { 2 } else { 1 };
        let byte_group = if self.bg { 4 } else { 1 };
        let mut g = GroupingConfig::aligned(group_len, context, ngram, byte_group);
        if !self.fg {
            g.group_len = longest.max(g.context_len + 1);
        }
        g
    }

    pub fn model_config(
        &self,
        (d_model, d_ff, heads): (usize, usize, usize),
        dropout: f64,
        grouping: &GroupingConfig,
        seed: u64,
    ) -> ModelConfig {
        let mut c = ModelConfig::for_grouping(d_model, d_ff, heads, grouping);
        c.dropout = dropout;
        c.latent_array = self.latent;
        c.memory_segments = if self.cut { 1 } else { UNCUT_SEGMENTS };
        c.init_seed = seed;
        c
    }

    pub fn label(&self) -> String {
        let mark = |on: bool| if on { "+" } else { "-" };
        format!(
            "geneformer BG{} NG{} FG{} LA{} SC{}",
            mark(self.bg),
            mark(self.ng),
            mark(self.fg),
            mark(self.latent),
            mark(self.cut)
        )
    }
}

/// Rows of the byte/N-gram/fixed-length grouping ablation.
pub fn grouping_grid() -> Vec<Variant> {
    let v = |bg, ng, fg| Variant {
        bg,
        ng,
        fg,
        ..Variant::FULL
    };
    vec![
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(true, true, true),
    ]
}

/// Rows of the latent-array / segment-cut ablation.
pub fn memory_grid() -> Vec<Variant> {
    let v = |latent, cut| Variant {
        latent,
        cut,
        ..Variant::FULL
    };
    vec![v(false, true), v(true, false), v(true, true)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Grouping,
    Memory,
    All,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// FASTA file to compress
    pub input: PathBuf,
    /// Extra models to score (`uniform`, `order-k:<k>` or a checkpoint)
    #[arg(short, long)]
    pub model: Vec<String>,
    /// Context order of the always-present order-k row
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Training data for geneformer rows [default: the input]
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Ablation grid to train and score
    #[arg(long, value_enum)]
    pub grid: Option<Grid>,
    /// Train and score one geneformer with the ablation switches below
    #[arg(long)]
    pub geneformer: bool,
    #[command(flatten)]
    pub flags: ModelFlags,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_examples: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, env = "GNF_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 213_000)]
    pub group_len: usize,
    #[arg(long, default_value_t = 64)]
    pub context: usize,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Add rows for gzip, bzip2, xz and zstd when installed
    #[arg(long)]
    pub external: bool,
    /// Also write the report as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub method: String,
    /// Ablation grid the row belongs to, if any.
    pub grid: Option<String>,
    pub bpb: f64,
    pub bytes: u64,
    pub bases: u64,
    pub encode_secs: f64,
    pub decode_secs: f64,
    pub train_secs: Option<f64>,
    pub params: Option<usize>,
    pub config: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn grid(&self, name: &str) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.grid.as_deref() == Some(name)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let header = [
            "method", "grid", "bpb", "bytes", "encode s", "decode s", "train s", "params", "config",
        ];
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.grid.clone().unwrap_or_default(),
                    format!("{:.6}", r.bpb),
                    r.bytes.to_string(),
                    format!("{:.3}", r.encode_secs),
                    format!("{:.3}", r.decode_secs),
                    r.train_secs.map_or("-".into(), |t| format!("{t:.1}")),
                    r.params.map_or("-".into(), |p| p.to_string()),
                    r.config.clone(),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|c| c[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: Vec<&str>| {
            row.iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if (2..8).contains(&i) {
                        format!("{c:>w$}")
                    } else {
                        format!("{c:<w$}")
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = vec![line(header.to_vec())];
        out.push(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        for c in &cells {
            out.push(line(c.iter().map(|s| s.as_str()).collect()));
        }
        for n in &self.notes {
            out.push(format!("note: {n}"));
        }
        out.join("\n") + "\n"
    }
}

/// Everything a bench run needs, independent of the command line.
#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub input: PathBuf,
    pub train: Option<PathBuf>,
    pub order: usize,
    pub models: Vec<ModelSpec>,
    /// `(grid name, variant)`; grid name empty for a standalone row.
    pub variants: Vec<(String, Variant)>,
    pub dims: (usize, usize, usize),
    pub dropout: f64,
    pub train_cfg: TrainConfig,
    pub group_len: usize,
    pub context: usize,
    pub workers: usize,
    pub external: bool,
}

impl BenchPlan {
    pub fn from_args(a: &BenchArgs) -> CliResult<Self> {
        let mut variants = Vec::new();
        let grid = a.grid;
        if matches!(grid, Some(Grid::Grouping | Grid::All)) {
            variants.extend(grouping_grid().into_iter().map(|v| ("grouping".to_string(), v)));
        }
        if matches!(grid, Some(Grid::Memory | Grid::All)) {
            variants.extend(memory_grid().into_iter().map(|v| ("memory".to_string(), v)));
        }
        let f = &a.flags;
        if a.geneformer || f.no_bg || f.no_ng || f.no_fg || f.no_latent_array || f.no_segment_cut {
            variants.push((String::new(), f.variant()));
        }
        Ok(BenchPlan {
            input: a.input.clone(),
            train: a.train.clone(),
            order: a.order,
            models: a.model.iter().map(|m| ModelSpec::parse(m)).collect::<CliResult<_>>()?,
            variants,
            dims: (f.d_model.unwrap_or(64), f.d_ff.unwrap_or(256), f.heads.unwrap_or(4)),
            dropout: f.dropout,
            train_cfg: TrainConfig {
                epochs: a.epochs,
                max_examples: Some(a.max_examples),
                batch_size: a.batch_size,
                lr: a.lr,
                seed: a.seed,
                workers: a.workers,
                ..TrainConfig::default()
            },
            group_len: a.group_len,
            context: a.context,
            workers: a.workers,
            external: a.external,
        })
    }
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let plan = BenchPlan::from_args(a)?;
    let report = run_bench(&plan)?;
    if let Some(p) = &a.json {
        write_file(p, report.to_json().as_bytes())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

static SCRATCH: AtomicUsize = AtomicUsize::new(0);

/// A per-process scratch directory removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new() -> CliResult<Self> {
        let n = SCRATCH.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("gnf-bench-{}-{n}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Scratch(dir))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn base_count(records: &[FastaRecord]) -> u64 {
    records.iter().map(|r| r.seq.len() as u64).sum()
}

/// Times a full file-to-file round trip and checks it is lossless.
fn measure<M: EntropyModel>(
    plan: &BenchPlan,
    scratch: &Scratch,
    model: &M,
    grouping: &GroupingConfig,
) -> CliResult<(u64, u64, f64, f64)> {
    let opts = CodecOptions {
        workers: plan.workers,
        ..CodecOptions::default()
    };
    let archive = scratch.path("bench.gnf");
    let restored = scratch.path("bench.fa");

    let t = Instant::now();
    let records = read_fasta(&plan.input)?;
    let packed = compress(&records, model, grouping, &opts)?;
    write_file(&archive, &packed.bytes)?;
    let encode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let bytes = read_file(&archive)?;
    let out = decompress(&bytes, model, &opts)?;
    write_file(&restored, &write_fasta(&out.records))?;
    let decode = t.elapsed().as_secs_f64();

    if out.records != records {
        return Err(CliError::new(
            Failure::Corrupt,
            format!("{}: round trip differs", model.kind()),
        ));
    }
    let size = std::fs::metadata(&archive)
        .map_err(|e| CliError::io(&archive, e))?
        .len();
    Ok((size, base_count(&records), encode, decode))
}

fn row(
    method: String,
    grid: Option<String>,
    (bytes, bases, encode, decode): (u64, u64, f64, f64),
    train_secs: Option<f64>,
    params: Option<usize>,
    config: String,
) -> BenchRow {
    BenchRow {
        method,
        grid,
        bpb: if bases == 0 {
            0.0
        } else {
            bytes as f64 * 8.0 / bases as f64
        },
        bytes,
        bases,
        encode_secs: encode,
        decode_secs: decode,
        train_secs,
        params,
        config,
    }
}

fn describe(g: &GroupingConfig) -> String {
    format!(
        "group {} ctx {} ngram {} bg {}",
        g.group_len, g.context_len, g.ngram, g.byte_group
    )
}

pub fn run_bench(plan: &BenchPlan) -> CliResult<BenchReport> {
    let scratch = Scratch::new()?;
    let records = read_fasta(&plan.input)?;
    let longest = records.iter().map(|r| r.seq.len()).max().unwrap_or(0);
    let mut report = BenchReport::default();
    let base = Variant::FULL.grouping(plan.group_len, plan.context, longest);

    let mut baselines = vec![ModelSpec::Uniform, ModelSpec::OrderK(plan.order)];
    for m in &plan.models {
        if !baselines.contains(m) {
            baselines.push(m.clone());
        }
    }
    for spec in &baselines {
        let model = spec.load()?;
        let g = match &model {
            AnyModel::GeneFormer(m) => {
                let c = m.config();
                GroupingConfig {
                    group_len: plan.group_len,
                    context_len: c.context_len,
                    ngram: c.ngram,
                    byte_group: c.byte_group,
                }
            }
            _ => base,
        };
        let params = match &model {
            AnyModel::GeneFormer(m) => Some(m.param_count()),
            _ => None,
        };
        let m = measure(plan, &scratch, &model, &g)?;
        report
            .rows
            .push(row(spec.to_string(), None, m, None, params, describe(&g)));
    }

    if !plan.variants.is_empty() {
        let train_records = match &plan.train {
            Some(p) => read_fasta(p)?,
            None => records.clone(),
        };
        let data = Dataset {
            train: train_records,
            val: Vec::new(),
        };
        for (grid, v) in &plan.variants {
            let g = v.grouping(plan.group_len, plan.context, longest);
            let config = v.model_config(plan.dims, plan.dropout, &g, plan.train_cfg.seed);
            let t = Instant::now();
            let cfg = TrainConfig {
                group_len: g.group_len,
                ..plan.train_cfg.clone()
            };
            let model = train(&data, GeneFormer::new(config)?, &cfg)?.model;
            let train_secs = t.elapsed().as_secs_f64();
            let params = model.param_count();
            let model = AnyModel::GeneFormer(Arc::new(model));
            let m = measure(plan, &scratch, &model, &g)?;
            let grid = (!grid.is_empty()).then(|| grid.clone());
            report
                .rows
                .push(row(v.label(), grid, m, Some(train_secs), Some(params), describe(&g)));
        }
    }

    if plan.external {
        let bases = base_count(&records);
        for tool in &EXTERNAL {
            match run_external(tool, &plan.input, &scratch) {
                Ok(Some((bytes, encode, decode))) => report.rows.push(row(
                    tool.name.to_string(),
                    None,
                    (bytes, bases, encode, decode),
                    None,
                    None,
                    format!("{} on the FASTA text", tool.level),
                )),
                Ok(None) => report.notes.push(format!("{} not found; row skipped", tool.name)),
                Err(e) => report.notes.push(format!("{}: {e}; row skipped", tool.name)),
            }
        }
    }
    Ok(report)
}

struct External {
    name: &'static str,
    level: &'static str,
}

const EXTERNAL: [External; 4] = [
    External {
        name: "gzip",
        level: "-9",
    },
    External {
        name: "bzip2",
        level: "-9",
    },
    External {
        name: "xz",
        level: "-9",
    },
    External {
        name: "zstd",
        level: "-19",
    },
];

/// `None` when the tool is not installed.
fn run_external(tool: &External, input: &Path, scratch: &Scratch) -> CliResult<Option<(u64, f64, f64)>> {
    let fail = |what: String| CliError::new(Failure::Internal, what);
    let t = Instant::now();
    let packed = match Command::new(tool.name)
        .args([tool.level, "-c", "-q"])
        .arg(input)
        .stderr(Stdio::null())
        .output()
    {
        Ok(o) if o.status.success() => o.stdout,
        Ok(o) => return Err(fail(format!("exited with {}", o.status))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(fail(e.to_string())),
    };
    let archive = scratch.path(&format!("external.{}", tool.name));
    write_file(&archive, &packed)?;
    let encode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let out = Command::new(tool.name)
        .args(["-d", "-c", "-q"])
        .arg(&archive)
        .stderr(Stdio::null())
        .output()
        .map_err(|e| fail(e.to_string()))?;
    let decode = t.elapsed().as_secs_f64();
    let original = read_file(input)?;
    if !out.status.success() || out.stdout != original || parse_fasta(&out.stdout).is_err() {
        return Err(fail("round trip differs".into()));
    }
    Ok(Some((packed.len() as u64, encode, decode)))
}
