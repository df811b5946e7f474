//! Sliding-window training of [`GeneFormer`] with RMSProp.
//!
//! Every token position past the first full context is one example. The
//! latent array an example sees is rebuilt from the windows just before it
//! (at least as many as the model keeps in memory, from zero memory), with
//! no gradient.
//! At a stream start this is exactly what the codec feeds the model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{code_length, CodecError, CodecOptions, NMode};
use crate::geneformer::{GeneFormer, GeneFormerSession, ModelConfig};
use crate::grouping::{scan_n_runs, token_of, GroupingConfig};
use crate::model::{EntropyModel, ModelError};
use crate::numerics::{GradStore, Graph, Mode, NumericsError, RmsProp, Tensor};
use crate::sequence_io::{Base, FastaRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("no training examples (every sequence shorter than context + one token)")]
    NoExamples,
    #[error("non-finite value in epoch {epoch} step {step}: {detail}")]
    NonFinite { epoch: usize, step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs between validation passes; the last epoch is always scored.
    pub eval_every: usize,
    /// Examples drawn per epoch after shuffling; `None` uses all.
    pub max_examples: Option<usize>,
    /// Windows replayed to build each example's latent array; raised to
    /// the model's `memory_segments` when smaller.
    pub memory_warmup: usize,
    /// Group length used when scoring validation data.
    pub group_len: usize,
    /// Threads for validation scoring; 0 uses all cores.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 0.001,
            epochs: 100,
            seed: 0,
            eval_every: 1,
            max_examples: None,
            memory_warmup: 1,
            group_len: 213_000,
            workers: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for two concatenated datasets.
    pub fn hybrid() -> Self {
        TrainConfig {
            lr: 0.002,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::BadConfig(format!("learning rate {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training position: predict the token at `pos` of stream `stream`
/// from the `context_len` bases before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub stream: u32,
    pub pos: u32,
}

/// N-free training streams and every example position in them.
#[derive(Debug, Clone)]
pub struct Examples {
    streams: Vec<Vec<Base>>,
    items: Vec<Example>,
    context_len: usize,
    ngram: usize,
    skipped: usize,
}

/// Builds examples for `config`. N bases are dropped the same way the
/// side-channel codec drops them; sequences too short for a single
/// example are skipped with a warning.
pub fn make_examples(records: &[FastaRecord], config: &ModelConfig) -> Examples {
    let (context_len, ngram) = (config.context_len, config.ngram);
    let mut streams = Vec::new();
    let mut items = Vec::new();
    let mut skipped = 0;
    for rec in records {
        let (pure, _) = scan_n_runs(&rec.seq.bases);
        if pure.len() < context_len + ngram {
            log::warn!(
                "sequence {:?} too short for training ({} bases)",
                rec.header,
                pure.len()
            );
            skipped += 1;
            continue;
        }
        let s = streams.len() as u32;
        let mut pos = context_len;
        while pos + ngram <= pure.len() {
            items.push(Example {
                stream: s,
                pos: pos as u32,
            });
            pos += ngram;
        }
        streams.push(pure);
    }
    Examples {
        streams,
        items,
        context_len,
        ngram,
        skipped,
    }
}

impl Examples {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sequences rejected as too short.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn items(&self) -> &[Example] {
        &self.items
    }

    pub fn context(&self, e: &Example) -> &[Base] {
        let p = e.pos as usize;
        &self.streams[e.stream as usize][p - self.context_len..p]
    }

    pub fn target(&self, e: &Example) -> usize {
        let p = e.pos as usize;
        token_of(&self.streams[e.stream as usize][p..p + self.ngram]) as usize
    }

    /// The window `back` tokens before `e`, if it lies inside the stream.
    fn earlier_window(&self, e: &Example, back: usize) -> Option<&[Base]> {
        let p = (e.pos as usize).checked_sub(back * self.ngram)?;
        (p >= self.context_len).then(|| &self.streams[e.stream as usize][p - self.context_len..p])
    }

    /// All examples in the order used for `epoch` under `seed`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<Example> {
        let mut order = self.items.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }
}

/// A batch drawn from one example set.
pub struct Batch<'a> {
    pub examples: &'a Examples,
    pub items: &'a [Example],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    /// Examples in the concatenated batch.
    pub examples: usize,
}

/// Optimizer state around a model.
pub struct Trainer {
    model: GeneFormer,
    opt: RmsProp,
    grads: GradStore,
    seed: u64,
    warmup: usize,
    step: u64,
}

impl Trainer {
    pub fn new(model: GeneFormer, cfg: &TrainConfig) -> Self {
        let warmup = cfg.memory_warmup.max(model.config().memory_segments);
        let opt = RmsProp::new(model.params(), cfg.lr);
        let grads = GradStore::zeros_like(model.params());
        Trainer {
            model,
            opt,
            grads,
            seed: cfg.seed,
            warmup,
            step: 0,
        }
    }

    pub fn model(&self) -> &GeneFormer {
        &self.model
    }

    pub fn into_model(self) -> GeneFormer {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Latent arrays for each example, replayed from the preceding windows.
    fn memories(&self, parts: &[Batch<'_>]) -> Result<Option<Tensor>, ModelError> {
        let c = self.model.config();
        let (m, d) = (c.memory_len(), c.d_model);
        if m == 0 {
            return Ok(None);
        }
        let grouping = c.grouping(usize::MAX);
        let flat: Vec<(&Examples, &Example)> = parts
            .iter()
            .flat_map(|b| b.items.iter().map(move |e| (b.examples, e)))
            .collect();
        let mut sessions: Vec<GeneFormerSession> = flat
            .iter()
            .map(|_| self.model.new_session(&grouping))
            .collect::<Result<_, _>>()?;
        for back in (1..=self.warmup).rev() {
            let mut live: Vec<&mut GeneFormerSession> = Vec::new();
            let mut windows: Vec<&[Base]> = Vec::new();
            for ((ex, e), s) in flat.iter().zip(sessions.iter_mut()) {
                if let Some(w) = ex.earlier_window(e, back) {
                    live.push(s);
                    windows.push(w);
                }
            }
            if !live.is_empty() {
                self.model.predict_windows(&mut live, &windows)?;
            }
        }
        let mut data = Vec::with_capacity(flat.len() * m * d);
        for s in &sessions {
            data.extend_from_slice(s.latent().h.data());
        }
        Ok(Some(Tensor::new(&[flat.len() * m, d], data).map_err(ModelError::from)?))
    }

    /// One optimizer step on the concatenation of `parts`.
    pub fn step(&mut self, parts: &[Batch<'_>]) -> Result<StepStats, ModelError> {
        let memory = self.memories(parts)?;
        let windows: Vec<&[Base]> = parts
            .iter()
            .flat_map(|b| b.items.iter().map(move |e| b.examples.context(e)))
            .collect();
        let targets: Vec<usize> = parts
            .iter()
            .flat_map(|b| b.items.iter().map(move |e| b.examples.target(e)))
            .collect();
        self.grads.zero_grad();
        let (loss, stats) = {
            let mut g = Graph::new(self.model.params(), Mode::Train).with_rng(self.seed, self.step);
            let out = self.model.forward(&mut g, &windows, memory.as_ref(), None)?;
            let (loss, _) = g.cross_entropy(out.logits, &targets)?;
            g.backward(loss, &mut self.grads)?;
            (g.value(loss).item(), out.bn_stats)
        };
        if !loss.is_finite() {
            return Err(NumericsError::NonFinite("loss").into());
        }
        self.opt.step(self.model.params_mut(), &self.grads)?;
        if self.opt.lr > 0.0 {
            if let Some(s) = stats {
                self.model.update_batch_norm(&s);
            }
        }
        self.step += 1;
        Ok(StepStats {
            loss,
            examples: windows.len(),
        })
    }
}

/// Training and validation records for one dataset.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<FastaRecord>,
    pub val: Vec<FastaRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy (nats per token).
    pub loss: f64,
    /// Validation bpb over all validation sets, if scored this epoch.
    pub val_bpb: Option<f64>,
    /// Per-dataset validation bpb in hybrid runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_bpb_sets: Vec<f64>,
}

/// Line-delimited JSON, one record per epoch.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best-scoring epoch, rounded to checkpoint precision.
    pub model: GeneFormer,
    pub best_epoch: usize,
    pub best_val_bpb: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Model bits per base on `records`, scored exactly as the side-channel
/// codec would code them; fragments count two bits per base.
pub fn evaluate_bpb<M: EntropyModel>(
    model: &M,
    records: &[FastaRecord],
    grouping: &GroupingConfig,
    workers: usize,
) -> Result<f64, CodecError> {
    let opts = CodecOptions {
        n_mode: NMode::SideChannel,
        workers,
        ..CodecOptions::default()
    };
    Ok(code_length(records, model, grouping, &opts)?.bpb())
}

pub fn train(dataset: &Dataset, model: GeneFormer, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(&[dataset], model, cfg, &mut |_| {})
}

/// Concatenates `batch_size` examples from each dataset per step.
pub fn hybrid_train(
    a: &Dataset,
    b: &Dataset,
    model: GeneFormer,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(&[a, b], model, cfg, &mut |_| {})
}

/// Trains on one or more datasets, calling `on_epoch` after every epoch.
/// Each step takes `batch_size` examples from every dataset; an epoch ends
/// when the largest dataset is exhausted, and smaller ones wrap around.
pub fn train_with(
    datasets: &[&Dataset],
    model: GeneFormer,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let config = model.config().clone();
    let sets: Vec<Examples> = datasets.iter().map(|d| make_examples(&d.train, &config)).collect();
    if sets.iter().any(Examples::is_empty) {
        return Err(TrainError::NoExamples);
    }
    let grouping = config.grouping(cfg.group_len);
    let mut trainer = Trainer::new(model, cfg);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, GeneFormer)> = None;

    for epoch in 1..=cfg.epochs {
        let orders: Vec<Vec<Example>> = sets
            .iter()
            .map(|s| {
                let mut o = s.epoch_order(cfg.seed, epoch);
                if let Some(cap) = cfg.max_examples {
                    o.truncate(cap.max(1));
                }
                o
            })
            .collect();
        let steps = orders
            .iter()
            .map(|o| o.len().div_ceil(cfg.batch_size))
            .max()
            .unwrap_or(0);
        let mut loss_sum = 0.0;
        for k in 0..steps {
            let chunks: Vec<Vec<Example>> = orders
                .iter()
                .map(|o| {
                    let start = k * cfg.batch_size;
                    if datasets.len() == 1 {
                        // A single dataset ends on a short batch instead of wrapping.
                        o[start..(start + cfg.batch_size).min(o.len())].to_vec()
                    } else {
                        (0..cfg.batch_size).map(|j| o[(start + j) % o.len()]).collect()
                    }
                })
                .collect();
            let parts: Vec<Batch<'_>> = sets
                .iter()
                .zip(&chunks)
                .map(|(examples, items)| Batch { examples, items })
                .collect();
            let stats = trainer.step(&parts).map_err(|e| match e {
                ModelError::Numerics(NumericsError::NonFinite(what)) => TrainError::NonFinite {
                    epoch,
                    step: trainer.steps(),
                    detail: what.to_string(),
                },
                other => TrainError::Model(other),
            })?;
            loss_sum += stats.loss;
        }
        let loss = loss_sum / steps.max(1) as f64;

        let scored = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let mut snapshot = trainer.model().clone();
        snapshot.snap_to_f32();
        let (val_bpb, val_bpb_sets) = if scored {
            score(&snapshot, datasets, &grouping, cfg.workers)?
        } else {
            (None, Vec::new())
        };
        let record = EpochRecord {
            epoch,
            loss,
            val_bpb,
            val_bpb_sets,
        };
        log::info!("epoch {epoch}: loss {loss:.5} val bpb {val_bpb:?}");
        on_epoch(&record);
        history.push(record);

        if scored {
            // Without validation data the training loss decides.
            let key = val_bpb.unwrap_or(loss);
            if best.as_ref().is_none_or(|(b, _, _)| key < *b) {
                best = Some((key, epoch, snapshot));
            }
        }
    }

    let (best_val_bpb, best_epoch, model) = match best {
        Some((key, epoch, m)) => (history[epoch - 1].val_bpb.map(|_| key), epoch, m),
        None => {
            let mut m = trainer.into_model();
            m.snap_to_f32();
            (None, 0, m)
        }
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_bpb,
        history,
    })
}

fn score(
    model: &GeneFormer,
    datasets: &[&Dataset],
    grouping: &GroupingConfig,
    workers: usize,
) -> Result<(Option<f64>, Vec<f64>), TrainError> {
    let opts = CodecOptions {
        n_mode: NMode::SideChannel,
        workers,
        ..CodecOptions::default()
    };
    let mut per_set = Vec::new();
    let (mut bits, mut bases) = (0.0, 0u64);
    for d in datasets {
        if d.val.is_empty() {
            continue;
        }
        let cl = code_length(&d.val, model, grouping, &opts)?;
        per_set.push(cl.bpb());
        bits += cl.body_bits + cl.fragment_bits;
        bases += cl.bases;
    }
    if per_set.is_empty() || bases == 0 {
        return Ok((None, Vec::new()));
    }
    if datasets.len() == 1 {
        per_set.clear();
    }
    Ok((Some(bits / bases as f64), per_set))
}
