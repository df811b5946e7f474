//! GeneFormer: a convolutional feature generator, one transformer encoder
//! layer with relative positions and a carried latent array, and a linear
//! head over the flattened encoder output.
//!
//! Layout of one window (defaults in brackets):
//!
//! ```text
//! bases [64] -> tokens [64/n] -> embedding [T, d/g] -> reshape [T/g, d]
//!   -> conv1d [d x 41] -> relu -> maxpool [d x 13] -> batchnorm -> dropout
//!   -> relative attention over [H_prev; X] -> layernorm -> dropout
//!   -> layernorm -> linear [3072] -> linear [768] -> dropout -> gelu -> dropout
//!   -> flatten [13 * 768] -> linear [4^n] -> softmax
//! ```
//!
//! The encoder output of each window becomes the memory of the next one.
//! Memory is a constant for the window that reads it: no gradient flows
//! into it.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use config::{default_feature_shape, EmbedMode, ModelConfig};

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grouping::{ngram_tokenize, GroupingConfig};
use crate::model::{EntropyModel, ModelError, ModelKind};
use crate::numerics::{BatchStats, Graph, Mode, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::sequence_io::Base;

const INIT_STD: f64 = 0.02;
const MASKED: f64 = -1e30;
pub const BN_MOMENTUM: f64 = 0.9;

/// Dropout sites, used to key independent masks.
const DROP_FEATURES: u64 = 0;
const DROP_ATTN: u64 = 1;
const DROP_FF_LINEAR: u64 = 2;
const DROP_FF_ACT: u64 = 3;

/// `g(i)` with even dimensions `sin(i / base^(2j/d))` and odd ones the
/// matching cosine.
pub fn sinusoidal_pe(i: f64, d: usize, base: f64) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let j = (k / 2) as f64;
            let angle = i / base.powf(2.0 * j / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Exact number of learnable scalars for `config`.
pub fn count_params(c: &ModelConfig) -> usize {
    param_breakdown(c).iter().map(|(_, n)| n).sum()
}

/// Learnable scalars per component.
pub fn param_breakdown(c: &ModelConfig) -> Vec<(&'static str, usize)> {
    let d = c.d_model;
    let qk = c.n_heads * c.d_head;
    let embed = match c.embed_mode {
        EmbedMode::Learned => c.vocab() * c.embed_width(),
        EmbedMode::OneHot => 0,
    };
    let conv = d * d * c.conv_kernel + d;
    let bn = 2 * d;
    let attn = 2 * d * qk + 2 * d * d + 2 * qk;
    let norms = 4 * d;
    let ff = d * c.d_ff + c.d_ff + c.d_ff * d + d;
    let head = c.segment_len() * d * c.vocab() + c.vocab();
    vec![
        ("embedding", embed),
        ("conv", conv),
        ("batch_norm", bn),
        ("attention", attn),
        ("layer_norms", norms),
        ("feed_forward", ff),
        ("head", head),
    ]
}

/// One row of a layer shape trace, in channels-by-length orientation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub layer: &'static str,
    pub rows: usize,
    pub cols: usize,
}

fn record(trace: &mut Option<&mut Vec<ShapeRow>>, layer: &'static str, rows: usize, cols: usize) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(ShapeRow { layer, rows, cols });
    }
}

/// Handles produced by [`GeneFormer::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, vocab]`
    pub logits: Var,
    /// Encoder output `[B * N, d]`.
    pub hidden: Var,
    /// Rows carried into the next window's memory `[B * N, d]`: the
    /// encoder output, or its input without a latent array.
    pub carry: Var,
    /// Batch statistics when run in training mode.
    pub bn_stats: Option<BatchStats>,
}

/// Encoder output carried between windows.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentArray {
    /// `[M, d]`
    pub h: Tensor,
    /// Windows consumed so far.
    pub segment: u64,
}

impl LatentArray {
    pub fn zeros(config: &ModelConfig) -> Self {
        LatentArray {
            h: Tensor::zeros(&[config.memory_len(), config.d_model]),
            segment: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneFormerSession {
    latent: LatentArray,
}

impl GeneFormerSession {
    pub fn latent(&self) -> &LatentArray {
        &self.latent
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    embed: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    u: ParamId,
    v: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct GeneFormer {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
    fingerprint: OnceLock<[u8; 32]>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        })
        .collect()
}

impl GeneFormer {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Incompatible)?;
        let c = &config;
        let (d, v, e) = (c.d_model, c.vocab(), c.embed_width());
        let qk = c.n_heads * c.d_head;
        let mut rng = ChaCha8Rng::seed_from_u64(c.init_seed);
        let mut p = ParamStore::new();
        let tn = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            Tensor::new(shape, trunc_normal(rng, shape.iter().product())).expect("shape")
        };

        let embed = match c.embed_mode {
            EmbedMode::Learned => {
                let normal = Normal::new(0.0, 1.0).expect("valid std");
                let t = Tensor::from_fn(&[v, e], |_| normal.sample(&mut rng));
                p.add("embed.table", t, true)
            }
            EmbedMode::OneHot => {
                let t = Tensor::from_fn(&[v, e], |k| if k / e == k % e { 1.0 } else { 0.0 });
                p.add("embed.table", t, false)
            }
        };
        let bound = 1.0 / ((d * c.conv_kernel) as f64).sqrt();
        let conv_w = p.add(
            "conv.weight",
            Tensor::from_fn(&[d, d, c.conv_kernel], |_| rng.gen_range(-bound..bound)),
            true,
        );
        let conv_b = p.add("conv.bias", Tensor::zeros(&[d]), true);
        let bn_gamma = p.add("bn.gamma", Tensor::full(&[d], 1.0), true);
        let bn_beta = p.add("bn.beta", Tensor::zeros(&[d]), true);
        let bn_mean = p.add("bn.running_mean", Tensor::zeros(&[d]), false);
        let bn_var = p.add("bn.running_var", Tensor::full(&[d], 1.0), false);
        let wq = p.add("attn.wq", tn(&mut rng, &[d, qk]), true);
        let wk = p.add("attn.wk", tn(&mut rng, &[d, qk]), true);
        let wv = p.add("attn.wv", tn(&mut rng, &[d, d]), true);
        let wo = p.add("attn.wo", tn(&mut rng, &[d, d]), true);
        let u = p.add("attn.u", Tensor::zeros(&[qk]), true);
        let vb = p.add("attn.v", Tensor::zeros(&[qk]), true);
        let ln1_g = p.add("ln1.gamma", Tensor::full(&[d], 1.0), true);
        let ln1_b = p.add("ln1.beta", Tensor::zeros(&[d]), true);
        let ln2_g = p.add("ln2.gamma", Tensor::full(&[d], 1.0), true);
        let ln2_b = p.add("ln2.beta", Tensor::zeros(&[d]), true);
        let ff1_w = p.add("ff1.weight", tn(&mut rng, &[d, c.d_ff]), true);
        let ff1_b = p.add("ff1.bias", Tensor::zeros(&[c.d_ff]), true);
        let ff2_w = p.add("ff2.weight", tn(&mut rng, &[c.d_ff, d]), true);
        let ff2_b = p.add("ff2.bias", Tensor::zeros(&[d]), true);
        let head_w = p.add("head.weight", Tensor::zeros(&[c.segment_len() * d, v]), true);
        let head_b = p.add("head.bias", Tensor::zeros(&[v]), true);

        let mut model = GeneFormer {
            ids: Ids {
                embed,
                conv_w,
                conv_b,
                bn_gamma,
                bn_beta,
                bn_mean,
                bn_var,
                wq,
                wk,
                wv,
                wo,
                u,
                v: vb,
                ln1_g,
                ln1_b,
                ln2_g,
                ln2_b,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                head_w,
                head_b,
            },
            config,
            params: p,
            fingerprint: OnceLock::new(),
        };
        model.snap_to_f32();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameters. Drops the cached fingerprint.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.fingerprint = OnceLock::new();
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_scalars()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint
    /// precision, so that saving and loading is lossless.
    pub fn snap_to_f32(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            for x in self.params_mut().get_mut(id).data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Folds training-batch statistics into the running averages.
    pub fn update_batch_norm(&mut self, stats: &BatchStats) {
        let (mean_id, var_id) = (self.ids.bn_mean, self.ids.bn_var);
        let p = self.params_mut();
        for (r, s) in p.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * s;
        }
        for (r, s) in p.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * s;
        }
    }

    fn tokenize(&self, windows: &[&[Base]]) -> Result<Vec<usize>, ModelError> {
        let c = &self.config;
        let mut ids = Vec::with_capacity(windows.len() * c.tokens());
        for w in windows {
            if w.len() != c.context_len {
                return Err(ModelError::BadContextLength {
                    got: w.len(),
                    expected: c.context_len,
                });
            }
            ids.extend(ngram_tokenize(w, c.ngram)?.tokens.iter().map(|&t| t as usize));
        }
        Ok(ids)
    }

    /// Records a batch of windows on `g`. `memory` is `[B * M, d]`; `None`
    /// means all-zero memory.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        windows: &[&[Base]],
        memory: Option<&Tensor>,
        trace: Option<&mut Vec<ShapeRow>>,
    ) -> Result<Forward, ModelError> {
        let mem = memory.map(|t| g.constant(t.clone()));
        self.forward_with(g, windows, mem, trace)
    }

    /// [`GeneFormer::forward`] with memory already on the graph. The
    /// memory is used as given; callers detach it.
    pub fn forward_with(
        &self,
        g: &mut Graph<'_>,
        windows: &[&[Base]],
        memory: Option<Var>,
        mut trace: Option<&mut Vec<ShapeRow>>,
    ) -> Result<Forward, ModelError> {
        let c = &self.config;
        let ids = &self.ids;
        let b = windows.len();
        if b == 0 {
            return Err(ModelError::Incompatible("empty batch".into()));
        }
        let (d, n, m) = (c.d_model, c.segment_len(), c.memory_len());
        let tokens = self.tokenize(windows)?;

        let table = g.param(ids.embed);
        let emb = g.embedding(table, &tokens)?;
        let grouped = g.reshape(emb, &[b, c.positions(), d])?;
        let chans = g.transpose_last2(grouped)?;
        let (w, bias) = (g.param(ids.conv_w), g.param(ids.conv_b));
        let conv = g.conv1d(chans, w, bias, 1)?;
        record(&mut trace, "1DConv", d, c.conv_out_len());
        let act = g.relu(conv)?;
        record(&mut trace, "Relu", d, c.conv_out_len());
        let pooled = g.maxpool1d(act, c.pool_kernel, c.pool_stride)?;
        record(&mut trace, "1DMaxPooling", d, n);
        let (gamma, beta) = (g.param(ids.bn_gamma), g.param(ids.bn_beta));
        let (normed, bn_stats) = match g.mode() {
            Mode::Train => {
                let (v, s) = g.batch_norm_train(pooled, gamma, beta)?;
                (v, Some(s))
            }
            Mode::Eval => {
                let v = g.batch_norm_eval(
                    pooled,
                    gamma,
                    beta,
                    self.params.get(ids.bn_mean).data(),
                    self.params.get(ids.bn_var).data(),
                )?;
                (v, None)
            }
        };
        record(&mut trace, "BatchNormalization", d, n);
        let dropped = g.dropout(normed, c.dropout, DROP_FEATURES)?;
        record(&mut trace, "Dropout", d, n);
        let x = g.transpose_last2(dropped)?;
        let x = g.reshape(x, &[b * n, d])?;

        let mem = match memory {
            Some(mv) if m > 0 => {
                if g.shape(mv) != [b * m, d] {
                    return Err(NumericsError::ShapeMismatch(format!(
                        "memory {:?}, expected [{}, {d}]",
                        g.shape(mv),
                        b * m
                    ))
                    .into());
                }
                Some(mv)
            }
            None if m > 0 => Some(g.constant(Tensor::zeros(&[b * m, d]))),
            _ => None,
        };
        let hidden = self.encoder(g, x, mem, b, n, m, &mut trace)?;
        let carry = if c.latent_array { hidden } else { x };

        let flat = g.reshape(hidden, &[b, n * d])?;
        let (hw, hb) = (g.param(ids.head_w), g.param(ids.head_b));
        let logits = g.matmul(flat, hw)?;
        let logits = g.add_bias(logits, hb)?;
        record(&mut trace, "Linear", 1, c.vocab());
        Ok(Forward {
            logits,
            hidden,
            carry,
            bn_stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mem: Option<Var>,
        b: usize,
        n: usize,
        m: usize,
        trace: &mut Option<&mut Vec<ShapeRow>>,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let ids = &self.ids;
        let d = c.d_model;
        let h = self.attention_block(g, x, mem, b, n, m)?;
        record(trace, "RelativeAttention", d, n);
        record(trace, "LayerNorm", d, n);
        let h = g.dropout(h, c.dropout, DROP_ATTN)?;
        record(trace, "Dropout", d, n);
        let (g2, b2) = (g.param(ids.ln2_g), g.param(ids.ln2_b));
        let z = g.layer_norm(h, g2, b2)?;
        record(trace, "LayerNorm", d, n);
        let (w1, b1) = (g.param(ids.ff1_w), g.param(ids.ff1_b));
        let f = g.matmul(z, w1)?;
        let f = g.add_bias(f, b1)?;
        record(trace, "Linear", c.d_ff, n);
        let (w2, bb2) = (g.param(ids.ff2_w), g.param(ids.ff2_b));
        let f = g.matmul(f, w2)?;
        let f = g.add_bias(f, bb2)?;
        record(trace, "Linear", d, n);
        let f = g.dropout(f, c.dropout, DROP_FF_LINEAR)?;
        record(trace, "Dropout", d, n);
        let f = g.gelu(f)?;
        record(trace, "GELUActivation", d, n);
        let f = g.dropout(f, c.dropout, DROP_FF_ACT)?;
        record(trace, "Dropout", d, n);
        Ok(g.add(h, f)?)
    }

    /// `LN1(X + Attn(X, memory))` for a batch of `b` segments of `n` rows
    /// with `m` memory rows each.
    fn attention_block(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mem: Option<Var>,
        b: usize,
        n: usize,
        m: usize,
    ) -> Result<Var, ModelError> {
        let a = self.attention(g, x, mem, b, n, m)?;
        let r = g.add(x, a)?;
        let (g1, b1) = (g.param(self.ids.ln1_g), g.param(self.ids.ln1_b));
        Ok(g.layer_norm(r, g1, b1)?)
    }

    fn positions_table(&self, len: usize) -> Tensor {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(len * d);
        for k in 0..len {
            data.extend(sinusoidal_pe(k as f64, d, self.config.pos_base));
        }
        Tensor::new(&[len, d], data).expect("shape")
    }

    fn causal_mask(n: usize, m: usize) -> Tensor {
        Tensor::from_fn(
            &[n, m + n],
            |k| {
                if k % (m + n) > m + k / (m + n) {
                    MASKED
                } else {
                    0.0
                }
            },
        )
    }

    /// Per-head projections shared by the attention and score paths.
    fn attention(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mem: Option<Var>,
        b: usize,
        n: usize,
        m: usize,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let ids = &self.ids;
        let (heads, dk) = (c.n_heads, c.d_head);
        let dv = c.d_model / heads;
        let (wq, wk, wv, wo) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv), g.param(ids.wo));
        let (u, v) = (g.param(ids.u), g.param(ids.v));
        let q = g.matmul(x, wq)?;
        let qu = g.add_bias(q, u)?;
        let qv = g.add_bias(q, v)?;
        let kx = g.matmul(x, wk)?;
        let vx = g.matmul(x, wv)?;
        let kv_mem = match mem {
            Some(mv) => Some((g.matmul(mv, wk)?, g.matmul(mv, wv)?)),
            None => None,
        };
        let pos = g.constant(self.positions_table(m + n));
        let r = g.matmul(pos, wk)?;
        let mask = g.constant(Self::causal_mask(n, m));
        let r_heads = (0..heads)
            .map(|h| g.slice_cols(r, h * dk, dk))
            .collect::<Result<Vec<_>, _>>()?;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut outs = Vec::with_capacity(b);
        for e in 0..b {
            let qu_e = g.slice_rows(qu, e * n, n)?;
            let qv_e = g.slice_rows(qv, e * n, n)?;
            let kx_e = g.slice_rows(kx, e * n, n)?;
            let vx_e = g.slice_rows(vx, e * n, n)?;
            let (k_e, v_e) = match kv_mem {
                Some((km, vm)) if m > 0 => {
                    let km_e = g.slice_rows(km, e * m, m)?;
                    let vm_e = g.slice_rows(vm, e * m, m)?;
                    (g.concat_rows(km_e, kx_e)?, g.concat_rows(vm_e, vx_e)?)
                }
                _ => (kx_e, vx_e),
            };
            let mut head_out = Vec::with_capacity(heads);
            for (h, &rh) in r_heads.iter().enumerate() {
                let quh = g.slice_cols(qu_e, h * dk, dk)?;
                let qvh = g.slice_cols(qv_e, h * dk, dk)?;
                let kh = g.slice_cols(k_e, h * dk, dk)?;
                let ac = g.matmul_nt(quh, kh)?;
                let bd = g.matmul_nt(qvh, rh)?;
                let bd = g.rel_shift(bd, m)?;
                let s = g.add(ac, bd)?;
                let s = g.scale(s, scale)?;
                let s = g.add(s, mask)?;
                let a = g.softmax(s, 1)?;
                let vh = g.slice_cols(v_e, h * dv, dv)?;
                head_out.push(g.matmul(a, vh)?);
            }
            outs.push(if heads == 1 {
                head_out[0]
            } else {
                g.concat_cols(&head_out)?
            });
        }
        let o = if b == 1 { outs[0] } else { g.stack_rows(&outs)? };
        Ok(g.matmul(o, wo)?)
    }

    fn check_width(&self, t: &Tensor, what: &str) -> Result<(), ModelError> {
        if t.rank() != 2 || t.dim(1) != self.config.d_model {
            return Err(NumericsError::ShapeMismatch(format!(
                "{what} {:?}, expected [_, {}]",
                t.shape(),
                self.config.d_model
            ))
            .into());
        }
        Ok(())
    }

    fn memory_var(g: &mut Graph<'_>, memory: &Tensor) -> Option<Var> {
        (memory.dim(0) > 0).then(|| g.constant(memory.clone()))
    }

    /// Attention sublayer followed by its residual and layer norm, in
    /// inference mode. `x: [N, d]`, `memory: [M, d]` for any `N`, `M`.
    pub fn relative_attention(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor, ModelError> {
        self.check_width(x, "segment")?;
        self.check_width(memory, "memory")?;
        let mut g = Graph::new(&self.params, Mode::Eval);
        let xv = g.constant(x.clone());
        let mv = Self::memory_var(&mut g, memory);
        let out = self.attention_block(&mut g, xv, mv, 1, x.dim(0), memory.dim(0))?;
        Ok(g.value(out).clone())
    }

    /// Full encoder layer in inference mode.
    pub fn encoder_forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor, ModelError> {
        self.check_width(x, "segment")?;
        self.check_width(memory, "memory")?;
        let mut g = Graph::new(&self.params, Mode::Eval);
        let xv = g.constant(x.clone());
        let mv = Self::memory_var(&mut g, memory);
        let out = self.encoder(&mut g, xv, mv, 1, x.dim(0), memory.dim(0), &mut None)?;
        Ok(g.value(out).clone())
    }

    /// Unscaled, unmasked attention scores `[N, M + N]` of one head: the
    /// content term plus the relative-position term. Entries where the
    /// key lies in the query's future are zero in the position term.
    pub fn attention_scores(&self, x: &Tensor, memory: &Tensor, head: usize) -> Result<Tensor, ModelError> {
        self.check_width(x, "segment")?;
        self.check_width(memory, "memory")?;
        let c = &self.config;
        if head >= c.n_heads {
            return Err(ModelError::Incompatible(format!("head {head} of {}", c.n_heads)));
        }
        let (n, m, dk) = (x.dim(0), memory.dim(0), c.d_head);
        let mut g = Graph::new(&self.params, Mode::Eval);
        let xv = g.constant(x.clone());
        let all = if m > 0 {
            let mv = g.constant(memory.clone());
            g.concat_rows(mv, xv)?
        } else {
            xv
        };
        let (wq, wk) = (g.param(self.ids.wq), g.param(self.ids.wk));
        let (u, v) = (g.param(self.ids.u), g.param(self.ids.v));
        let q = g.matmul(xv, wq)?;
        let qu = g.add_bias(q, u)?;
        let qv = g.add_bias(q, v)?;
        let k = g.matmul(all, wk)?;
        let pos = g.constant(self.positions_table(m + n));
        let r = g.matmul(pos, wk)?;
        let (quh, qvh) = (g.slice_cols(qu, head * dk, dk)?, g.slice_cols(qv, head * dk, dk)?);
        let (kh, rh) = (g.slice_cols(k, head * dk, dk)?, g.slice_cols(r, head * dk, dk)?);
        let ac = g.matmul_nt(quh, kh)?;
        let bd = g.matmul_nt(qvh, rh)?;
        let bd = g.rel_shift(bd, m)?;
        let s = g.add(ac, bd)?;
        Ok(g.value(s).clone())
    }

    /// Layer output shapes for one window of the default pipeline.
    pub fn shape_trace(&self) -> Result<Vec<ShapeRow>, ModelError> {
        let window = vec![Base::A; self.config.context_len];
        let mut trace = Vec::new();
        let mut g = Graph::new(&self.params, Mode::Eval);
        self.forward(&mut g, &[&window], None, Some(&mut trace))?;
        Ok(trace)
    }

    /// Next latent array after a window produced `h_t: [N, d]`.
    pub fn advance(&self, prev: &LatentArray, h_t: &[f64]) -> Result<LatentArray, ModelError> {
        let c = &self.config;
        let (d, n, m) = (c.d_model, c.segment_len(), c.memory_len());
        if h_t.len() != n * d || prev.h.shape() != [m, d] {
            return Err(NumericsError::ShapeMismatch(format!(
                "latent update with {} values onto {:?}",
                h_t.len(),
                prev.h.shape()
            ))
            .into());
        }
        let h = if m == 0 {
            prev.h.clone()
        } else {
            let keep = &prev.h.data()[n * d..];
            let mut data = Vec::with_capacity(m * d);
            data.extend_from_slice(keep);
            data.extend_from_slice(h_t);
            Tensor::new(&[m, d], data)?
        };
        debug_assert_eq!(h.shape(), [m, d]);
        Ok(LatentArray {
            h,
            segment: prev.segment + 1,
        })
    }

    /// Next-token distribution for one window and the latent array it
    /// leaves behind.
    pub fn predict_next(&self, context: &[Base], latent: &LatentArray) -> Result<(Vec<f64>, LatentArray), ModelError> {
        let mut session = GeneFormerSession { latent: latent.clone() };
        let probs = self.predict_windows(&mut [&mut session], &[context])?;
        Ok((probs.into_iter().next().unwrap_or_default(), session.latent))
    }

    /// Batched inference; each session's latent array feeds its own window.
    pub fn predict_windows(
        &self,
        sessions: &mut [&mut GeneFormerSession],
        contexts: &[&[Base]],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if sessions.len() != contexts.len() {
            return Err(ModelError::Incompatible(format!(
                "{} sessions for {} contexts",
                sessions.len(),
                contexts.len()
            )));
        }
        if sessions.is_empty() {
            return Ok(Vec::new());
        }
        let c = &self.config;
        let (b, d, n, m) = (sessions.len(), c.d_model, c.segment_len(), c.memory_len());
        let memory = if m > 0 {
            let mut data = Vec::with_capacity(b * m * d);
            for s in sessions.iter() {
                if s.latent.h.shape() != [m, d] {
                    return Err(NumericsError::ShapeMismatch(format!("latent {:?}", s.latent.h.shape())).into());
                }
                data.extend_from_slice(s.latent.h.data());
            }
            Some(Tensor::new(&[b * m, d], data)?)
        } else {
            None
        };
        let mut g = Graph::new(&self.params, Mode::Eval);
        let out = self.forward(&mut g, contexts, memory.as_ref(), None)?;
        let probs = g.softmax(out.logits, 1)?;
        let v = c.vocab();
        let carry = g.value(out.carry).data();
        for (e, s) in sessions.iter_mut().enumerate() {
            s.latent = self.advance(&s.latent, &carry[e * n * d..(e + 1) * n * d])?;
        }
        Ok(g.value(probs).data().chunks_exact(v).map(|r| r.to_vec()).collect())
    }
}

impl EntropyModel for GeneFormer {
    type Session = GeneFormerSession;

    fn kind(&self) -> ModelKind {
        ModelKind::GeneFormer
    }

    fn fingerprint(&self) -> [u8; 32] {
        *self.fingerprint.get_or_init(|| checkpoint::content_hash(self))
    }

    fn new_session(&self, grouping: &GroupingConfig) -> Result<GeneFormerSession, ModelError> {
        if !self.config.matches_grouping(grouping) {
            return Err(ModelError::Incompatible(format!(
                "model expects context {} ngram {} byte_group {}, archive uses {} / {} / {}",
                self.config.context_len,
                self.config.ngram,
                self.config.byte_group,
                grouping.context_len,
                grouping.ngram,
                grouping.byte_group
            )));
        }
        Ok(GeneFormerSession {
            latent: LatentArray::zeros(&self.config),
        })
    }

    fn predict(&self, session: &mut GeneFormerSession, context: &[Base]) -> Result<Vec<f64>, ModelError> {
        let mut probs = self.predict_windows(&mut [session], &[context])?;
        Ok(probs.pop().unwrap_or_default())
    }

    fn predict_batch(
        &self,
        sessions: &mut [&mut GeneFormerSession],
        contexts: &[&[Base]],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.predict_windows(sessions, contexts)
    }
}
