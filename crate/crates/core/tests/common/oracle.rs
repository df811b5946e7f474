//! Straight-loop reference for the GeneFormer forward pass. Reads the
//! weights by name and shares no code with the tensor engine.

use gnf::geneformer::GeneFormer;
use gnf::sequence_io::Base;

type Mat = Vec<Vec<f64>>;

const EPS: f64 = 1e-5;

pub struct Weights<'a> {
    model: &'a GeneFormer,
}

impl<'a> Weights<'a> {
    pub fn new(model: &'a GeneFormer) -> Self {
        Weights { model }
    }

    fn w(&self, name: &str) -> &'a [f64] {
        let p = self.model.params();
        p.get(p.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
            .data()
    }
}

pub fn pe(i: f64, d: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let mut j = 0;
    while 2 * j < d {
        let theta = i / base.powf((2 * j) as f64 / d as f64);
        out[2 * j] = theta.sin();
        if 2 * j + 1 < d {
            out[2 * j + 1] = theta.cos();
        }
        j += 1;
    }
    out
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (0..x.len())
        .map(|k| (x[k] - mean) / (var + EPS).sqrt() * g[k] + b[k])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// `x W` for row-major `W: [x.len(), out]`.
fn affine(x: &[f64], w: &[f64], bias: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (c, yc) in y.iter_mut().enumerate() {
        let mut s = 0.0;
        for (k, xk) in x.iter().enumerate() {
            s += xk * w[k * out + c];
        }
        *yc = s + bias.map_or(0.0, |b| b[c]);
    }
    y
}

/// Content plus relative-position score of query `i` against key `j` for
/// one head, before scaling and masking.
pub fn raw_score(model: &GeneFormer, x: &Mat, mem: &Mat, head: usize, i: usize, j: usize) -> f64 {
    let c = model.config();
    let wt = Weights::new(model);
    let (d, dk, qk) = (c.d_model, c.d_head, c.n_heads * c.d_head);
    let (wq, wk, u, v) = (wt.w("attn.wq"), wt.w("attn.wk"), wt.w("attn.u"), wt.w("attn.v"));
    let m = mem.len();
    let key_row = if j < m { &mem[j] } else { &x[j - m] };
    let dist = (m + i) as f64 - j as f64;
    let g = pe(dist, d, c.pos_base);
    let mut s = 0.0;
    for cc in 0..dk {
        let col = head * dk + cc;
        let mut q = 0.0;
        let mut k = 0.0;
        let mut r = 0.0;
        for t in 0..d {
            q += x[i][t] * wq[t * qk + col];
            k += key_row[t] * wk[t * qk + col];
            r += g[t] * wk[t * qk + col];
        }
        s += (q + u[col]) * k + (q + v[col]) * r;
    }
    s
}

/// `LN1(X + Attn([mem; X]))` with a strict causal mask.
pub fn attention_block(model: &GeneFormer, x: &Mat, mem: &Mat) -> Mat {
    let c = model.config();
    let wt = Weights::new(model);
    let (d, heads, dk) = (c.d_model, c.n_heads, c.d_head);
    let dv = d / heads;
    let (n, m) = (x.len(), mem.len());
    let (wv, wo) = (wt.w("attn.wv"), wt.w("attn.wo"));
    let all: Mat = mem.iter().chain(x.iter()).cloned().collect();
    let values: Mat = all.iter().map(|r| affine(r, wv, None, d)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            let visible = m + i + 1;
            let scores: Vec<f64> = (0..visible)
                .map(|j| raw_score(model, x, mem, h, i, j) / (dk as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let a = (s - max).exp() / z;
                for cc in 0..dv {
                    concat[h * dv + cc] += a * values[j][h * dv + cc];
                }
            }
        }
        let proj = affine(&concat, wo, None, d);
        let res: Vec<f64> = (0..d).map(|k| x[i][k] + proj[k]).collect();
        out.push(layer_norm(&res, wt.w("ln1.gamma"), wt.w("ln1.beta")));
    }
    out
}

pub fn encoder(model: &GeneFormer, x: &Mat, mem: &Mat) -> Mat {
    let c = model.config();
    let wt = Weights::new(model);
    let (d, ff) = (c.d_model, c.d_ff);
    attention_block(model, x, mem)
        .into_iter()
        .map(|h| {
            let z = layer_norm(&h, wt.w("ln2.gamma"), wt.w("ln2.beta"));
            let f1 = affine(&z, wt.w("ff1.weight"), Some(wt.w("ff1.bias")), ff);
            let f2 = affine(&f1, wt.w("ff2.weight"), Some(wt.w("ff2.bias")), d);
            (0..d).map(|k| h[k] + gelu(f2[k])).collect()
        })
        .collect()
}

/// Segment features `[N, d]` for one window.
pub fn features(model: &GeneFormer, context: &[Base]) -> Mat {
    let c = model.config();
    let wt = Weights::new(model);
    let (d, e, g) = (c.d_model, c.embed_width(), c.byte_group);
    let table = wt.w("embed.table");
    let tokens: Vec<usize> = context
        .chunks(c.ngram)
        .map(|ch| ch.iter().fold(0, |acc, b| acc * 4 + b.code() as usize))
        .collect();
    let positions = tokens.len() / g;
    // input[channel][position]
    let mut input = vec![vec![0.0; positions]; d];
    for p in 0..positions {
        for s in 0..g {
            let tok = tokens[p * g + s];
            for k in 0..e {
                input[s * e + k][p] = table[tok * e + k];
            }
        }
    }
    let kw = c.conv_kernel;
    let (cw, cb) = (wt.w("conv.weight"), wt.w("conv.bias"));
    let lc = positions - kw + 1;
    let mut conv = vec![vec![0.0; lc]; d];
    for o in 0..d {
        for l in 0..lc {
            let mut s = cb[o];
            for ci in 0..d {
                for k in 0..kw {
                    s += cw[(o * d + ci) * kw + k] * input[ci][l + k];
                }
            }
            conv[o][l] = s.max(0.0);
        }
    }
    let n = (lc - c.pool_kernel) / c.pool_stride + 1;
    let (gm, bt, rm, rv) = (
        wt.w("bn.gamma"),
        wt.w("bn.beta"),
        wt.w("bn.running_mean"),
        wt.w("bn.running_var"),
    );
    let mut x = vec![vec![0.0; d]; n];
    for ch in 0..d {
        for (t, row) in x.iter_mut().enumerate() {
            let start = t * c.pool_stride;
            let mx = conv[ch][start..start + c.pool_kernel]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            row[ch] = (mx - rm[ch]) / (rv[ch] + EPS).sqrt() * gm[ch] + bt[ch];
        }
    }
    x
}

/// Next-token distribution and the rows one window carries forward.
pub fn predict_next(model: &GeneFormer, context: &[Base], mem: &Mat) -> (Vec<f64>, Mat) {
    let c = model.config();
    let wt = Weights::new(model);
    let x = features(model, context);
    let h = encoder(model, &x, mem);
    let flat: Vec<f64> = h.iter().flatten().cloned().collect();
    let logits = affine(&flat, wt.w("head.weight"), Some(wt.w("head.bias")), c.vocab());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let carry = if c.latent_array { h } else { x };
    (logits.iter().map(|l| (l - max).exp() / z).collect(), carry)
}

/// Memory that follows `mem` once a window carried out `h`.
pub fn next_memory(model: &GeneFormer, mem: &Mat, h: &Mat) -> Mat {
    let m = model.config().memory_len();
    if m == 0 {
        return Vec::new();
    }
    let mut all: Mat = mem.iter().chain(h.iter()).cloned().collect();
    all.drain(..all.len() - m);
    all
}
