use super::rng::counter_uniform;
use super::tensor::{gemm_nn, gemm_tn, transpose_slice};
use super::{GradStore, Mode, NumericsError, ParamId, ParamStore, Result, Tensor, NORM_EPS};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics from a training-mode batch norm, to be folded
/// into the running averages by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Value<'p> {
    Owned(Tensor),
    Param(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout(Var, Vec<f64>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MaxPool1d(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    Reshape(Var),
    TransposeLast2(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RelShift(Var, usize),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Values are computed eagerly as ops are recorded;
/// [`Graph::backward`] replays the records in exact reverse order.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    mode: Mode,
    seed: u64,
    step: u64,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NumericsError::ShapeMismatch(msg))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            mode,
            seed: 0,
            step: 0,
        }
    }

    /// Keys the counter-based dropout RNG. Masks depend only on
    /// `(seed, layer, step, element)`.
    pub fn with_rng(mut self, seed: u64, step: u64) -> Self {
        self.seed = seed;
        self.step = step;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        // Without a gradient path there is nothing to replay; drop the
        // saved state to keep inference tapes small.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant; it never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that participates in differentiation but is not a
    /// parameter. Its gradient is available from [`Graph::backward_leaves`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.is_trainable(id) && self.mode == Mode::Train;
        self.nodes.push(Node {
            value: Value::Param(self.params.get(id)),
            op: if trainable { Op::Param(id) } else { Op::Leaf },
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose_last2(b)?;
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul {:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [w] {
            return shape_err(format!("add_bias {:?} + {:?}", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(w) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, data)?, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Scale(x, s), &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Relu(x), &[x], "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Gelu(x), &[x], "gelu")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax { x, outer, n, inner },
            &[x],
            "softmax",
        )
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return shape_err(format!("layer_norm over width {w}"));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / w.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..w {
                let h = (row[j] - mean) * inv;
                xhat[r * w + j] = h;
                out[r * w + j] = g[j] * h + b[j];
            }
        }
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Batch norm over `x: [B, C, L]`, normalizing each channel over batch
    /// and length with the current batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (bsz, c, l) = self.dims3(x, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batch_norm with {c} channels"));
        }
        let src = self.value(x).data();
        let n = (bsz * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..bsz {
                s += src[(b * c + ch) * l..(b * c + ch + 1) * l].iter().sum::<f64>();
            }
            mean[ch] = s / n;
            let mut v = 0.0;
            for b in 0..bsz {
                v += src[(b * c + ch) * l..(b * c + ch + 1) * l]
                    .iter()
                    .map(|x| (x - mean[ch]) * (x - mean[ch]))
                    .sum::<f64>();
            }
            var[ch] = v / n;
        }
        let out = self.batch_norm_apply(x, gamma, beta, &mean, &var, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch norm with frozen statistics (inference).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (_, c, _) = self.dims3(x, "batch_norm")?;
        if self.shape(gamma) != [c] || running_mean.len() != c || running_var.len() != c {
            return shape_err(format!("batch_norm with {c} channels"));
        }
        self.batch_norm_apply(x, gamma, beta, running_mean, running_var, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let (bsz, c, l) = self.dims3(x, "batch_norm")?;
        let src = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..bsz {
            for ch in 0..c {
                for t in 0..l {
                    let i = (b * c + ch) * l + t;
                    let h = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
            "batch_norm",
        )
    }

    /// Inverted dropout in train mode, identity in eval mode. `layer`
    /// separates the RNG streams of different dropout sites.
    pub fn dropout(&mut self, x: Var, p: f64, layer: u64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|i| {
                if counter_uniform(self.seed, layer, self.step, i as u64) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Dropout(x, mask), &[x], "dropout")
    }

    /// Valid cross-correlation: `x: [B, Cin, L]`, `w: [Cout, Cin, K]`,
    /// `b: [Cout]` gives `[B, Cout, (L - K) / stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (bsz, cin, l) = self.dims3(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || self.shape(b) != [ws[0]] || stride == 0 || l < ws[2] {
            return shape_err(format!(
                "conv1d x {:?}, w {ws:?}, b {:?}, stride {stride}",
                self.shape(x),
                self.shape(b)
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        let lout = (l - k) / stride + 1;
        let xs = self.value(x).data();
        let (wd, bd) = (self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * cout * lout];
        let mut cols = vec![0.0; cin * k * lout];
        for bi in 0..bsz {
            unfold(
                &xs[bi * cin * l..(bi + 1) * cin * l],
                cin,
                l,
                k,
                stride,
                lout,
                &mut cols,
            );
            let o = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            for co in 0..cout {
                o[co * lout..(co + 1) * lout].iter_mut().for_each(|v| *v = bd[co]);
            }
            gemm_nn(wd, &cols, cout, cin * k, lout, o);
        }
        self.push(
            Tensor::new(&[bsz, cout, lout], out)?,
            Op::Conv1d { x, w, b, stride },
            &[x, w, b],
            "conv1d",
        )
    }

    /// Max pooling over the last axis of `[B, C, L]`; ties pick the first index.
    pub fn maxpool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (bsz, c, l) = self.dims3(x, "maxpool1d")?;
        if k == 0 || stride == 0 || l < k {
            return shape_err(format!("maxpool1d L={l} K={k} stride={stride}"));
        }
        let lout = (l - k) / stride + 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; bsz * c * lout];
        let mut arg = vec![0usize; bsz * c * lout];
        for row in 0..bsz * c {
            for t in 0..lout {
                let start = row * l + t * stride;
                let mut best = start;
                for i in start + 1..start + k {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out[row * lout + t] = src[best];
                arg[row * lout + t] = best;
            }
        }
        self.push(
            Tensor::new(&[bsz, c, lout], out)?,
            Op::MaxPool1d(x, arg),
            &[x],
            "maxpool1d",
        )
    }

    /// Row lookup into `table: [V, E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err(format!("embedding table {ts:?}"));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::TokenOutOfRange { token: bad, vocab: v });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        self.push(
            Tensor::new(&[ids.len(), e], out)?,
            Op::Embedding(table, ids.to_vec()),
            &[table],
            "embedding",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return shape_err(format!("transpose of rank {}", s.len())),
        };
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..batch {
            out.extend(transpose_slice(&src[b * r * c..(b + 1) * r * c], r, c));
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push(Tensor::new(&shape, out)?, Op::TransposeLast2(x), &[x], "transpose")
    }

    /// Stacks two matrices with equal widths along the rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.stack_rows(&[a, b])
    }

    /// Stacks any number of matrices with equal widths along the rows.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let width = self.shape(parts[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != width {
                return shape_err(format!("stack_rows width {width} with part {s:?}"));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * width);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(&[rows, width], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
            "stack_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return shape_err(format!("slice_rows {start}+{len} of {s:?}"));
        }
        let data = self.value(x).data()[start * s[1]..(start + len) * s[1]].to_vec();
        self.push(
            Tensor::new(&[len, s[1]], data)?,
            Op::SliceRows(x, start),
            &[x],
            "slice_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return shape_err(format!("slice_cols {start}+{len} of {s:?}"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&src[r * s[1] + start..r * s[1] + start + len]);
        }
        self.push(
            Tensor::new(&[s[0], len], data)?,
            Op::SliceCols(x, start),
            &[x],
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return shape_err(format!("concat_cols with part {s:?}"));
            }
            width += s[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::new(&[rows, width], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    /// Realigns a table of per-distance scores into query/key layout.
    ///
    /// `p: [N, M + N]` holds `p[i][d]` for distance `d`; the result
    /// `[N, M + N]` has `out[i][j] = p[i][M + i - j]` when `j <= M + i`
    /// and zero where key `j` lies in query `i`'s future.
    pub fn rel_shift(&mut self, p: Var, mem: usize) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 2 || s[1] != s[0] + mem {
            return shape_err(format!("rel_shift {s:?} with memory {mem}"));
        }
        let (n, keys) = (s[0], s[1]);
        let src = self.value(p).data();
        let mut out = vec![0.0; n * keys];
        for i in 0..n {
            for j in 0..=(mem + i) {
                out[i * keys + j] = src[i * keys + mem + i - j];
            }
        }
        self.push(Tensor::new(&[n, keys], out)?, Op::RelShift(p, mem), &[p], "rel_shift")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x], "sum_all")
    }

    /// Mean cross-entropy of `logits: [B, V]` against `targets`. Also
    /// returns `-log2 p(target)` per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Vec<f64>)> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return shape_err(format!("cross_entropy logits {s:?} for {} targets", targets.len()));
        }
        let (bsz, v) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::TargetOutOfRange { target: t, classes: v });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; bsz * v];
        let mut bits = Vec::with_capacity(bsz);
        let mut loss = 0.0;
        for r in 0..bsz {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
            let nll = log_z - row[targets[r]];
            bits.push(nll / std::f64::consts::LN_2);
            loss += nll;
        }
        let out = self.push(
            Tensor::scalar(loss / bsz as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )?;
        Ok((out, bits))
    }

    fn dims3(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 {
            return shape_err(format!("{what} expects [B, C, L], got {s:?}"));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut GradStore) -> Result<()> {
        self.backward_impl(loss, Some(grads)).map(|_| ())
    }

    /// Like [`Graph::backward`] but returns the gradient for each requested
    /// leaf (zeros when unreachable).
    pub fn backward_leaves(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let all = self.backward_impl(loss, None)?;
        Ok(leaves
            .iter()
            .map(|&v| all[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(v))))
            .collect())
    }

    fn backward_impl(&self, loss: Var, mut grads: Option<&mut GradStore>) -> Result<Vec<Option<Tensor>>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar(ls.to_vec()));
        }
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::full(ls, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = g[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    g[idx] = Some(gout);
                }
                Op::Param(id) => {
                    if let Some(store) = grads.as_deref_mut() {
                        store.accumulate(*id, &gout);
                    }
                    g[idx] = Some(gout);
                }
                op => self.backward_op(idx, op, &gout, &mut g)?,
            }
        }
        Ok(g)
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut g[v.0] {
            Some(t) => t.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn acc_data(&self, g: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        if self.rg(v) {
            let t = Tensor::new(self.shape(v), data)?;
            self.acc(g, v, t);
        }
        Ok(())
    }

    fn backward_op(&self, idx: usize, op: &Op, gout: &Tensor, g: &mut [Option<Tensor>]) -> Result<()> {
        let go = gout.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    // dA = dC * B^T
                    let bt = transpose_slice(self.value(*b).data(), k, n);
                    let mut da = vec![0.0; m * k];
                    gemm_nn(go, &bt, m, n, k, &mut da);
                    self.acc_data(g, *a, da)?;
                }
                if self.rg(*b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), go, m, k, n, &mut db);
                    self.acc_data(g, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.acc(g, *a, gout.clone());
                self.acc(g, *b, gout.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_data(g, *a, go.iter().zip(vb).map(|(x, y)| x * y).collect())?;
                self.acc_data(g, *b, go.iter().zip(va).map(|(x, y)| x * y).collect())?;
            }
            Op::AddBias(x, b) => {
                self.acc(g, *x, gout.clone());
                if self.rg(*b) {
                    let w = self.value(*b).len();
                    let mut db = vec![0.0; w];
                    for row in go.chunks_exact(w) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc_data(g, *b, db)?;
                }
            }
            Op::Scale(x, s) => {
                self.acc_data(g, *x, go.iter().map(|v| v * s).collect())?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_data(
                    g,
                    *x,
                    go.iter()
                        .zip(xv)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect(),
                )?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = go
                    .iter()
                    .zip(xv)
                    .map(|(d, &v)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        d * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                self.acc_data(g, *x, dx)?;
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = self.value(Var(idx)).data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..*n {
                            dot += go[idx(j)] * y[idx(j)];
                        }
                        for j in 0..*n {
                            dx[idx(j)] = y[idx(j)] * (go[idx(j)] - dot);
                        }
                    }
                }
                self.acc_data(g, *x, dx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = self.value(*gamma).len();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; w];
                let mut dbeta = vec![0.0; w];
                let mut dx = vec![0.0; go.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &go[r * w..(r + 1) * w];
                    let hr = &xhat[r * w..(r + 1) * w];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..w {
                        let dh = gr[j] * gm[j];
                        sum_d += dh;
                        sum_dh += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let nf = w as f64;
                    for j in 0..w {
                        let dh = gr[j] * gm[j];
                        dx[r * w + j] = inv / nf * (nf * dh - sum_d - hr[j] * sum_dh);
                    }
                }
                self.acc_data(g, *x, dx)?;
                self.acc_data(g, *gamma, dgamma)?;
                self.acc_data(g, *beta, dbeta)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (bsz, c, l) = (s[0], s[1], s[2]);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_d = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        for t in 0..l {
                            let i = (b * c + ch) * l + t;
                            dgamma[ch] += go[i] * xhat[i];
                            dbeta[ch] += go[i];
                            let dh = go[i] * gm[ch];
                            sum_d[ch] += dh;
                            sum_dh[ch] += dh * xhat[i];
                        }
                    }
                }
                let nf = (bsz * l) as f64;
                let mut dx = vec![0.0; go.len()];
                for b in 0..bsz {
                    for ch in 0..c {
                        for t in 0..l {
                            let i = (b * c + ch) * l + t;
                            let dh = go[i] * gm[ch];
                            dx[i] = if *batch_stats {
                                inv_std[ch] / nf * (nf * dh - sum_d[ch] - xhat[i] * sum_dh[ch])
                            } else {
                                dh * inv_std[ch]
                            };
                        }
                    }
                }
                self.acc_data(g, *x, dx)?;
                self.acc_data(g, *gamma, dgamma)?;
                self.acc_data(g, *beta, dbeta)?;
            }
            Op::Dropout(x, mask) => {
                self.acc_data(g, *x, go.iter().zip(mask).map(|(d, m)| d * m).collect())?;
            }
            Op::Conv1d { x, w, b, stride } => {
                let xs = self.shape(*x);
                let (bsz, cin, l) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let lout = (l - k) / stride + 1;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut dw = vec![0.0; cout * cin * k];
                let mut db = vec![0.0; cout];
                let mut dx = vec![0.0; xd.len()];
                let mut cols = vec![0.0; cin * k * lout];
                let mut dcols = vec![0.0; cin * k * lout];
                for bi in 0..bsz {
                    let gb = &go[bi * cout * lout..(bi + 1) * cout * lout];
                    for co in 0..cout {
                        db[co] += gb[co * lout..(co + 1) * lout].iter().sum::<f64>();
                    }
                    if self.rg(*w) {
                        unfold(
                            &xd[bi * cin * l..(bi + 1) * cin * l],
                            cin,
                            l,
                            k,
                            *stride,
                            lout,
                            &mut cols,
                        );
                        // dW += G * U^T
                        let ut = transpose_slice(&cols, cin * k, lout);
                        gemm_nn(gb, &ut, cout, lout, cin * k, &mut dw);
                    }
                    if self.rg(*x) {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        // dU = W^T * G
                        gemm_tn(wd, gb, cout, cin * k, lout, &mut dcols);
                        fold_add(
                            &dcols,
                            cin,
                            l,
                            k,
                            *stride,
                            lout,
                            &mut dx[bi * cin * l..(bi + 1) * cin * l],
                        );
                    }
                }
                self.acc_data(g, *x, dx)?;
                self.acc_data(g, *w, dw)?;
                self.acc_data(g, *b, db)?;
            }
            Op::MaxPool1d(x, arg) => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (d, &i) in go.iter().zip(arg) {
                    dx[i] += d;
                }
                self.acc_data(g, *x, dx)?;
            }
            Op::Embedding(table, ids) => {
                let e = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[i * e + j] += go[r * e + j];
                    }
                }
                self.acc_data(g, *table, dt)?;
            }
            Op::Reshape(x) => {
                self.acc_data(g, *x, go.to_vec())?;
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (batch, r, c) = if s.len() == 2 {
                    (1, s[0], s[1])
                } else {
                    (s[0], s[1], s[2])
                };
                let mut dx = Vec::with_capacity(go.len());
                for b in 0..batch {
                    dx.extend(transpose_slice(&go[b * r * c..(b + 1) * r * c], c, r));
                }
                self.acc_data(g, *x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_data(g, p, go[offset..offset + n].to_vec())?;
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let s = self.shape(*x);
                let mut dx = vec![0.0; s[0] * s[1]];
                dx[start * s[1]..start * s[1] + go.len()].copy_from_slice(go);
                self.acc_data(g, *x, dx)?;
            }
            Op::SliceCols(x, start) => {
                let s = self.shape(*x);
                let len = gout.shape()[1];
                let mut dx = vec![0.0; s[0] * s[1]];
                for r in 0..s[0] {
                    dx[r * s[1] + start..r * s[1] + start + len].copy_from_slice(&go[r * len..(r + 1) * len]);
                }
                self.acc_data(g, *x, dx)?;
            }
            Op::ConcatCols(parts) => {
                let rows = gout.shape()[0];
                let width = gout.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pw = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(rows * pw);
                    for r in 0..rows {
                        dp.extend_from_slice(&go[r * width + offset..r * width + offset + pw]);
                    }
                    self.acc_data(g, p, dp)?;
                    offset += pw;
                }
            }
            Op::RelShift(p, mem) => {
                let s = self.shape(*p);
                let (n, keys) = (s[0], s[1]);
                let mut dp = vec![0.0; n * keys];
                for i in 0..n {
                    for j in 0..=(mem + i) {
                        dp[i * keys + mem + i - j] += go[i * keys + j];
                    }
                }
                self.acc_data(g, *p, dp)?;
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.acc_data(g, *x, vec![go[0]; n])?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                let scale = go[0] / targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * v + t] -= scale;
                }
                self.acc_data(g, *logits, dl)?;
            }
        }
        Ok(())
    }
}

/// im2col for one batch item: `cols[(ci, k), t] = x[ci, t * stride + k]`.
fn unfold(x: &[f64], cin: usize, l: usize, k: usize, stride: usize, lout: usize, cols: &mut [f64]) {
    for ci in 0..cin {
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (t, v) in row.iter_mut().enumerate() {
                *v = x[ci * l + t * stride + kk];
            }
        }
    }
}

fn fold_add(cols: &[f64], cin: usize, l: usize, k: usize, stride: usize, lout: usize, dx: &mut [f64]) {
    for ci in 0..cin {
        for kk in 0..k {
            let row = &cols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (t, v) in row.iter().enumerate() {
                dx[ci * l + t * stride + kk] += v;
            }
        }
    }
}
