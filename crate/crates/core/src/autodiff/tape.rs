use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self as k, same_padding};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalisation mode for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics produced by a training-mode batch norm.
/// `var` is the unbiased estimate, ready for a running-average update.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: usize,
        ch: usize,
        len: usize,
        train: bool,
    },
    Dropout { x: Var, mask: Vec<f64> },
    AvgPool { x: Var, window: usize, len_in: usize, len_out: usize },
    DepthwiseConv { x: Var, w: Var, b: Option<Var>, ch: usize, len: usize, k: usize },
    GroupedPointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        cin: usize,
        cout: usize,
        len: usize,
        groups: usize,
    },
    ConvBank { x: Var, w: Var, batch: usize, rows: usize, len: usize, filters: usize, k: usize },
    SpatialDepthwise { x: Var, w: Var, batch: usize, filters: usize, mult: usize, rows: usize, len: usize },
    TemporalSpatial {
        x: Var,
        wt: Var,
        ws: Var,
        mixed: Vec<f64>,
        batch: usize,
        rows: usize,
        len: usize,
        mult: usize,
        k: usize,
    },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Concat { a: Var, b: Var, outer: usize, na: usize, nb: usize },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, batch: usize, classes: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it in reverse for gradients.
///
/// A tape is single-writer; independent tapes may live on different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<String, Var>,
    binding_order: Vec<String>,
    backward_done: bool,
    macs: u64,
    warnings: Vec<String>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Splits `[.., ch, len]` (rank 2 or 3) into (batch, ch, len).
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, l] => Ok((1, *c, *l)),
        [b, c, l] => Ok((*b, *c, *l)),
        _ => Err(Error::Dimension(format!(
            "{op} expects [ch, len] or [batch, ch, len], got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node_tensor(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced inconsistent shape")
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by recorded conv, matmul and attention
    /// products. Normalisation, activations and softmax are not counted.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Records a leaf; gradients are tracked if the tensor asks for them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter as a gradient-tracked leaf. Binding the same
    /// name twice returns the same leaf, so shared parameters accumulate
    /// gradient from every use site.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec())?.with_requires_grad(true);
        let v = self.push(leaf, Op::Leaf, true);
        self.bindings.insert(name.to_string(), v);
        self.binding_order.push(name.to_string());
        Ok(v)
    }

    /// Gradients of every bound parameter, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.binding_order
            .iter()
            .map(|n| (n.as_str(), self.grad(self.bindings[n])))
    }

    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        k::gemm(self.data(a), self.data(b), &mut out, m, kk, n, false, false);
        self.macs += (m * kk * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        let t = self.node_tensor(vec![m, n], out);
        Ok(self.push(t, Op::MatMul { a, b, m, k: kk, n }, rg))
    }

    /// Batched product over matching leading axes. With `trans_b`, `b` is
    /// stored as `[.., n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (m, kk) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if kk != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let g: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; g * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for gi in 0..g {
                k::gemm(
                    &da[gi * m * kk..(gi + 1) * m * kk],
                    &db[gi * kk * n..(gi + 1) * kk * n],
                    &mut out[gi * m * n..(gi + 1) * m * n],
                    m,
                    kk,
                    n,
                    false,
                    trans_b,
                );
            }
        }
        self.macs += (g * m * kk * n) as u64;
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let t = self.node_tensor(shape, out);
        Ok(self.push(
            t,
            Op::BatchMatMul {
                a,
                b,
                g,
                m,
                k: kk,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(shape_err("linear", &sx, &sw));
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err("linear bias", self.shape(b), &[out]));
            }
        }
        let rows = sx.iter().product::<usize>() / inp;
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bd);
            }
        }
        k::gemm(self.data(x), self.data(w), &mut y, rows, inp, out, false, true);
        self.macs += (rows * inp * out) as u64;
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = self.node_tensor(shape, y);
        Ok(self.push(
            t,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let y: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let t = self.node_tensor(self.shape(a).to_vec(), y);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let bd = self.data(b);
        let n = bd.len();
        let y: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let t = self.node_tensor(sa.to_vec(), y);
        Ok(self.push(t, Op::AddBroadcast { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let y: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        let t = self.node_tensor(self.shape(a).to_vec(), y);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        let t = self.node_tensor(self.shape(x).to_vec(), y);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Multiplies `x` by a learnable scalar `s` (shape `[1]`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let y: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        let t = self.node_tensor(self.shape(x).to_vec(), y);
        Ok(self.push(t, Op::ScaleBy { x, s }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.data(x).iter().map(|&v| k::gelu(v)).collect();
        let rg = self.rg(x);
        let t = self.node_tensor(self.shape(x).to_vec(), y);
        self.push(t, Op::Gelu { x }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = k::axis_extents(&shape, axis);
        let mut y = self.data(x).to_vec();
        if inner == 1 {
            for row in y.chunks_mut(n) {
                k::softmax_row(row);
            }
        } else {
            let mut buf = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    for j in 0..n {
                        buf[j] = y[base + j * inner];
                    }
                    k::softmax_row(&mut buf);
                    for j in 0..n {
                        y[base + j * inner] = buf[j];
                    }
                }
            }
        }
        let rg = self.rg(x);
        let t = self.node_tensor(shape, y);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                y[r * d + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = self.node_tensor(shape, y);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-channel batch normalisation of `[batch, ch, len]` (or `[ch, len]`).
    /// Training mode normalises over (batch, len) and returns the batch stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let (batch, ch, len) = channel_layout("batch_norm", &shape)?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err("batch_norm", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let m = (batch * len) as f64;
        let (means, vars, stats) = match mode {
            BnMode::Train => {
                let mut means = vec![0.0; ch];
                let mut vars = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xd[(b * ch + c) * len..(b * ch + c + 1) * len].iter().sum::<f64>();
                    }
                    let mean = s / m;
                    let mut v = 0.0;
                    for b in 0..batch {
                        v += xd[(b * ch + c) * len..(b * ch + c + 1) * len]
                            .iter()
                            .map(|x| (x - mean) * (x - mean))
                            .sum::<f64>();
                    }
                    means[c] = mean;
                    vars[c] = v / m;
                }
                let unbiased = if m > 1.0 {
                    vars.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    vars.clone()
                };
                let stats = BnStats {
                    mean: means.clone(),
                    var: unbiased,
                };
                (means, vars, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(shape_err("batch_norm running stats", &[ch], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bb) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * len;
                for t in 0..len {
                    let xh = (xd[off + t] - means[c]) * inv_std[c];
                    xhat[off + t] = xh;
                    y[off + t] = g[c] * xh + bb[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = stats.is_some();
        let t = self.node_tensor(shape, y);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                ch,
                len,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let y: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        let t = self.node_tensor(self.shape(x).to_vec(), y);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Non-overlapping average pooling over the last axis; a trailing
    /// remainder shorter than `window` is dropped.
    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len_in = *shape.last().unwrap();
        if window == 0 {
            return Err(Error::Config("pooling window must be >= 1".into()));
        }
        if window > len_in {
            return Err(Error::EmptyOutput { window, len: len_in });
        }
        let len_out = len_in / window;
        let rows = self.value(x).numel() / len_in;
        let xd = self.data(x);
        let inv = 1.0 / window as f64;
        let mut y = Vec::with_capacity(rows * len_out);
        for r in 0..rows {
            let row = &xd[r * len_in..(r + 1) * len_in];
            for i in 0..len_out {
                y.push(row[i * window..(i + 1) * window].iter().sum::<f64>() * inv);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len_out;
        let rg = self.rg(x);
        let t = self.node_tensor(out_shape, y);
        Ok(self.push(
            t,
            Op::AvgPool {
                x,
                window,
                len_in,
                len_out,
            },
            rg,
        ))
    }

    // ── convolutions ─────────────────────────────────────────────────

    fn check_kernel(kernel: usize, len: usize) -> Result<usize> {
        if kernel == 0 {
            return Err(Error::Config("kernel size must be >= 1".into()));
        }
        let (pl, pr) = same_padding(kernel);
        // Every tap must overlap the input for at least one output position.
        if pl.max(pr) >= len {
            return Err(Error::KernelTooLarge {
                kernel,
                pad_left: pl,
                pad_right: pr,
                len,
            });
        }
        Ok(pl)
    }

    /// Per-channel temporal convolution with same zero padding.
    /// `x`: `[batch, ch, len]` or `[ch, len]`, `w`: `[ch, k]`, `b`: `[ch]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, ch, len) = channel_layout("depthwise_conv1d", &shape)?;
        let sw = self.shape(w);
        if sw.len() != 2 || sw[0] != ch {
            return Err(shape_err("depthwise_conv1d", &shape, sw));
        }
        let kk = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [ch] {
                return Err(shape_err("depthwise_conv1d bias", self.shape(b), &[ch]));
            }
        }
        let pl = Self::check_kernel(kk, len)?;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut y = vec![0.0; xd.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let off = (bi * ch + c) * len;
                let row = &mut y[off..off + len];
                if let Some(b) = b {
                    row.fill(self.data(b)[c]);
                }
                k::conv_same_row(&xd[off..off + len], &wd[c * kk..(c + 1) * kk], row, pl);
            }
        }
        self.macs += (batch * ch * len * kk) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = self.node_tensor(shape, y);
        Ok(self.push(
            t,
            Op::DepthwiseConv {
                x,
                w,
                b,
                ch,
                len,
                k: kk,
            },
            rg,
        ))
    }

    /// Grouped 1×1 convolution. `w` is `[cout, cin / groups]`.
    pub fn grouped_pointwise(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, cin, len) = channel_layout("grouped_pointwise", &shape)?;
        let sw = self.shape(w).to_vec();
        if groups == 0 || cin % groups != 0 || sw.len() != 2 || sw[0] % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} must divide input channels {cin} and output channels {:?}",
                sw.first()
            )));
        }
        let (cout, ig) = (sw[0], sw[1]);
        if ig != cin / groups {
            return Err(shape_err("grouped_pointwise", &shape, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("grouped_pointwise bias", self.shape(b), &[cout]));
            }
        }
        let og = cout / groups;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut y = vec![0.0; batch * cout * len];
        for bi in 0..batch {
            for g in 0..groups {
                let yb = &mut y[(bi * cout + g * og) * len..(bi * cout + (g + 1) * og) * len];
                if let Some(b) = b {
                    for (o, row) in yb.chunks_mut(len).enumerate() {
                        row.fill(self.data(b)[g * og + o]);
                    }
                }
                k::gemm(
                    &wd[g * og * ig..(g + 1) * og * ig],
                    &xd[(bi * cin + g * ig) * len..(bi * cin + (g + 1) * ig) * len],
                    yb,
                    og,
                    ig,
                    len,
                    false,
                    false,
                );
            }
        }
        self.macs += (batch * cout * ig * len) as u64;
        let out_shape = if shape.len() == 2 {
            vec![cout, len]
        } else {
            vec![batch, cout, len]
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = self.node_tensor(out_shape, y);
        Ok(self.push(
            t,
            Op::GroupedPointwise {
                x,
                w,
                b,
                batch,
                cin,
                cout,
                len,
                groups,
            },
            rg,
        ))
    }

    /// Applies each of `filters` shared temporal kernels to every row:
    /// `x: [batch, rows, len]`, `w: [filters, k]` → `[batch, filters, rows, len]`.
    pub fn conv_bank(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, rows, len) = channel_layout("conv_bank", &shape)?;
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(shape_err("conv_bank", &shape, &sw));
        }
        let (filters, kk) = (sw[0], sw[1]);
        let pl = Self::check_kernel(kk, len)?;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut y = vec![0.0; batch * filters * rows * len];
        for b in 0..batch {
            for f in 0..filters {
                for r in 0..rows {
                    let src = &xd[(b * rows + r) * len..(b * rows + r + 1) * len];
                    let off = ((b * filters + f) * rows + r) * len;
                    k::conv_same_row(src, &wd[f * kk..(f + 1) * kk], &mut y[off..off + len], pl);
                }
            }
        }
        self.macs += (batch * filters * rows * len * kk) as u64;
        let rg = self.rg(x) || self.rg(w);
        let t = self.node_tensor(vec![batch, filters, rows, len], y);
        Ok(self.push(
            t,
            Op::ConvBank {
                x,
                w,
                batch,
                rows,
                len,
                filters,
                k: kk,
            },
            rg,
        ))
    }

    /// Depthwise spatial convolution spanning all rows with depth multiplier
    /// `mult`: `x: [batch, filters, rows, len]`, `w: [filters·mult, rows]` →
    /// `[batch, filters·mult, len]`.
    pub fn spatial_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if shape.len() != 4 || sw.len() != 2 || sw[1] != shape[2] || sw[0] % shape[1] != 0 {
            return Err(shape_err("spatial_depthwise", &shape, &sw));
        }
        let (batch, filters, rows, len) = (shape[0], shape[1], shape[2], shape[3]);
        let mult = sw[0] / filters;
        let out_ch = sw[0];
        let (xd, wd) = (self.data(x), self.data(w));
        let mut y = vec![0.0; batch * out_ch * len];
        for b in 0..batch {
            for g in 0..out_ch {
                let f = g / mult;
                let yrow = &mut y[(b * out_ch + g) * len..(b * out_ch + g + 1) * len];
                for r in 0..rows {
                    let wv = wd[g * rows + r];
                    let src = &xd[((b * filters + f) * rows + r) * len..][..len];
                    for (yv, xv) in yrow.iter_mut().zip(src) {
                        *yv += wv * xv;
                    }
                }
            }
        }
        self.macs += (batch * out_ch * rows * len) as u64;
        let rg = self.rg(x) || self.rg(w);
        let t = self.node_tensor(vec![batch, out_ch, len], y);
        Ok(self.push(
            t,
            Op::SpatialDepthwise {
                x,
                w,
                batch,
                filters,
                mult,
                rows,
                len,
            },
            rg,
        ))
    }

    /// Fused `spatial_depthwise(conv_bank(x, wt), ws)`.
    ///
    /// Both stages are linear and bias-free, so mixing rows first and then
    /// filtering each mixed row computes the same map with far fewer
    /// operations. MACs are attributed as the two-stage layered definition.
    pub fn temporal_spatial_conv(&mut self, x: Var, wt: Var, ws: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, rows, len) = channel_layout("temporal_spatial_conv", &shape)?;
        let (st, ss) = (self.shape(wt).to_vec(), self.shape(ws).to_vec());
        if st.len() != 2 || ss.len() != 2 || ss[1] != rows || ss[0] % st[0] != 0 {
            return Err(shape_err("temporal_spatial_conv", &st, &ss));
        }
        let (filters, kk) = (st[0], st[1]);
        let out_ch = ss[0];
        let mult = out_ch / filters;
        let pl = Self::check_kernel(kk, len)?;
        let (xd, wtd, wsd) = (self.data(x), self.data(wt), self.data(ws));
        let mut mixed = vec![0.0; batch * out_ch * len];
        let mut y = vec![0.0; batch * out_ch * len];
        for b in 0..batch {
            let u = &mut mixed[b * out_ch * len..(b + 1) * out_ch * len];
            k::gemm(wsd, &xd[b * rows * len..(b + 1) * rows * len], u, out_ch, rows, len, false, false);
            for g in 0..out_ch {
                let f = g / mult;
                k::conv_same_row(
                    &u[g * len..(g + 1) * len],
                    &wtd[f * kk..(f + 1) * kk],
                    &mut y[(b * out_ch + g) * len..(b * out_ch + g + 1) * len],
                    pl,
                );
            }
        }
        self.macs += (batch * filters * rows * len * kk + batch * out_ch * rows * len) as u64;
        let rg = self.rg(x) || self.rg(wt) || self.rg(ws);
        let t = self.node_tensor(vec![batch, out_ch, len], y);
        Ok(self.push(
            t,
            Op::TemporalSpatial {
                x,
                wt,
                ws,
                mixed,
                batch,
                rows,
                len,
                mult,
                k: kk,
            },
            rg,
        ))
    }

    // ── shape ────────────────────────────────────────────────────────

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let (y, ys) = k::permute(self.data(x), &shape, perm);
        let rg = self.rg(x);
        let t = self.node_tensor(ys, y);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(x)
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())
            .map_err(|_| shape_err("reshape", self.shape(x), shape))?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", &sa, &sb));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let outer = self.value(a).numel() / na;
        let mut y = Vec::with_capacity(outer * (na + nb));
        for o in 0..outer {
            y.extend_from_slice(&self.data(a)[o * na..(o + 1) * na]);
            y.extend_from_slice(&self.data(b)[o * nb..(o + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg(a) || self.rg(b);
        let t = self.node_tensor(shape, y);
        Ok(self.push(t, Op::Concat { a, b, outer, na, nb }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Mean categorical cross-entropy of `[batch, classes]` logits, computed
    /// in fused log-softmax form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err("cross_entropy", &shape, &[labels.len()]));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!(
                "label {l} of trial {i} outside [0, {classes})"
            )));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &ld[b * classes..(b + 1) * classes];
            let lse = k::logsumexp(row);
            loss += lse - row[label];
            for c in 0..classes {
                probs[b * classes + c] = (row[c] - lse).exp();
            }
        }
        loss /= batch as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                batch,
                classes,
            },
            rg,
        ))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Propagates d`loss`/d· to every gradient-tracked node reachable from
    /// `loss`. Leaf gradients are left in each node's gradient slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice on the same tape without reset_grads".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            let msg = "backward on a loss with no gradient-tracked inputs; nothing to do".to_string();
            log::warn!("{msg}");
            self.warnings.push(msg);
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    /// Clears every gradient slot so the tape can be differentiated again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        self.backward_done = false;
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let numel = |v: Var| nodes[v.0].value.numel();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k: kk, n } => {
                if needs(a) {
                    k::gemm(g, val(b), slot(grads, a, m * kk), m, n, kk, false, true);
                }
                if needs(b) {
                    k::gemm(val(a), g, slot(grads, b, kk * n), kk, m, n, true, false);
                }
            }
            &Op::BatchMatMul { a, b, g: groups, m, k: kk, n, trans_b } => {
                if needs(a) {
                    let da = slot(grads, a, groups * m * kk);
                    let bd = val(b);
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * kk * n..(gi + 1) * kk * n];
                        let dst = &mut da[gi * m * kk..(gi + 1) * m * kk];
                        // trans_b: b is [n,k], da = g·b ; else da = g·bᵀ
                        k::gemm(gg, bb, dst, m, n, kk, false, !trans_b);
                    }
                }
                if needs(b) {
                    let db = slot(grads, b, groups * kk * n);
                    let ad = val(a);
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let aa = &ad[gi * m * kk..(gi + 1) * m * kk];
                        let dst = &mut db[gi * kk * n..(gi + 1) * kk * n];
                        if trans_b {
                            // db[n,k] = gᵀ·a
                            k::gemm(gg, aa, dst, n, m, kk, true, false);
                        } else {
                            // db[k,n] = aᵀ·g
                            k::gemm(aa, gg, dst, kk, m, n, true, false);
                        }
                    }
                }
            }
            &Op::Linear { x, w, b, rows, inp, out: o } => {
                if needs(x) {
                    k::gemm(g, val(w), slot(grads, x, rows * inp), rows, o, inp, false, false);
                }
                if needs(w) {
                    k::gemm(g, val(x), slot(grads, w, o * inp), o, rows, inp, true, false);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = slot(grads, b, o);
                    for r in 0..rows {
                        for (d, gv) in db.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if needs(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            &Op::AddBroadcast { a, b } => {
                if needs(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if needs(b) {
                    let n = numel(b);
                    let db = slot(grads, b, n);
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let bd = val(b);
                    slot(grads, a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(bd))
                        .for_each(|(d, (gv, bv))| *d += gv * bv);
                }
                if needs(b) {
                    let ad = val(a);
                    slot(grads, b, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(d, (gv, av))| *d += gv * av);
                }
            }
            &Op::Scale { x, c } => {
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            &Op::ScaleBy { x, s } => {
                let sv = val(s)[0];
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += sv * gv);
                }
                if needs(s) {
                    let ds = k::dot(g, val(x));
                    slot(grads, s, 1)[0] += ds;
                }
            }
            &Op::Gelu { x } => {
                let xd = val(x);
                slot(grads, x, g.len())
                    .iter_mut()
                    .zip(g.iter().zip(xd))
                    .for_each(|(d, (gv, xv))| *d += gv * k::gelu_grad(*xv));
            }
            &Op::Softmax { x, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, n, inner) = k::axis_extents(shape, axis);
                let dx = slot(grads, x, g.len());
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[base + j * inner] * out[base + j * inner];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] += out[idx] * (g[idx] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = numel(*gamma);
                let gm = val(*gamma);
                let rows = inv_std.len();
                if needs(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let db = slot(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxh[j] = g[r * d + j] * gm[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] +=
                                scale * (d as f64 * dxh[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, ch, len, train } => {
                let (batch, ch, len) = (*batch, *ch, *len);
                let gm = val(*gamma);
                let m = (batch * len) as f64;
                // per-channel Σ dy and Σ dy·x̂
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * len;
                        sum_g[c] += g[off..off + len].iter().sum::<f64>();
                        sum_gx[c] += k::dot(&g[off..off + len], &xhat[off..off + len]);
                    }
                }
                if needs(*gamma) {
                    slot(grads, *gamma, ch).iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
                }
                if needs(*beta) {
                    slot(grads, *beta, ch).iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
                }
                if needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * len;
                            let gi = gm[c] * inv_std[c];
                            if *train {
                                let mean_g = sum_g[c] / m;
                                let mean_gx = sum_gx[c] / m;
                                for t in 0..len {
                                    dx[off + t] +=
                                        gi * (g[off + t] - mean_g - xhat[off + t] * mean_gx);
                                }
                            } else {
                                for t in 0..len {
                                    dx[off + t] += gi * g[off + t];
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                slot(grads, *x, g.len())
                    .iter_mut()
                    .zip(g.iter().zip(mask))
                    .for_each(|(d, (gv, mv))| *d += gv * mv);
            }
            &Op::AvgPool { x, window, len_in, len_out } => {
                let dx = slot(grads, x, numel(x));
                let rows = g.len() / len_out;
                let inv = 1.0 / window as f64;
                for r in 0..rows {
                    for j in 0..len_out {
                        let gv = g[r * len_out + j] * inv;
                        for d in &mut dx[r * len_in + j * window..r * len_in + (j + 1) * window] {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::DepthwiseConv { x, w, b, ch, len, k: kk } => {
                let (pl, _) = same_padding(kk);
                let rows = g.len() / len;
                if needs(w) {
                    let xd = val(x);
                    let dw = slot(grads, w, ch * kk);
                    for r in 0..rows {
                        let c = r % ch;
                        k::conv_same_row_kernel_grad(
                            &g[r * len..(r + 1) * len],
                            &xd[r * len..(r + 1) * len],
                            &mut dw[c * kk..(c + 1) * kk],
                            pl,
                        );
                    }
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = slot(grads, b, ch);
                    for r in 0..rows {
                        db[r % ch] += g[r * len..(r + 1) * len].iter().sum::<f64>();
                    }
                }
                if needs(x) {
                    let wd = val(w);
                    let dx = slot(grads, x, g.len());
                    for r in 0..rows {
                        let c = r % ch;
                        k::conv_same_row_transpose(
                            &g[r * len..(r + 1) * len],
                            &wd[c * kk..(c + 1) * kk],
                            &mut dx[r * len..(r + 1) * len],
                            pl,
                        );
                    }
                }
            }
            &Op::GroupedPointwise { x, w, b, batch, cin, cout, len, groups } => {
                let ig = cin / groups;
                let og = cout / groups;
                if needs(w) {
                    let xd = val(x);
                    let dw = slot(grads, w, cout * ig);
                    for bi in 0..batch {
                        for gi in 0..groups {
                            k::gemm(
                                &g[(bi * cout + gi * og) * len..(bi * cout + (gi + 1) * og) * len],
                                &xd[(bi * cin + gi * ig) * len..(bi * cin + (gi + 1) * ig) * len],
                                &mut dw[gi * og * ig..(gi + 1) * og * ig],
                                og,
                                len,
                                ig,
                                false,
                                true,
                            );
                        }
                    }
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = slot(grads, b, cout);
                    for bi in 0..batch {
                        for c in 0..cout {
                            db[c] += g[(bi * cout + c) * len..(bi * cout + c + 1) * len]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                }
                if needs(x) {
                    let wd = val(w);
                    let dx = slot(grads, x, batch * cin * len);
                    for bi in 0..batch {
                        for gi in 0..groups {
                            k::gemm(
                                &wd[gi * og * ig..(gi + 1) * og * ig],
                                &g[(bi * cout + gi * og) * len..(bi * cout + (gi + 1) * og) * len],
                                &mut dx[(bi * cin + gi * ig) * len..(bi * cin + (gi + 1) * ig) * len],
                                ig,
                                og,
                                len,
                                true,
                                false,
                            );
                        }
                    }
                }
            }
            &Op::ConvBank { x, w, batch, rows, len, filters, k: kk } => {
                let (pl, _) = same_padding(kk);
                if needs(w) {
                    let xd = val(x);
                    let dw = slot(grads, w, filters * kk);
                    for b in 0..batch {
                        for f in 0..filters {
                            for r in 0..rows {
                                let off = ((b * filters + f) * rows + r) * len;
                                k::conv_same_row_kernel_grad(
                                    &g[off..off + len],
                                    &xd[(b * rows + r) * len..(b * rows + r + 1) * len],
                                    &mut dw[f * kk..(f + 1) * kk],
                                    pl,
                                );
                            }
                        }
                    }
                }
                if needs(x) {
                    let wd = val(w);
                    let dx = slot(grads, x, batch * rows * len);
                    for b in 0..batch {
                        for f in 0..filters {
                            for r in 0..rows {
                                let off = ((b * filters + f) * rows + r) * len;
                                k::conv_same_row_transpose(
                                    &g[off..off + len],
                                    &wd[f * kk..(f + 1) * kk],
                                    &mut dx[(b * rows + r) * len..(b * rows + r + 1) * len],
                                    pl,
                                );
                            }
                        }
                    }
                }
            }
            &Op::SpatialDepthwise { x, w, batch, filters, mult, rows, len } => {
                let out_ch = filters * mult;
                if needs(w) {
                    let xd = val(x);
                    let dw = slot(grads, w, out_ch * rows);
                    for b in 0..batch {
                        for gch in 0..out_ch {
                            let f = gch / mult;
                            let grow = &g[(b * out_ch + gch) * len..][..len];
                            for r in 0..rows {
                                let src = &xd[((b * filters + f) * rows + r) * len..][..len];
                                dw[gch * rows + r] += k::dot(grow, src);
                            }
                        }
                    }
                }
                if needs(x) {
                    let wd = val(w);
                    let dx = slot(grads, x, numel(x));
                    for b in 0..batch {
                        for gch in 0..out_ch {
                            let f = gch / mult;
                            let grow = &g[(b * out_ch + gch) * len..][..len];
                            for r in 0..rows {
                                let wv = wd[gch * rows + r];
                                let dst = &mut dx[((b * filters + f) * rows + r) * len..][..len];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::TemporalSpatial { x, wt, ws, mixed, batch, rows, len, mult, k: kk } => {
                let (batch, rows, len, mult, kk) = (*batch, *rows, *len, *mult, *kk);
                let (pl, _) = same_padding(kk);
                let out_ch = numel(*ws) / rows;
                let filters = out_ch / mult;
                let wtd = val(*wt);
                if needs(*wt) {
                    let dwt = slot(grads, *wt, filters * kk);
                    for b in 0..batch {
                        for gch in 0..out_ch {
                            let f = gch / mult;
                            let off = (b * out_ch + gch) * len;
                            k::conv_same_row_kernel_grad(
                                &g[off..off + len],
                                &mixed[off..off + len],
                                &mut dwt[f * kk..(f + 1) * kk],
                                pl,
                            );
                        }
                    }
                }
                if needs(*ws) || needs(*x) {
                    // gradient w.r.t. the row-mixed signal
                    let mut dmixed = vec![0.0; batch * out_ch * len];
                    for b in 0..batch {
                        for gch in 0..out_ch {
                            let f = gch / mult;
                            let off = (b * out_ch + gch) * len;
                            k::conv_same_row_transpose(
                                &g[off..off + len],
                                &wtd[f * kk..(f + 1) * kk],
                                &mut dmixed[off..off + len],
                                pl,
                            );
                        }
                    }
                    let xd = val(*x);
                    if needs(*ws) {
                        let dws = slot(grads, *ws, out_ch * rows);
                        for b in 0..batch {
                            k::gemm(
                                &dmixed[b * out_ch * len..(b + 1) * out_ch * len],
                                &xd[b * rows * len..(b + 1) * rows * len],
                                dws,
                                out_ch,
                                len,
                                rows,
                                false,
                                true,
                            );
                        }
                    }
                    if needs(*x) {
                        let wsd = val(*ws);
                        let dx = slot(grads, *x, batch * rows * len);
                        for b in 0..batch {
                            k::gemm(
                                wsd,
                                &dmixed[b * out_ch * len..(b + 1) * out_ch * len],
                                &mut dx[b * rows * len..(b + 1) * rows * len],
                                rows,
                                out_ch,
                                len,
                                true,
                                false,
                            );
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let inv = k::inverse_permutation(perm);
                let (back, _) = k::permute(g, nodes[i].value.shape(), &inv);
                slot(grads, *x, back.len()).iter_mut().zip(&back).for_each(|(d, v)| *d += v);
            }
            &Op::Reshape { x } => {
                slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            &Op::Concat { a, b, outer, na, nb } => {
                let w = na + nb;
                if needs(a) {
                    let da = slot(grads, a, outer * na);
                    for o in 0..outer {
                        da[o * na..(o + 1) * na]
                            .iter_mut()
                            .zip(&g[o * w..o * w + na])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                if needs(b) {
                    let db = slot(grads, b, outer * nb);
                    for o in 0..outer {
                        db[o * nb..(o + 1) * nb]
                            .iter_mut()
                            .zip(&g[o * w + na..(o + 1) * w])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::Sum { x } => {
                let gv = g[0];
                slot(grads, x, numel(x)).iter_mut().for_each(|d| *d += gv);
            }
            Op::CrossEntropy { logits, labels, probs, batch, classes } => {
                let scale = g[0] / *batch as f64;
                let dl = slot(grads, *logits, batch * classes);
                for (b, &label) in labels.iter().enumerate() {
                    for c in 0..*classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dl[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            }
        }
    }
}
