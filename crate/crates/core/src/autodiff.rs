//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in creation order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in
//! reverse, seeding the most recently recorded node.

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, LstmGeom, LstmTrace};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Sum,
    Max,
    /// Population standard deviation with the variance clamped at
    /// [`STD_EPS`] before the square root.
    Std,
}

/// Variance floor applied before square roots.
pub const STD_EPS: f64 = 1e-8;

/// Coarse op families, used to report and to fault-inject backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    Conv1d,
    Affine,
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Scale,
    Reduce,
    Narrow,
    Concat,
    Flip,
    ScaleChannels,
    BroadcastTime,
    Softmax,
    SqrtClamp,
    BatchNorm,
    Lstm,
    AamSoftmax,
    SumAll,
    Project,
}

impl OpTag {
    pub fn parse(s: &str) -> Option<Self> {
        use OpTag::*;
        let all = [
            Leaf, Conv1d, Affine, Relu, Sigmoid, Tanh, Add, Sub, Mul, Scale, Reduce, Narrow, Concat, Flip,
            ScaleChannels, BroadcastTime, Softmax, SqrtClamp, BatchNorm, Lstm, AamSoftmax, SumAll, Project,
        ];
        all.into_iter().find(|t| format!("{t:?}").eq_ignore_ascii_case(s))
    }
}

/// Batch statistics produced by a training-mode batch norm, so the owner of
/// the running statistics can fold them in after the step.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: (usize, usize, usize),
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reduce {
        x: Var,
        kind: Reduce,
        split: (usize, usize, usize),
        argmax: Vec<usize>,
        clamped: Vec<bool>,
    },
    Narrow {
        x: Var,
        split: (usize, usize, usize),
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Flip {
        x: Var,
        split: (usize, usize, usize),
    },
    ScaleChannels {
        x: Var,
        s: Var,
        t: usize,
    },
    BroadcastTime {
        x: Var,
        t: usize,
    },
    Softmax {
        x: Var,
        len: usize,
    },
    SqrtClamp {
        x: Var,
        clamped: Vec<bool>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        split: (usize, usize, usize),
        /// Normalized activations; empty in eval mode.
        xhat: Vec<f64>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        geom: LstmGeom,
        reverse: bool,
        traces: Vec<LstmTrace>,
    },
    AamSoftmax(Box<AamSaved>),
    SumAll(Var),
    Project {
        x: Var,
        r: Tensor,
    },
}

struct AamSaved {
    emb: Var,
    w: Var,
    labels: Vec<usize>,
    cos_m: f64,
    sin_m: f64,
    scale: f64,
    emb_n: Vec<f64>,
    emb_norm: Vec<f64>,
    w_n: Vec<f64>,
    w_norm: Vec<f64>,
    cos_true: Vec<f64>,
    probs: Vec<f64>,
    dims: (usize, usize, usize),
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Conv1d { .. } => OpTag::Conv1d,
            Op::Affine { .. } => OpTag::Affine,
            Op::Relu(_) => OpTag::Relu,
            Op::Sigmoid(_) => OpTag::Sigmoid,
            Op::Tanh(_) => OpTag::Tanh,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Scale(..) => OpTag::Scale,
            Op::Reduce { .. } => OpTag::Reduce,
            Op::Narrow { .. } => OpTag::Narrow,
            Op::Concat { .. } => OpTag::Concat,
            Op::Flip { .. } => OpTag::Flip,
            Op::ScaleChannels { .. } => OpTag::ScaleChannels,
            Op::BroadcastTime { .. } => OpTag::BroadcastTime,
            Op::Softmax { .. } => OpTag::Softmax,
            Op::SqrtClamp { .. } => OpTag::SqrtClamp,
            Op::BatchNorm { .. } => OpTag::BatchNorm,
            Op::Lstm { .. } => OpTag::Lstm,
            Op::AamSoftmax(_) => OpTag::AamSoftmax,
            Op::SumAll(_) => OpTag::SumAll,
            Op::Project { .. } => OpTag::Project,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the seeded output with respect to every leaf that requires
/// them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    fault: Option<OpTag>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately breaks the backward rule of one op family. Only used by
    /// negative-control checks.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, tag: OpTag) {
        self.fault = Some(tag);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?}", op.tag())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops ----------------------------------------------------

    /// Same-length dilated cross-correlation; see [`kernels::conv1d`].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let geom = kernels::check_conv(self.shape(x), self.shape(w), b.map(|b| self.shape(b)), dilation)?;
        let out = kernels::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), dilation)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv1d { x, w, b, geom }, &inputs)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = kernels::check_affine(self.shape(x), self.shape(w), b.map(|b| self.shape(b)))?;
        let out = kernels::affine(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Affine { x, w, b, dims }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Reduces `axis` away. A rank-1 input reduces to shape `[1]`.
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let split = xv.axis_split(axis)?;
        let (outer, len, inner) = split;
        let src = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        let mut clamped = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        if kind == Reduce::Std {
            clamped = vec![false; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + i];
                let dst = o * inner + i;
                out[dst] = match kind {
                    Reduce::Sum => (0..len).map(at).sum(),
                    Reduce::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    Reduce::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if at(l) > at(best) {
                                best = l;
                            }
                        }
                        argmax[dst] = best;
                        at(best)
                    }
                    Reduce::Std => {
                        let mean = (0..len).map(at).sum::<f64>() / len as f64;
                        let var = (0..len).map(|l| (at(l) - mean).powi(2)).sum::<f64>() / len as f64;
                        if var < STD_EPS {
                            clamped[dst] = true;
                            STD_EPS.sqrt()
                        } else {
                            var.sqrt()
                        }
                    }
                };
            }
        }
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, out)?;
        self.push(
            out,
            Op::Reduce {
                x,
                kind,
                split,
                argmax,
                clamped,
            },
            &[x],
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let split = xv.axis_split(axis)?;
        let (outer, ext, inner) = split;
        if len == 0 || start + len > ext {
            return Err(invalid!("narrow [{}, {}) exceeds extent {}", start, start + len, ext));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Narrow { x, split, start, len }, &[x])
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid!("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid!("concat axis {} out of range", axis));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err!("concat operands {:?} vs {:?}", base, s));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            xs,
        )
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let split = xv.axis_split(axis)?;
        let out = flip_data(xv.data(), split);
        let out = Tensor::new(xv.shape(), out)?;
        self.push(out, Op::Flip { x, split }, &[x])
    }

    /// `out[.., c, t] = s[.., c] · x[.., c, t]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ss = self.shape(s);
        if xs.len() < 2 || ss != &xs[..xs.len() - 1] {
            return Err(shape_err!("scale_channels {:?} by {:?}", xs, ss));
        }
        let t = xs[xs.len() - 1];
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (row, &k) in out.data_mut().chunks_exact_mut(t).zip(sv) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::ScaleChannels { x, s, t }, &[x, s])
    }

    /// Repeats `x` along a new trailing axis of extent `t`.
    pub fn broadcast_time(&mut self, x: Var, t: usize) -> Result<Var> {
        if t == 0 {
            return Err(invalid!("broadcast to zero frames"));
        }
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape.push(t);
        let out: Vec<f64> = xv.data().iter().flat_map(|&v| std::iter::repeat_n(v, t)).collect();
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::BroadcastTime { x, t }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let len = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(len) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::Softmax { x, len }, &[x])
    }

    /// `sqrt(max(x, eps))` elementwise.
    pub fn sqrt_clamp(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let clamped: Vec<bool> = xv.data().iter().map(|&v| v < eps).collect();
        let out = xv.map(|v| v.max(eps).sqrt());
        self.push(out, Op::SqrtClamp { x, clamped }, &[x])
    }

    /// Batch normalization over every axis except `channel_axis`. In training
    /// mode, batch statistics are used and returned; in eval mode the given
    /// running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let split = xv.axis_split(channel_axis)?;
        let (outer, c, inner) = split;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batch norm affine params must be [{}]", c));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let n = (outer * inner) as f64;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let (mean, var, train) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err!("running stats must have {} channels", c));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        mean[ch] += src[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        var[ch] += src[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = if train { vec![0.0; src.len()] } else { Vec::new() };
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (src[i] - mean[ch]) * inv_std[ch];
                    if train {
                        xhat[i] = h;
                    }
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var,
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                split,
                xhat,
                mean,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Runs an LSTM over each sample of `x` (`[B,]d×T`, frames along the last
    /// axis). Output is `[B,]h×T`; a reversed pass reads the frames back to
    /// front and writes each state at its own frame index.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let (batch, d, t) = kernels::bct(self.shape(x))?;
        let [h4, wd] = *self.shape(w_ih) else {
            return Err(shape_err!("lstm input weights must be 4h×d"));
        };
        if h4 % 4 != 0 || h4 == 0 || wd != d {
            return Err(shape_err!("lstm input weights {:?} do not fit input dim {}", self.shape(w_ih), d));
        }
        let h = h4 / 4;
        if self.shape(w_hh) != [h4, h] || self.shape(b) != [h4] {
            return Err(shape_err!("lstm recurrent weights/bias must be [{h4},{h}] and [{h4}]"));
        }
        let geom = LstmGeom { d, h, t };
        let mut out = vec![0.0; batch * h * t];
        let xv = self.value(x).data();
        let (wi, wh, bv) = (self.value(w_ih).data(), self.value(w_hh).data(), self.value(b).data());
        let traces = xv
            .chunks_exact(d * t)
            .zip(out.chunks_exact_mut(h * t))
            .map(|(xs, os)| kernels::lstm_sample(geom, xs, wi, wh, bv, reverse, os))
            .collect();
        let out = Tensor::new(&kernels::with_channels(self.shape(x), h), out)?;
        self.push(
            out,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                geom,
                reverse,
                traces,
            },
            &[x, w_ih, w_hh, b],
        )
    }

    /// Additive-angular-margin softmax cross-entropy, averaged over the batch.
    /// `emb` is `B×D`, `w` is `K×D`; both are L2-normalized internally.
    pub fn aam_softmax(&mut self, emb: Var, w: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
        let [b, d] = *self.shape(emb) else {
            return Err(shape_err!("embeddings must be B×D"));
        };
        let [k, wd] = *self.shape(w) else {
            return Err(shape_err!("class weights must be K×D"));
        };
        if wd != d {
            return Err(shape_err!("class weights have dim {}, embeddings {}", wd, d));
        }
        if labels.len() != b {
            return Err(shape_err!("{} labels for {} embeddings", labels.len(), b));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid!("label {} out of range for {} classes", bad, k));
        }
        let (emb_n, emb_norm) = l2_rows(self.value(emb).data(), d, "embedding")?;
        let (w_n, w_norm) = l2_rows(self.value(w).data(), d, "class weight")?;
        let mut cos = vec![0.0; b * k];
        kernels::affine_raw(b, d, k, &emb_n, &w_n, None, &mut cos);
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        let mut probs = vec![0.0; b * k];
        let mut cos_true = vec![0.0; b];
        let mut loss = 0.0;
        for i in 0..b {
            let y = labels[i];
            let c = cos[i * k + y].clamp(-1.0, 1.0);
            cos_true[i] = c;
            let sin = (1.0 - c * c).max(0.0).sqrt();
            let logits = &mut probs[i * k..(i + 1) * k];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = scale * if j != y {
                    cos[i * k + j]
                } else if c > -cos_m {
                    c * cos_m - sin * sin_m
                } else {
                    // θ > π − m
                    c - margin * sin_m
                };
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            loss += lse - logits[y];
            logits.iter_mut().for_each(|l| *l = (*l - lse).exp());
        }
        loss /= b as f64;
        let saved = AamSaved {
            emb,
            w,
            labels: labels.to_vec(),
            cos_m,
            sin_m,
            scale,
            emb_n,
            emb_norm,
            w_n,
            w_norm,
            cos_true,
            probs,
            dims: (b, d, k),
        };
        self.push(Tensor::scalar(loss), Op::AamSoftmax(Box::new(saved)), &[emb, w])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    /// `Σ r ⊙ x` for a constant `r`; turns any output into a scalar probe.
    pub fn project(&mut self, x: Var, r: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&r)?;
        let out = Tensor::scalar(self.value(x).dot(&r));
        self.push(out, Op::Project { x, r }, &[x])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from the most recently recorded node, seeded with
    /// `seed`. A graph can be differentiated once; call [`Graph::reset`] to
    /// allow another sweep.
    pub fn backward(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; reset first".into()));
        }
        if output.0 + 1 != self.nodes.len() {
            return Err(Error::Graph(format!(
                "can only seed the output node {}, got {}",
                self.nodes.len().saturating_sub(1),
                output.0
            )));
        }
        self.value(output).expect_same_shape(&seed)?;
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let mut contribs = self.node_backward(node, &gout)?;
            if self.fault == Some(node.op.tag()) {
                for (_, t) in contribs.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // Keep leaf gradients only.
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Allows another backward sweep over the same recorded graph.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    fn node_backward(&self, node: &Node, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let go = gout.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = want(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = want(*w).then(|| vec![0.0; wv.len()]);
                let mut db = b.filter(|&b| want(b)).map(|_| vec![0.0; geom.c_out]);
                let (ci, co) = (geom.c_in * geom.t, geom.c_out * geom.t);
                for (s, (xs, gs)) in xv.chunks_exact(ci).zip(go.chunks_exact(co)).enumerate() {
                    kernels::conv1d_sample_backward(
                        *geom,
                        xs,
                        wv,
                        gs,
                        dx.as_mut().map(|d| &mut d[s * ci..(s + 1) * ci]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                if let Some(d) = dx {
                    out.push((*x, like(*x, d)?));
                }
                if let Some(d) = dw {
                    out.push((*w, like(*w, d)?));
                }
                if let (Some(b), Some(d)) = (b, db) {
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::Affine { x, w, b, dims } => {
                let (rows, n, m) = *dims;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                use kernels::View;
                if want(*x) {
                    let mut dx = vec![0.0; rows * n];
                    // dx[rows×n] = g[rows×m] · w[m×n]
                    kernels::gemm_acc(rows, m, n, View::new(go, m, 1), View::new(wv, n, 1), &mut dx, n, 1);
                    out.push((*x, like(*x, dx)?));
                }
                if want(*w) {
                    let mut dw = vec![0.0; m * n];
                    // dw[m×n] = gᵀ[m×rows] · x[rows×n]
                    kernels::gemm_acc(m, rows, n, View::new(go, m, 1).t(), View::new(xv, n, 1), &mut dw, n, 1);
                    out.push((*w, like(*w, dw)?));
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    let mut db = vec![0.0; m];
                    for r in go.chunks_exact(m) {
                        db.iter_mut().zip(r).for_each(|(a, g)| *a += g);
                    }
                    out.push((b, like(b, db)?));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = go.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = go.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if want(*a) {
                    out.push((*a, gout.zip_map(bv, |g, y| g * y)?));
                }
                if want(*b) {
                    out.push((*b, gout.zip_map(av, |g, y| g * y)?));
                }
            }
            Op::Scale(x, k) => out.push((*x, gout.map(|v| v * k))),
            Op::Reduce {
                x,
                kind,
                split,
                argmax,
                clamped,
            } => {
                let (outer, len, inner) = *split;
                let xv = self.value(*x).data();
                let y = node.value.data();
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        let g = go[r];
                        let at = |l: usize| (o * len + l) * inner + i;
                        match kind {
                            Reduce::Sum => (0..len).for_each(|l| d[at(l)] = g),
                            Reduce::Mean => (0..len).for_each(|l| d[at(l)] = g / len as f64),
                            Reduce::Max => d[at(argmax[r])] = g,
                            Reduce::Std => {
                                if !clamped[r] {
                                    let mean = (0..len).map(|l| xv[at(l)]).sum::<f64>() / len as f64;
                                    for l in 0..len {
                                        d[at(l)] = g * (xv[at(l)] - mean) / (len as f64 * y[r]);
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Narrow { x, split, start, len } => {
                let (outer, ext, inner) = *split;
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&go[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let inner = go.len() / (outer * total);
                let mut offset = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    if want(v) {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..*outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&go[s..s + w * inner]);
                        }
                        out.push((v, like(v, d)?));
                    }
                    offset += w;
                }
            }
            Op::Flip { x, split } => out.push((*x, like(*x, flip_data(go, *split))?)),
            Op::ScaleChannels { x, s, t } => {
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if want(*x) {
                    let mut d = go.to_vec();
                    for (row, &k) in d.chunks_exact_mut(*t).zip(sv) {
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    out.push((*x, like(*x, d)?));
                }
                if want(*s) {
                    let d = go
                        .chunks_exact(*t)
                        .zip(xv.chunks_exact(*t))
                        .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*s, like(*s, d)?));
                }
            }
            Op::BroadcastTime { x, t } => {
                let d = go.chunks_exact(*t).map(|r| r.iter().sum()).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Softmax { x, len } => {
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(*len).zip(y.chunks_exact(*len)).zip(go.chunks_exact(*len)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::SqrtClamp { x, clamped } => {
                let y = node.value.data();
                let d = go
                    .iter()
                    .zip(y)
                    .zip(clamped)
                    .map(|((g, s), &c)| if c { 0.0 } else { g / (2.0 * s) })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                split,
                xhat,
                mean,
                inv_std,
                train,
            } => {
                let (outer, c, inner) = *split;
                let n = (outer * inner) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let xh: Vec<f64>;
                let xhat = if *train {
                    xhat
                } else {
                    let xs = self.value(*x).data();
                    let mut v = vec![0.0; xs.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in base..base + inner {
                                v[i] = (xs[i] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    xh = v;
                    &xh
                };
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += go[i] * xhat[i];
                            dbeta[ch] += go[i];
                        }
                    }
                }
                if want(*x) {
                    let mut d = vec![0.0; go.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + inner {
                                d[i] = if *train {
                                    k * (go[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * go[i]
                                };
                            }
                        }
                    }
                    out.push((*x, like(*x, d)?));
                }
                if want(*gamma) {
                    out.push((*gamma, like(*gamma, dgamma)?));
                }
                if want(*beta) {
                    out.push((*beta, like(*beta, dbeta)?));
                }
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                geom,
                reverse,
                traces,
            } => {
                let xv = self.value(*x).data();
                let (wi, wh) = (self.value(*w_ih).data(), self.value(*w_hh).data());
                let mut dx = want(*x).then(|| vec![0.0; xv.len()]);
                let mut dwi = want(*w_ih).then(|| vec![0.0; wi.len()]);
                let mut dwh = want(*w_hh).then(|| vec![0.0; wh.len()]);
                let mut db = want(*b).then(|| vec![0.0; 4 * geom.h]);
                let (xi, oi) = (geom.d * geom.t, geom.h * geom.t);
                for (s, trace) in traces.iter().enumerate() {
                    kernels::lstm_sample_backward(
                        *geom,
                        &xv[s * xi..(s + 1) * xi],
                        wi,
                        wh,
                        *reverse,
                        trace,
                        &go[s * oi..(s + 1) * oi],
                        dx.as_mut().map(|d| &mut d[s * xi..(s + 1) * xi]),
                        dwi.as_deref_mut(),
                        dwh.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                for (v, d) in [(*x, dx), (*w_ih, dwi), (*w_hh, dwh), (*b, db)] {
                    if let Some(d) = d {
                        out.push((v, like(v, d)?));
                    }
                }
            }
            Op::AamSoftmax(s) => {
                let (b, d, k) = s.dims;
                let g = go[0];
                // dL/dcos, including the margin's chain factor on the true class.
                let mut dcos = vec![0.0; b * k];
                for i in 0..b {
                    let y = s.labels[i];
                    for j in 0..k {
                        let dl = (s.probs[i * k + j] - if j == y { 1.0 } else { 0.0 }) * g / b as f64;
                        let chain = if j == y {
                            let c = s.cos_true[i];
                            let sin = (1.0 - c * c).max(0.0).sqrt();
                            if c <= -s.cos_m {
                                1.0
                            } else if sin > 1e-12 {
                                s.cos_m + c / sin * s.sin_m
                            } else {
                                s.cos_m
                            }
                        } else {
                            1.0
                        };
                        dcos[i * k + j] = s.scale * dl * chain;
                    }
                }
                use kernels::View;
                if want(s.emb) {
                    let mut den = vec![0.0; b * d];
                    kernels::gemm_acc(b, k, d, View::new(&dcos, k, 1), View::new(&s.w_n, d, 1), &mut den, d, 1);
                    let de = unnormalize_grad(&den, &s.emb_n, &s.emb_norm, d);
                    out.push((s.emb, like(s.emb, de)?));
                }
                if want(s.w) {
                    let mut dwn = vec![0.0; k * d];
                    kernels::gemm_acc(k, b, d, View::new(&dcos, k, 1).t(), View::new(&s.emb_n, d, 1), &mut dwn, d, 1);
                    let dw = unnormalize_grad(&dwn, &s.w_n, &s.w_norm, d);
                    out.push((s.w, like(s.w, dw)?));
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                out.push((*x, like(*x, vec![go[0]; n])?));
            }
            Op::Project { x, r } => out.push((*x, r.map(|v| v * go[0]))),
        }
        Ok(out)
    }
}

fn flip_data(src: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for l in 0..len {
            let s = (o * len + l) * inner;
            let d = (o * len + (len - 1 - l)) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

fn l2_rows(data: &[f64], d: usize, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = data.to_vec();
    let mut norms = Vec::with_capacity(data.len() / d);
    for row in out.chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(invalid!("zero-norm {} cannot be normalized", what));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Gradient through `u = v/‖v‖`: `(g − u(u·g))/‖v‖` row by row.
fn unnormalize_grad(gu: &[f64], u: &[f64], norms: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; gu.len()];
    for (((o, g), u), n) in out.chunks_exact_mut(d).zip(gu.chunks_exact(d)).zip(u.chunks_exact(d)).zip(norms) {
        let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        for ((ov, gv), uv) in o.iter_mut().zip(g).zip(u) {
            *ov = (gv - uv * dot) / n;
        }
    }
    out
}
