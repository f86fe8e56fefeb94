//! Reusable layers: convolution units with batch norm, squeeze-excitation,
//! LSTM / Bi-LSTM, and attentive statistics pooling.
//!
//! Feature maps are `C×T` (one utterance) or `B×C×T` (a batch); channels are
//! always the second-to-last axis and frames the last.

use rand::Rng;

use crate::autodiff::{Reduce, Var, STD_EPS};
use crate::error::{invalid, shape_err, Result};
use crate::params::{BnUpdate, Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn channel_axis(s: &Session<'_>, x: Var) -> Result<usize> {
    let r = s.value(x).rank();
    if r < 2 {
        return Err(shape_err!("feature map needs rank ≥ 2, got {:?}", s.value(x).shape()));
    }
    Ok(r - 2)
}

fn uniform_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    bound: f64,
    rng: &mut R,
) -> Result<ParamId> {
    store.add(name, ParamKind::Learnable, Tensor::uniform(shape, bound, rng))
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(invalid!("kernel size must be odd, got {}", k));
        }
        if dilation == 0 {
            return Err(invalid!("dilation must be positive"));
        }
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        let weight = uniform_param(store, format!("{prefix}.weight"), &[c_out, c_in, k], bound, rng)?;
        let bias = uniform_param(store, format!("{prefix}.bias"), &[c_out], bound, rng)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            dilation,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.p(self.weight)?;
        let b = self.bias.map(|b| s.p(b)).transpose()?;
        s.graph.conv1d(x, w, b, self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::Learnable, Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{prefix}.beta"), ParamKind::Learnable, Tensor::zeros(&[channels]))?,
            running_mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels]))?,
            running_var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], 1.0))?,
        })
    }

    /// Normalizes over every axis but `channel_axis`. Training mode uses
    /// batch statistics and queues a running-stat update on the session.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, channel_axis: usize) -> Result<Var> {
        let g = s.p(self.gamma)?;
        let b = s.p(self.beta)?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, g, b, channel_axis, BN_EPS, None)?;
                s.record_bn(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: BN_MOMENTUM,
                    stats: stats.expect("train-mode batch norm yields stats"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store();
                let m = store.get(self.running_mean).data();
                let v = store.get(self.running_var).data();
                let (y, _) = s.graph.batch_norm(x, g, b, channel_axis, BN_EPS, Some((m, v)))?;
                Ok(y)
            }
        }
    }
}

/// Which post-processing a convolution unit applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitStyle {
    /// conv → batch norm → ReLU.
    ConvBnRelu,
    /// Bare convolution.
    ConvOnly,
}

/// Convolution followed by optional batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv1d,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        style: UnitStyle,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv1d::new(store, &format!("{prefix}.conv"), c_in, c_out, k, dilation, rng)?;
        let (bn, relu) = match style {
            UnitStyle::ConvBnRelu => (Some(BatchNorm::new(store, &format!("{prefix}.bn"), c_out)?), true),
            UnitStyle::ConvOnly => (None, false),
        };
        Ok(Self { conv, bn, relu })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(s, x)?;
        if let Some(bn) = &self.bn {
            let axis = channel_axis(s, y)?;
            y = bn.forward(s, y, axis)?;
        }
        if self.relu {
            y = s.graph.relu(y)?;
        }
        Ok(y)
    }

    /// Every learnable parameter of the unit.
    pub fn learnables(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv.weight];
        v.extend(self.conv.bias);
        if let Some(bn) = &self.bn {
            v.extend([bn.gamma, bn.beta]);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, n_in: usize, n_out: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (n_in as f64).sqrt();
        Ok(Self {
            weight: uniform_param(store, format!("{prefix}.weight"), &[n_out, n_in], bound, rng)?,
            bias: uniform_param(store, format!("{prefix}.bias"), &[n_out], bound, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.p(self.weight)?;
        let b = s.p(self.bias)?;
        s.graph.affine(x, w, Some(b))
    }
}

/// Squeeze-excitation channel attention.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= channels {
            return Err(invalid!(
                "SE bottleneck must compress: got {} for {} channels",
                bottleneck,
                channels
            ));
        }
        Ok(Self {
            squeeze: Linear::new(store, &format!("{prefix}.squeeze"), channels, bottleneck, rng)?,
            excite: Linear::new(store, &format!("{prefix}.excite"), bottleneck, channels, rng)?,
        })
    }

    /// `s = σ(excite(relu(squeeze(mean_t x))))`, `out[c,t] = s[c]·x[c,t]`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let t_axis = s.value(x).rank() - 1;
        let m = s.graph.reduce(x, Reduce::Mean, t_axis)?;
        let z = self.squeeze.forward(s, m)?;
        let z = s.graph.relu(z)?;
        let z = self.excite.forward(s, z)?;
        let gate = s.graph.sigmoid(z)?;
        s.graph.scale_channels(x, gate)
    }

    pub fn param_count(channels: usize, bottleneck: usize) -> usize {
        2 * channels * bottleneck + channels + bottleneck
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// LSTM cell parameters; gate rows are ordered (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(invalid!("LSTM hidden size must be ≥ 1"));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = uniform_param(store, format!("{prefix}.w_ih"), &[4 * hidden, d_in], bound, rng)?;
        let w_hh = uniform_param(store, format!("{prefix}.w_hh"), &[4 * hidden, hidden], bound, rng)?;
        let mut b = Tensor::uniform(&[4 * hidden], bound, rng);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{prefix}.bias"), ParamKind::Learnable, b)?;
        Ok(Self { w_ih, w_hh, bias, hidden })
    }

    /// Hidden-state sequence for `x` (`[B,]d×T`); `h_0 = c_0 = 0`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, dir: Direction) -> Result<Var> {
        let wi = s.p(self.w_ih)?;
        let wh = s.p(self.w_hh)?;
        let b = s.p(self.bias)?;
        s.graph.lstm(x, wi, wh, b, dir == Direction::Reverse)
    }

    pub fn param_count(d_in: usize, hidden: usize) -> usize {
        4 * hidden * (d_in + hidden + 1)
    }
}

/// Forward and reverse LSTMs with per-frame concatenation `[fwd_t ; rev_t]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub rev: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fwd: LstmCell::new(store, &format!("{prefix}.fwd"), d_in, hidden, rng)?,
            rev: LstmCell::new(store, &format!("{prefix}.rev"), d_in, hidden, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        if self.fwd.hidden != self.rev.hidden {
            return Err(shape_err!(
                "Bi-LSTM hidden sizes differ: {} vs {}",
                self.fwd.hidden,
                self.rev.hidden
            ));
        }
        let f = self.fwd.forward(s, x, Direction::Forward)?;
        let r = self.rev.forward(s, x, Direction::Reverse)?;
        let axis = channel_axis(s, f)?;
        s.graph.concat(&[f, r], axis)
    }
}

/// Attentive statistics pooling with channel-dependent attention over
/// `[x_t ; global mean ; global std]` context.
#[derive(Clone, Debug)]
pub struct AttentivePool {
    pub attend: Conv1d,
    pub score: Conv1d,
    pub channels: usize,
}

impl AttentivePool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        attention: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attend: Conv1d::new(store, &format!("{prefix}.attend"), 3 * channels, attention, 1, 1, rng)?,
            score: Conv1d::new(store, &format!("{prefix}.score"), attention, channels, 1, 1, rng)?,
            channels,
        })
    }

    /// `[B,]C×T` → `[B,]2C` holding attention-weighted mean then std.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let alpha = self.attention(s, x)?;
        let t_axis = s.value(x).rank() - 1;
        let g = &mut s.graph;
        let ax = g.mul(alpha, x)?;
        let mu = g.reduce(ax, Reduce::Sum, t_axis)?;
        let x2 = g.mul(x, x)?;
        let ax2 = g.mul(alpha, x2)?;
        let m2 = g.reduce(ax2, Reduce::Sum, t_axis)?;
        let mu2 = g.mul(mu, mu)?;
        let var = g.sub(m2, mu2)?;
        let sigma = g.sqrt_clamp(var, STD_EPS)?;
        let out_axis = g.value(mu).rank() - 1;
        g.concat(&[mu, sigma], out_axis)
    }

    /// Attention weights `α` (`[B,]C×T`), softmax-normalized over frames.
    pub fn attention(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.value(x).shape().to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 2] != self.channels {
            return Err(shape_err!("pooling expects {} channels, got {:?}", self.channels, shape));
        }
        let (c_axis, t_axis, frames) = (rank - 2, rank - 1, shape[rank - 1]);
        let g = &mut s.graph;
        let mean = g.reduce(x, Reduce::Mean, t_axis)?;
        let std = g.reduce(x, Reduce::Std, t_axis)?;
        let mean_t = g.broadcast_time(mean, frames)?;
        let std_t = g.broadcast_time(std, frames)?;
        let ctx = g.concat(&[x, mean_t, std_t], c_axis)?;
        let a = self.attend.forward(s, ctx)?;
        let a = s.graph.tanh(a)?;
        let logits = self.score.forward(s, a)?;
        s.graph.softmax(logits)
    }

    pub fn param_count(channels: usize, attention: usize) -> usize {
        3 * channels * attention + attention + attention * channels + channels
    }
}
