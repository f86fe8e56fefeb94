//! The TDNN backbone with a selectable context block.
//!
//! Topology: stem conv (k=5) → three context blocks chained with dilations
//! 2, 3, 4 → concatenation of all block outputs → multi-layer feature
//! aggregation (MFA) pointwise conv → attentive statistics pooling → batch
//! norm → affine embedding. A speaker classifier weight is kept alongside
//! for training but excluded from the reported parameter count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{BlockConfig, ContextBlock, Variant};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{AttentivePool, BatchNorm, ConvUnit, Linear, UnitStyle};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub variant: Variant,
    pub scale: usize,
    pub kernel_size: usize,
    pub stem_kernel: usize,
    pub dilations: Vec<usize>,
    pub mel_bins: usize,
    pub embed_dim: usize,
    pub mfa_channels: usize,
    pub attention_channels: usize,
    pub se_bottleneck: usize,
    pub num_speakers: usize,
}

impl ModelConfig {
    /// Full-size defaults for a given width and variant.
    pub fn new(width: usize, variant: Variant) -> Self {
        Self {
            width,
            variant,
            scale: 8,
            kernel_size: 3,
            stem_kernel: 5,
            dilations: vec![2, 3, 4],
            mel_bins: 80,
            embed_dim: 192,
            mfa_channels: 1536,
            attention_channels: 128,
            se_bottleneck: 128,
            num_speakers: 2,
        }
    }

    /// Desk-scale configuration: scale 4 and MFA/attention/SE widths that
    /// shrink with `width`.
    pub fn toy(width: usize, variant: Variant, num_speakers: usize) -> Self {
        Self {
            scale: 4,
            mfa_channels: 3 * width,
            attention_channels: (width / 2).max(1),
            se_bottleneck: (width / 4).max(1),
            num_speakers,
            ..Self::new(width, variant)
        }
    }

    pub fn block_config(&self, dilation: usize) -> BlockConfig {
        BlockConfig {
            channels: self.width,
            scale: self.scale,
            kernel_size: self.kernel_size,
            dilation,
            se_bottleneck: self.se_bottleneck,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.scale == 0 || !self.width.is_multiple_of(2 * self.scale) {
            return Err(invalid!("width {} must be a positive multiple of 2·scale ({})", self.width, 2 * self.scale));
        }
        if self.dilations.is_empty() {
            return Err(invalid!("at least one block dilation is required"));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(invalid!("stem kernel must be odd, got {}", self.stem_kernel));
        }
        for (name, v) in [
            ("mel_bins", self.mel_bins),
            ("embed_dim", self.embed_dim),
            ("mfa_channels", self.mfa_channels),
            ("attention_channels", self.attention_channels),
        ] {
            if v == 0 {
                return Err(invalid!("{} must be positive", name));
            }
        }
        if self.num_speakers == 0 {
            return Err(invalid!("num_speakers must be positive"));
        }
        if self.se_bottleneck == 0 || self.se_bottleneck >= self.width {
            return Err(invalid!("SE bottleneck {} must be in 1..{}", self.se_bottleneck, self.width));
        }
        for &d in &self.dilations {
            self.block_config(d).validate()?;
        }
        Ok(())
    }

    /// Closed-form learnable count, optionally including the classifier.
    pub fn param_count(&self, include_classifier: bool) -> usize {
        let c = self.width;
        let unit = |ci: usize, co: usize, k: usize| ci * co * k + 3 * co;
        let blocks: usize = self.dilations.iter().map(|&d| self.block_config(d).param_count()).sum();
        let mfa_in = c * self.dilations.len();
        let pooled = 2 * self.mfa_channels;
        let total = unit(self.mel_bins, c, self.stem_kernel)
            + blocks
            + unit(mfa_in, self.mfa_channels, 1)
            + AttentivePool::param_count(self.mfa_channels, self.attention_channels)
            + 2 * pooled
            + pooled * self.embed_dim
            + self.embed_dim;
        total + if include_classifier { self.num_speakers * self.embed_dim } else { 0 }
    }
}

/// Reported parameter counts for the four variants at width 1024.
pub fn reference_param_count(variant: Variant) -> f64 {
    match variant {
        Variant::SeRes2 => 14.73e6,
        Variant::SeBiRes2 => 15.72e6,
        Variant::BiSeRes2 => 22.49e6,
        Variant::SeRes2Bilstm => 15.73e6,
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stem: ConvUnit,
    pub blocks: Vec<ContextBlock>,
    pub mfa: ConvUnit,
    pub pool: AttentivePool,
    pub pool_bn: BatchNorm,
    pub embedding: Linear,
    pub classifier: ParamId,
}

impl Model {
    /// Deterministic construction: equal `(config, seed)` give bit-identical
    /// parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = ConvUnit::new(
            &mut params,
            "stem",
            config.mel_bins,
            c,
            config.stem_kernel,
            1,
            UnitStyle::ConvBnRelu,
            &mut rng,
        )?;
        let blocks = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| ContextBlock::new(&mut params, &format!("blocks.{i}"), &config.block_config(d), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mfa = ConvUnit::new(
            &mut params,
            "mfa",
            c * blocks.len(),
            config.mfa_channels,
            1,
            1,
            UnitStyle::ConvBnRelu,
            &mut rng,
        )?;
        let pool = AttentivePool::new(&mut params, "pool", config.mfa_channels, config.attention_channels, &mut rng)?;
        let pool_bn = BatchNorm::new(&mut params, "pool_bn", 2 * config.mfa_channels)?;
        let embedding = Linear::new(&mut params, "embedding", 2 * config.mfa_channels, config.embed_dim, &mut rng)?;
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        let classifier = params.add(
            "classifier.weight",
            ParamKind::Head,
            Tensor::uniform(&[config.num_speakers, config.embed_dim], bound, &mut rng),
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            stem,
            blocks,
            mfa,
            pool,
            pool_bn,
            embedding,
            classifier,
        })
    }

    /// Exact learnable count by enumerating the parameter tree.
    pub fn param_count(&self, include_classifier: bool) -> usize {
        if include_classifier {
            self.params.count(&[ParamKind::Learnable, ParamKind::Head])
        } else {
            self.params.count(&[ParamKind::Learnable])
        }
    }

    /// Records the forward pass of `features` (`mel×T` or `B×mel×T`) into
    /// the session and returns the embedding node (`[B,]embed_dim`).
    pub fn forward(&self, s: &mut Session<'_>, features: Var) -> Result<Var> {
        let shape = s.value(features).shape().to_vec();
        if !(2..=3).contains(&shape.len()) || shape[shape.len() - 2] != self.config.mel_bins {
            return Err(shape_err!("expected {}×T features, got {:?}", self.config.mel_bins, shape));
        }
        let c_axis = shape.len() - 2;
        let mut h = self.stem.forward(s, features)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(s, h)?;
            outs.push(h);
        }
        let merged = s.graph.concat(&outs, c_axis)?;
        let h = self.mfa.forward(s, merged)?;
        let pooled = self.pool.forward(s, h)?;
        let pooled = self.pool_bn.forward(s, pooled, shape.len() - 2)?;
        self.embedding.forward(s, pooled)
    }

    /// Inference without gradient tracking.
    pub fn embed(&self, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut s = Session::inference(&self.params, mode);
        let x = s.input(features.clone(), false)?;
        let e = self.forward(&mut s, x)?;
        Ok(s.value(e).clone())
    }

    /// Count per top-level component, for reporting.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in self.params.entries() {
            if e.kind != ParamKind::Learnable {
                continue;
            }
            let mut parts = e.name.split('.');
            let head = parts.next().unwrap_or_default();
            let key = if head == "blocks" {
                format!("blocks.{}", parts.next().unwrap_or_default())
            } else {
                head.to_string()
            };
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += e.value.numel(),
                None => out.push((key, e.value.numel())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: Variant) -> ModelConfig {
        ModelConfig {
            mfa_channels: 24,
            attention_channels: 8,
            ..ModelConfig::toy(16, variant, 3)
        }
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for variant in Variant::ALL {
            let cfg = toy(variant);
            let m = Model::build(&cfg, 0).unwrap();
            assert_eq!(m.param_count(false), cfg.param_count(false), "{variant}");
            assert_eq!(m.param_count(true), cfg.param_count(true));
            assert_eq!(m.param_count(true) - m.param_count(false), 3 * 192);
            let total: usize = m.param_breakdown().iter().map(|(_, n)| n).sum();
            assert_eq!(total, m.param_count(false));
        }
    }

    #[test]
    fn full_width_counts_are_near_reference() {
        for variant in Variant::ALL {
            let n = ModelConfig::new(1024, variant).param_count(false) as f64;
            let dev = (n - reference_param_count(variant)).abs() / reference_param_count(variant);
            assert!(dev <= 0.02, "{variant}: {n} ({:.2}%)", 100.0 * dev);
        }
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[80, 12], &mut rng);
        for variant in Variant::ALL {
            let a = Model::build(&toy(variant), 7).unwrap();
            let b = Model::build(&toy(variant), 7).unwrap();
            let ea = a.embed(&x, Mode::Eval).unwrap();
            assert_eq!(ea.shape(), &[192]);
            assert_eq!(ea, b.embed(&x, Mode::Eval).unwrap());
            assert_eq!(ea, a.embed(&x, Mode::Eval).unwrap());
            let doubled = a.embed(&x.map(|v| 2.0 * v), Mode::Eval).unwrap();
            assert_ne!(ea, doubled);
        }
    }

    #[test]
    fn single_frame_and_batches() {
        let m = Model::build(&toy(Variant::SeRes2), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(m.embed(&Tensor::randn(&[80, 1], &mut rng), Mode::Eval).unwrap().shape(), &[192]);
        let e = m.embed(&Tensor::randn(&[3, 80, 6], &mut rng), Mode::Train).unwrap();
        assert_eq!(e.shape(), &[3, 192]);
        assert!(m.embed(&Tensor::randn(&[40, 6], &mut rng), Mode::Eval).is_err());
    }

    #[test]
    fn toy_scale_runs_on_two_seconds() {
        let m = Model::build(&ModelConfig::toy(64, Variant::SeRes2, 20), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = m.embed(&Tensor::randn(&[80, 200], &mut rng), Mode::Eval).unwrap();
        assert_eq!(e.shape(), &[192]);
        assert!(e.is_finite());
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = toy(Variant::SeRes2Bilstm);
        assert!(ok.validate().is_ok());
        for bad in [
            ModelConfig { width: 20, ..ok.clone() },
            ModelConfig { dilations: vec![], ..ok.clone() },
            ModelConfig { se_bottleneck: 16, ..ok.clone() },
            ModelConfig { stem_kernel: 4, ..ok.clone() },
            ModelConfig { mfa_channels: 0, ..ok.clone() },
            ModelConfig { dilations: vec![2, 0, 4], ..ok.clone() },
        ] {
            assert!(Model::build(&bad, 0).is_err(), "{bad:?}");
        }
    }
}
