//! Multi-scale context blocks.
//!
//! All four variants wrap a Res2-style hierarchy between two pointwise
//! convolutions `f1`/`f2`, followed by squeeze-excitation and a residual:
//!
//! * [`Variant::SeRes2`]: the baseline; subset `i` sees subsets `< i`.
//! * [`Variant::SeBiRes2`]: a forward and a reversed hierarchy with separate
//!   kernels, summed subset-wise before `f2`.
//! * [`Variant::BiSeRes2`]: two complete baseline blocks, the second fed the
//!   channel-flipped input; their outputs (residuals included) are summed.
//! * [`Variant::SeRes2Bilstm`]: the baseline with every hierarchy kernel
//!   replaced by a Bi-LSTM over frames.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{BiLstm, ConvUnit, LstmCell, SeBlock, UnitStyle};
use crate::params::{ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SeRes2,
    SeBiRes2,
    BiSeRes2,
    SeRes2Bilstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SeRes2, Variant::SeBiRes2, Variant::BiSeRes2, Variant::SeRes2Bilstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SeRes2 => "se_res2",
            Variant::SeBiRes2 => "se_bi_res2",
            Variant::BiSeRes2 => "bi_se_res2",
            Variant::SeRes2Bilstm => "se_res2_bilstm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| invalid!("unknown variant {:?} (expected one of se_res2, se_bi_res2, bi_se_res2, se_res2_bilstm)", s))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub scale: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub se_bottleneck: usize,
    pub variant: Variant,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 2 {
            return Err(invalid!("scale must be ≥ 2, got {}", self.scale));
        }
        if !self.channels.is_multiple_of(self.scale) {
            return Err(invalid!("scale {} does not divide {} channels", self.scale, self.channels));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.dilation == 0 {
            return Err(invalid!("dilation must be ≥ 1"));
        }
        if self.variant == Variant::SeRes2Bilstm && !self.subset_width().is_multiple_of(2) {
            return Err(invalid!(
                "Bi-LSTM hidden size {}/(2·{}) is not an integer",
                self.channels,
                self.scale
            ));
        }
        Ok(())
    }

    pub fn subset_width(&self) -> usize {
        self.channels / self.scale
    }

    /// Closed-form learnable-parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let w = self.subset_width();
        let n = self.scale;
        let k = self.kernel_size;
        // conv weight + bias + BN gamma/beta
        let unit = |ci: usize, co: usize, k: usize| ci * co * k + co + 2 * co;
        let pointwise = 2 * unit(c, c, 1);
        let se = SeBlock::param_count(c, self.se_bottleneck);
        let hierarchy = (n - 1) * unit(w, w, k);
        match self.variant {
            Variant::SeRes2 => pointwise + hierarchy + se,
            Variant::SeBiRes2 => pointwise + 2 * hierarchy + se,
            Variant::BiSeRes2 => 2 * (pointwise + hierarchy + se),
            Variant::SeRes2Bilstm => pointwise + (n - 1) * 2 * LstmCell::param_count(w, w / 2) + se,
        }
    }
}

/// A per-subset transform inside the hierarchy.
pub trait SubsetMap {
    fn apply(&self, s: &mut Session<'_>, x: Var) -> Result<Var>;
}

impl SubsetMap for ConvUnit {
    fn apply(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.forward(s, x)
    }
}

impl SubsetMap for BiLstm {
    fn apply(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.forward(s, x)
    }
}

/// Splits a feature map into `n` equal channel groups, in order.
pub fn split_channels(s: &mut Session<'_>, x: Var, n: usize) -> Result<Vec<Var>> {
    let shape = s.value(x).shape().to_vec();
    let axis = shape.len().checked_sub(2).ok_or_else(|| shape_err!("feature map rank < 2"))?;
    let c = shape[axis];
    if n == 0 || !c.is_multiple_of(n) {
        return Err(invalid!("{} subsets do not divide {} channels", n, c));
    }
    let w = c / n;
    (0..n).map(|i| s.graph.narrow(x, axis, i * w, w)).collect()
}

pub fn concat_channels(s: &mut Session<'_>, subsets: &[Var]) -> Result<Var> {
    let first = subsets.first().ok_or_else(|| invalid!("no subsets to concatenate"))?;
    let axis = s.value(*first).rank() - 2;
    s.graph.concat(subsets, axis)
}

pub fn flip_channels(s: &mut Session<'_>, x: Var) -> Result<Var> {
    let axis = s.value(x).rank().checked_sub(2).ok_or_else(|| shape_err!("feature map rank < 2"))?;
    s.graph.flip(x, axis)
}

/// Forward hierarchy: `y₁ = x₁`, `y₂ = K₂(x₂)`, `yᵢ = Kᵢ(xᵢ + yᵢ₋₁)`.
/// `kernels[j]` serves subset `j + 1` (0-based).
pub fn res2_forward<K: SubsetMap>(s: &mut Session<'_>, subsets: &[Var], kernels: &[K]) -> Result<Vec<Var>> {
    let n = subsets.len();
    if n < 2 || kernels.len() != n - 1 {
        return Err(invalid!("{} subsets need {} kernels, got {}", n, n.saturating_sub(1), kernels.len()));
    }
    let mut ys = Vec::with_capacity(n);
    ys.push(subsets[0]);
    for i in 1..n {
        let input = if i == 1 { subsets[i] } else { s.graph.add(subsets[i], ys[i - 1])? };
        ys.push(kernels[i - 1].apply(s, input)?);
    }
    Ok(ys)
}

/// Reversed hierarchy: `y′_N = x_N`, `y′_{N−1} = K′_{N−1}(x_{N−1})`,
/// `y′ᵢ = K′ᵢ(xᵢ + y′ᵢ₊₁)`. `kernels[j]` serves subset `j` (0-based).
pub fn res2_rev_forward<K: SubsetMap>(s: &mut Session<'_>, subsets: &[Var], kernels: &[K]) -> Result<Vec<Var>> {
    let n = subsets.len();
    if n < 2 || kernels.len() != n - 1 {
        return Err(invalid!("{} subsets need {} kernels, got {}", n, n.saturating_sub(1), kernels.len()));
    }
    let mut ys: Vec<Option<Var>> = vec![None; n];
    ys[n - 1] = Some(subsets[n - 1]);
    for i in (0..n - 1).rev() {
        let input = if i == n - 2 {
            subsets[i]
        } else {
            s.graph.add(subsets[i], ys[i + 1].unwrap())?
        };
        ys[i] = Some(kernels[i].apply(s, input)?);
    }
    Ok(ys.into_iter().map(Option::unwrap).collect())
}

/// The shared outer shell: `f1`, `f2` and squeeze-excitation.
#[derive(Clone, Debug)]
pub struct Shell {
    pub f1: ConvUnit,
    pub f2: ConvUnit,
    pub se: SeBlock,
}

impl Shell {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            f1: ConvUnit::new(store, &format!("{prefix}.f1"), c, c, 1, 1, UnitStyle::ConvBnRelu, rng)?,
            f2: ConvUnit::new(store, &format!("{prefix}.f2"), c, c, 1, 1, UnitStyle::ConvBnRelu, rng)?,
            se: SeBlock::new(store, &format!("{prefix}.se"), c, cfg.se_bottleneck, rng)?,
        })
    }

    /// `SE(f2(concat(inner(split(f1(x)))))) + x`.
    fn run(
        &self,
        s: &mut Session<'_>,
        x: Var,
        scale: usize,
        inner: impl FnOnce(&mut Session<'_>, &[Var]) -> Result<Vec<Var>>,
    ) -> Result<Var> {
        let h = self.f1.forward(s, x)?;
        let subsets = split_channels(s, h, scale)?;
        let ys = inner(s, &subsets)?;
        let merged = concat_channels(s, &ys)?;
        let h = self.f2.forward(s, merged)?;
        let h = self.se.forward(s, h)?;
        s.graph.add(h, x)
    }
}

/// Baseline SE-Res2Block.
#[derive(Clone, Debug)]
pub struct SeRes2Block {
    pub shell: Shell,
    pub kernels: Vec<ConvUnit>,
    pub scale: usize,
}

impl SeRes2Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let shell = Shell::new(store, prefix, cfg, rng)?;
        let kernels = hierarchy_units(store, &format!("{prefix}.res2"), cfg, rng)?;
        Ok(Self {
            shell,
            kernels,
            scale: cfg.scale,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.shell.run(s, x, self.scale, |s, xs| res2_forward(s, xs, &self.kernels))
    }
}

/// Forward and reversed hierarchies summed subset-wise.
#[derive(Clone, Debug)]
pub struct SeBiRes2Block {
    pub shell: Shell,
    pub fwd: Vec<ConvUnit>,
    pub rev: Vec<ConvUnit>,
    pub scale: usize,
}

impl SeBiRes2Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let shell = Shell::new(store, prefix, cfg, rng)?;
        let fwd = hierarchy_units(store, &format!("{prefix}.res2"), cfg, rng)?;
        let rev = hierarchy_units(store, &format!("{prefix}.res2_rev"), cfg, rng)?;
        Ok(Self {
            shell,
            fwd,
            rev,
            scale: cfg.scale,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.shell.run(s, x, self.scale, |s, xs| {
            let y = res2_forward(s, xs, &self.fwd)?;
            let yr = res2_rev_forward(s, xs, &self.rev)?;
            y.iter().zip(&yr).map(|(&a, &b)| s.graph.add(a, b)).collect()
        })
    }
}

/// Two baseline blocks over `X` and its channel flip, summed.
#[derive(Clone, Debug)]
pub struct BiSeRes2Block {
    pub direct: SeRes2Block,
    pub flipped: SeRes2Block,
}

impl BiSeRes2Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            direct: SeRes2Block::new(store, &format!("{prefix}.direct"), cfg, rng)?,
            flipped: SeRes2Block::new(store, &format!("{prefix}.flipped"), cfg, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let a = self.direct.forward(s, x)?;
        let xr = flip_channels(s, x)?;
        let b = self.flipped.forward(s, xr)?;
        s.graph.add(a, b)
    }
}

/// Baseline hierarchy with Bi-LSTM kernels of hidden size `C/(2N)`.
#[derive(Clone, Debug)]
pub struct SeRes2BiLstmBlock {
    pub shell: Shell,
    pub kernels: Vec<BiLstm>,
    pub scale: usize,
}

impl SeRes2BiLstmBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let shell = Shell::new(store, prefix, cfg, rng)?;
        let w = cfg.subset_width();
        let kernels = (1..cfg.scale)
            .map(|i| BiLstm::new(store, &format!("{prefix}.bilstm.{i}"), w, w / 2, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            shell,
            kernels,
            scale: cfg.scale,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.shell.run(s, x, self.scale, |s, xs| res2_forward(s, xs, &self.kernels))
    }
}

fn hierarchy_units<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut R,
) -> Result<Vec<ConvUnit>> {
    let w = cfg.subset_width();
    (1..cfg.scale)
        .map(|i| {
            ConvUnit::new(
                store,
                &format!("{prefix}.{i}"),
                w,
                w,
                cfg.kernel_size,
                cfg.dilation,
                UnitStyle::ConvBnRelu,
                rng,
            )
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum BlockKind {
    SeRes2(SeRes2Block),
    SeBiRes2(SeBiRes2Block),
    BiSeRes2(BiSeRes2Block),
    SeRes2BiLstm(SeRes2BiLstmBlock),
}

/// Any of the four block variants together with its configuration.
#[derive(Clone, Debug)]
pub struct ContextBlock {
    pub config: BlockConfig,
    pub kind: BlockKind,
}

impl ContextBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let kind = match cfg.variant {
            Variant::SeRes2 => BlockKind::SeRes2(SeRes2Block::new(store, prefix, cfg, rng)?),
            Variant::SeBiRes2 => BlockKind::SeBiRes2(SeBiRes2Block::new(store, prefix, cfg, rng)?),
            Variant::BiSeRes2 => BlockKind::BiSeRes2(BiSeRes2Block::new(store, prefix, cfg, rng)?),
            Variant::SeRes2Bilstm => BlockKind::SeRes2BiLstm(SeRes2BiLstmBlock::new(store, prefix, cfg, rng)?),
        };
        Ok(Self {
            config: cfg.clone(),
            kind,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.value(x).shape();
        if shape.len() < 2 || shape[shape.len() - 2] != self.config.channels {
            return Err(shape_err!("block expects {} channels, got {:?}", self.config.channels, shape));
        }
        match &self.kind {
            BlockKind::SeRes2(b) => b.forward(s, x),
            BlockKind::SeBiRes2(b) => b.forward(s, x),
            BlockKind::BiSeRes2(b) => b.forward(s, x),
            BlockKind::SeRes2BiLstm(b) => b.forward(s, x),
        }
    }

    /// Every `f2` unit in the block (two for the dual-stream variant).
    pub fn f2_units(&self) -> Vec<&ConvUnit> {
        match &self.kind {
            BlockKind::SeRes2(b) => vec![&b.shell.f2],
            BlockKind::SeBiRes2(b) => vec![&b.shell.f2],
            BlockKind::BiSeRes2(b) => vec![&b.direct.shell.f2, &b.flipped.shell.f2],
            BlockKind::SeRes2BiLstm(b) => vec![&b.shell.f2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::params::{Mode, ParamKind};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant, channels: usize, scale: usize) -> BlockConfig {
        BlockConfig {
            channels,
            scale,
            kernel_size: 3,
            dilation: 2,
            se_bottleneck: 4,
            variant,
        }
    }

    /// Bare convolutions with a centered identity tap.
    fn identity_units(store: &mut ParamStore, prefix: &str, count: usize, w: usize) -> Vec<ConvUnit> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..count)
            .map(|i| {
                let u = ConvUnit::new(store, &format!("{prefix}.{i}"), w, w, 3, 1, UnitStyle::ConvOnly, &mut rng).unwrap();
                let mut k = Tensor::zeros(&[w, w, 3]);
                for c in 0..w {
                    k.set(&[c, c, 1], 1.0);
                }
                store.set(u.conv.weight, k).unwrap();
                store.set(u.conv.bias.unwrap(), Tensor::zeros(&[w])).unwrap();
                u
            })
            .collect()
    }

    fn subsets(s: &mut Session<'_>, n: usize, w: usize, t: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| s.input(Tensor::randn(&[w, t], &mut rng), false).unwrap()).collect()
    }

    /// Right-nested sum `v₀ + (v₁ + (… + vₖ))`, the recursion's association order.
    fn sum(s: &Session<'_>, vs: &[Var]) -> Tensor {
        let mut acc = s.value(*vs.last().unwrap()).clone();
        for &v in vs.iter().rev().skip(1) {
            acc = s.value(v).zip_map(&acc, |a, b| a + b).unwrap();
        }
        acc
    }

    #[test]
    fn identity_kernels_follow_hand_recursions() {
        let mut store = ParamStore::new();
        let fwd = identity_units(&mut store, "k", 3, 2);
        let rev = identity_units(&mut store, "kr", 3, 2);
        let mut s = Session::new(&store, Mode::Train);
        let x = subsets(&mut s, 4, 2, 5, 1);
        let y = res2_forward(&mut s, &x, &fwd).unwrap();
        let yr = res2_rev_forward(&mut s, &x, &rev).unwrap();
        let expect_fwd = [vec![x[0]], vec![x[1]], vec![x[2], x[1]], vec![x[3], x[2], x[1]]];
        let expect_rev = [vec![x[0], x[1], x[2]], vec![x[1], x[2]], vec![x[2]], vec![x[3]]];
        for i in 0..4 {
            assert_eq!(s.value(y[i]), &sum(&s, &expect_fwd[i]), "forward subset {i}");
            assert_eq!(s.value(yr[i]), &sum(&s, &expect_rev[i]), "reverse subset {i}");
        }
    }

    #[test]
    fn zero_kernels_keep_only_the_pass_through_subset() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let units = hierarchy_units(&mut store, "k", &cfg(Variant::SeRes2, 8, 4), &mut rng).unwrap();
        for u in &units {
            for p in [u.conv.weight, u.conv.bias.unwrap()] {
                let shape = store.get(p).shape().to_vec();
                store.set(p, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut s = Session::new(&store, Mode::Eval);
        let x = subsets(&mut s, 4, 2, 6, 2);
        let y = res2_forward(&mut s, &x, &units).unwrap();
        let yr = res2_rev_forward(&mut s, &x, &units).unwrap();
        assert_eq!(s.value(y[0]), s.value(x[0]));
        assert_eq!(s.value(yr[3]), s.value(x[3]));
        for i in 1..4 {
            assert!(s.value(y[i]).data().iter().all(|&v| v == 0.0));
            assert!(s.value(yr[i - 1]).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn kernel_count_is_checked() {
        let mut store = ParamStore::new();
        let units = identity_units(&mut store, "k", 2, 2);
        let mut s = Session::new(&store, Mode::Train);
        let x = subsets(&mut s, 4, 2, 3, 0);
        assert!(res2_forward(&mut s, &x, &units).is_err());
        assert!(res2_rev_forward(&mut s, &x, &units).is_err());
    }

    #[test]
    fn reverse_hierarchy_is_mirrored_forward_hierarchy() {
        for seed in 0..10 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 + (seed as usize % 5);
            let units = hierarchy_units(&mut store, "k", &cfg(Variant::SeRes2, 3 * n, n), &mut rng).unwrap();
            let mut s = Session::new(&store, Mode::Train);
            let x = subsets(&mut s, n, 3, 7, seed + 100);
            let direct = res2_rev_forward(&mut s, &x, &units).unwrap();
            let xr: Vec<Var> = x.iter().rev().copied().collect();
            let kr: Vec<ConvUnit> = units.iter().rev().cloned().collect();
            let mut mirrored = res2_forward(&mut s, &xr, &kr).unwrap();
            mirrored.reverse();
            for (a, b) in direct.iter().zip(&mirrored) {
                assert_eq!(s.value(*a), s.value(*b));
            }
        }
    }

    fn zero_f2(store: &mut ParamStore, block: &ContextBlock) {
        for unit in block.f2_units() {
            let mut ids = vec![unit.conv.weight, unit.conv.bias.unwrap()];
            ids.extend(unit.bn.as_ref().map(|bn| bn.beta));
            for p in ids {
                let shape = store.get(p).shape().to_vec();
                store.set(p, Tensor::zeros(&shape)).unwrap();
            }
        }
    }

    #[test]
    fn zeroed_f2_makes_every_variant_the_identity() {
        for variant in Variant::ALL {
            for mode in [Mode::Train, Mode::Eval] {
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let block = ContextBlock::new(&mut store, "b", &cfg(variant, 16, 4), &mut rng).unwrap();
                zero_f2(&mut store, &block);
                let x = Tensor::randn(&[2, 16, 5], &mut rng);
                let mut s = Session::new(&store, mode);
                let xv = s.input(x.clone(), false).unwrap();
                let y = block.forward(&mut s, xv).unwrap();
                let expected = match variant {
                    // Two identity streams: X + flip(X).
                    Variant::BiSeRes2 => {
                        let f = s.graph.flip(xv, 1).unwrap();
                        s.value(xv).zip_map(s.value(f), |a, b| a + b).unwrap()
                    }
                    _ => x,
                };
                assert_eq!(s.value(y), &expected, "{variant} {mode:?}");
            }
        }
    }

    /// Copies every `{prefix}.direct.*` value onto its `{prefix}.flipped.*` twin.
    fn tie_streams(store: &mut ParamStore, prefix: &str) {
        let pairs: Vec<_> = store
            .entries()
            .iter()
            .filter_map(|e| {
                let rest = e.name.strip_prefix(&format!("{prefix}.direct"))?;
                Some((store.find(&format!("{prefix}.flipped{rest}")).unwrap(), e.value.clone()))
            })
            .collect();
        assert!(!pairs.is_empty());
        for (id, v) in pairs {
            store.set(id, v).unwrap();
        }
    }

    #[test]
    fn tied_dual_stream_on_flip_symmetric_input_doubles() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = ContextBlock::new(&mut store, "b", &cfg(Variant::BiSeRes2, 8, 4), &mut rng).unwrap();
        tie_streams(&mut store, "b");
        let half = Tensor::randn(&[4, 6], &mut rng);
        let mut x = Tensor::zeros(&[8, 6]);
        for c in 0..4 {
            for t in 0..6 {
                x.set(&[c, t], half.at(&[c, t]));
                x.set(&[7 - c, t], half.at(&[c, t]));
            }
        }
        let BlockKind::BiSeRes2(inner) = &block.kind else { unreachable!() };
        let mut s = Session::new(&store, Mode::Train);
        let xv = s.input(x, false).unwrap();
        let y = block.forward(&mut s, xv).unwrap();
        let single = inner.direct.forward(&mut s, xv).unwrap();
        assert_eq!(s.value(y), &s.value(single).map(|v| 2.0 * v));
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_dual_stream() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = ContextBlock::new(&mut store, "b", &cfg(Variant::BiSeRes2, 8, 4), &mut rng).unwrap();
        let biases: Vec<_> = store.ids().filter(|&id| store.entry(id).name.ends_with(".bias")).collect();
        for id in biases {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.input(Tensor::zeros(&[8, 5]), false).unwrap();
        let y = block.forward(&mut s, x).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_bilstm_kernels_keep_only_first_subset() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kernels: Vec<BiLstm> = (0..3).map(|i| BiLstm::new(&mut store, &format!("l{i}"), 4, 2, &mut rng).unwrap()).collect();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut s = Session::new(&store, Mode::Train);
        let x = subsets(&mut s, 4, 4, 6, 7);
        let y = res2_forward(&mut s, &x, &kernels).unwrap();
        assert_eq!(s.value(y[0]), s.value(x[0]));
        for v in &y[1..] {
            assert_eq!(s.value(*v).shape(), &[4, 6]);
            assert!(s.value(*v).data().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for variant in Variant::ALL {
            for (c, n) in [(16, 4), (64, 4), (48, 8), (128, 8)] {
                let config = BlockConfig {
                    se_bottleneck: 8,
                    ..cfg(variant, c, n)
                };
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                ContextBlock::new(&mut store, "b", &config, &mut rng).unwrap();
                assert_eq!(store.count(&[ParamKind::Learnable]), config.param_count(), "{variant} C={c} N={n}");
            }
        }
    }

    #[test]
    fn every_variant_preserves_shape() {
        for variant in Variant::ALL {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let block = ContextBlock::new(&mut store, "b", &cfg(variant, 16, 4), &mut rng).unwrap();
            for shape in [vec![16, 7], vec![3, 16, 4]] {
                let mut s = Session::new(&store, Mode::Train);
                let x = s.input(Tensor::randn(&shape, &mut rng), false).unwrap();
                let y = block.forward(&mut s, x).unwrap();
                assert_eq!(s.value(y).shape(), &shape[..]);
            }
            let mut s = Session::new(&store, Mode::Train);
            let x = s.input(Tensor::zeros(&[12, 4]), false).unwrap();
            assert!(block.forward(&mut s, x).is_err());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = cfg(Variant::SeRes2Bilstm, 16, 4);
        assert!(ok.validate().is_ok());
        for bad in [
            BlockConfig { scale: 3, ..ok.clone() },
            BlockConfig { scale: 1, channels: 4, ..ok.clone() },
            BlockConfig { kernel_size: 4, ..ok.clone() },
            BlockConfig { dilation: 0, ..ok.clone() },
            BlockConfig { channels: 12, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(BlockConfig { channels: 12, variant: Variant::SeRes2, ..ok }.validate().is_ok());
        assert_eq!("bi_se_res2".parse::<Variant>().unwrap(), Variant::BiSeRes2);
        assert!("res2".parse::<Variant>().is_err());
    }

    /// Straight-line eval-mode baseline block over a single `[C, T]` map.
    fn oracle_se_res2(store: &ParamStore, block: &SeRes2Block, x: &Tensor) -> Tensor {
        let unit = |u: &ConvUnit, x: &Tensor| -> Tensor {
            let w = store.get(u.conv.weight);
            let b = store.get(u.conv.bias.unwrap());
            let mut y = kernels::conv1d(x, w, Some(b), u.conv.dilation).unwrap();
            let bn = u.bn.as_ref().unwrap();
            let (c, t) = (y.shape()[0], y.shape()[1]);
            for ch in 0..c {
                let m = store.get(bn.running_mean).data()[ch];
                let v = store.get(bn.running_var).data()[ch];
                let g = store.get(bn.gamma).data()[ch];
                let be = store.get(bn.beta).data()[ch];
                for i in 0..t {
                    let z = (y.at(&[ch, i]) - m) / (v + 1e-5).sqrt() * g + be;
                    y.set(&[ch, i], z.max(0.0));
                }
            }
            y
        };
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let n = block.scale;
        let w = c / n;
        let h = unit(&block.shell.f1, x);
        let rows = |m: &Tensor, i: usize| Tensor::new(&[w, t], m.data()[i * w * t..(i + 1) * w * t].to_vec()).unwrap();
        let mut ys: Vec<Tensor> = vec![rows(&h, 0)];
        for i in 1..n {
            let mut input = rows(&h, i);
            if i > 1 {
                input.add_assign(&ys[i - 1]);
            }
            ys.push(unit(&block.kernels[i - 1], &input));
        }
        let merged = Tensor::new(&[c, t], ys.iter().flat_map(|y| y.data().to_vec()).collect()).unwrap();
        let h = unit(&block.shell.f2, &merged);
        let se = &block.shell.se;
        let mean: Vec<f64> = (0..c).map(|ch| h.row(ch).iter().sum::<f64>() / t as f64).collect();
        let dense = |l: &crate::nn::Linear, v: &[f64]| -> Vec<f64> {
            let wt = store.get(l.weight);
            let b = store.get(l.bias).data();
            (0..b.len()).map(|o| b[o] + wt.row(o).iter().zip(v).map(|(a, b)| a * b).sum::<f64>()).collect()
        };
        let z: Vec<f64> = dense(&se.squeeze, &mean).into_iter().map(|v| v.max(0.0)).collect();
        let sc: Vec<f64> = dense(&se.excite, &z).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let mut out = x.clone();
        for ch in 0..c {
            for i in 0..t {
                out.set(&[ch, i], sc[ch] * h.at(&[ch, i]) + x.at(&[ch, i]));
            }
        }
        out
    }

    #[test]
    fn baseline_block_matches_straight_line_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let block = ContextBlock::new(&mut store, "b", &cfg(Variant::SeRes2, 8, 4), &mut rng).unwrap();
        // Non-trivial running statistics and affine terms.
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.entry(id).name.clone();
            let shape = store.get(id).shape().to_vec();
            if name.contains(".bn.") {
                let v = Tensor::uniform(&shape, 0.5, &mut rng).map(|v| if name.ends_with("var") { 1.0 + v } else { v });
                store.set(id, v).unwrap();
            }
        }
        let BlockKind::SeRes2(inner) = &block.kind else { unreachable!() };
        let x = Tensor::randn(&[8, 9], &mut rng);
        let mut s = Session::inference(&store, Mode::Eval);
        let xv = s.input(x.clone(), false).unwrap();
        let y = block.forward(&mut s, xv).unwrap();
        let oracle = oracle_se_res2(&store, inner, &x);
        for (a, b) in s.value(y).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}
