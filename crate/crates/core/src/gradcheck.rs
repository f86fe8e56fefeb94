//! Central finite-difference checks of reverse-mode gradients.
//!
//! A check builds a graph from a parameter store and input tensors, reduces
//! its output to a scalar by projecting onto a fixed random tensor, and
//! compares the analytic gradient against `(f(θ+h) − f(θ−h)) / 2h` on a
//! deterministic sample of coordinates. The reported error is the norm-wise
//! relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over the sampled coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpTag, Reduce, Var, STD_EPS};
use crate::blocks::{BlockConfig, ContextBlock, Variant};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{AttentivePool, BiLstm, ConvUnit, Direction, Linear, LstmCell, SeBlock, UnitStyle};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Upper bound on perturbed coordinates; `usize::MAX` checks them all.
    pub max_coords: usize,
    pub seed: u64,
    pub mode: Mode,
    pub fault: Option<OpTag>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: usize::MAX,
            seed: 0,
            mode: Mode::Train,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub threshold: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err <= self.threshold
    }
}

#[derive(Clone, Copy, Debug)]
enum Coord {
    Input(usize, usize),
    Param(ParamId, usize),
}

/// Runs one gradient check. `build` receives the session and one leaf per
/// input tensor and returns the output node.
pub fn check<F>(
    name: &str,
    threshold: f64,
    store: &mut ParamStore,
    inputs: &[Tensor],
    opts: &CheckOptions,
    build: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let (probe, analytic_inputs, analytic_params) = {
        let mut s = Session::new(store, opts.mode);
        if let Some(tag) = opts.fault {
            s.inject_fault(tag);
        }
        let vars = inputs
            .iter()
            .map(|t| s.input(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut s, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9E37_79B9_7F4A_7C15);
        let probe = Tensor::randn(s.value(out).shape(), &mut rng);
        let loss = s.graph.project(out, probe.clone())?;
        let (grads, params) = s.param_grads(loss)?;
        let ins: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (probe, ins, params)
    };

    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.numel()).map(|j| Coord::Input(i, j)));
    }
    for (p, g) in &analytic_params {
        coords.extend((0..g.numel()).map(|j| Coord::Param(*p, j)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if coords.len() > opts.max_coords {
        let mut picked = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut s = Session::inference(store, opts.mode);
        let vars = inputs
            .iter()
            .map(|t| s.input(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut s, &vars)?;
        Ok(s.value(out).dot(&probe))
    };

    let mut inputs = inputs.to_vec();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let h = opts.step;
    for &c in &coords {
        let (analytic, plus, minus) = match c {
            Coord::Input(i, j) => {
                let orig = inputs[i].data()[j];
                inputs[i].data_mut()[j] = orig + h;
                let plus = eval(store, &inputs)?;
                inputs[i].data_mut()[j] = orig - h;
                let minus = eval(store, &inputs)?;
                inputs[i].data_mut()[j] = orig;
                (analytic_inputs[i].data()[j], plus, minus)
            }
            Coord::Param(p, j) => {
                let orig = store.get(p).data()[j];
                store.get_mut(p).data_mut()[j] = orig + h;
                let plus = eval(store, &inputs)?;
                store.get_mut(p).data_mut()[j] = orig - h;
                let minus = eval(store, &inputs)?;
                store.get_mut(p).data_mut()[j] = orig;
                let g = analytic_params.iter().find(|(q, _)| *q == p).map(|(_, g)| g.data()[j]).unwrap();
                (g, plus, minus)
            }
        };
        let numeric = (plus - minus) / (2.0 * h);
        diff2 += (analytic - numeric).powi(2);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_err = if denom == 0.0 { diff2.sqrt() } else { diff2.sqrt() / denom };
    Ok(CheckResult {
        name: name.to_string(),
        rel_err,
        threshold,
        coords: coords.len(),
    })
}


/// Granularity of a registered check; fixes its tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Op,
    Layer,
    Block,
    Model,
}

impl Level {
    pub fn threshold(self) -> f64 {
        match self {
            Level::Op => 1e-6,
            Level::Layer => 1e-5,
            Level::Block => 1e-4,
            Level::Model => 1e-3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Op => "op",
            Level::Layer => "layer",
            Level::Block => "block",
            Level::Model => "model",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub level: Level,
    pub result: CheckResult,
}

type Builder = Box<dyn Fn(&mut Session<'_>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    level: Level,
    store: ParamStore,
    inputs: Vec<Tensor>,
    max_coords: usize,
    build: Builder,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng)
}

fn op_case(
    name: &str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Session<'_>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        level: Level::Op,
        store: ParamStore::new(),
        inputs,
        max_coords: usize::MAX,
        build: Box::new(build),
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let fm = |rng: &mut ChaCha8Rng| randn(rng, &[2, 4, 5]);
    let pos = |t: Tensor| t.map(|v| v * v + 0.5);
    let mut v = vec![
        op_case("conv1d", vec![fm(rng), randn(rng, &[3, 4, 3]), randn(rng, &[3])], |s, x| {
            s.graph.conv1d(x[0], x[1], Some(x[2]), 2)
        }),
        op_case("affine", vec![randn(rng, &[3, 5]), randn(rng, &[4, 5]), randn(rng, &[4])], |s, x| {
            s.graph.affine(x[0], x[1], Some(x[2]))
        }),
        op_case("relu", vec![fm(rng)], |s, x| s.graph.relu(x[0])),
        op_case("sigmoid", vec![fm(rng)], |s, x| s.graph.sigmoid(x[0])),
        op_case("tanh", vec![fm(rng)], |s, x| s.graph.tanh(x[0])),
        op_case("add", vec![fm(rng), fm(rng)], |s, x| s.graph.add(x[0], x[1])),
        op_case("sub", vec![fm(rng), fm(rng)], |s, x| s.graph.sub(x[0], x[1])),
        op_case("mul", vec![fm(rng), fm(rng)], |s, x| s.graph.mul(x[0], x[1])),
        op_case("scale", vec![fm(rng)], |s, x| s.graph.scale(x[0], -1.7)),
        op_case("narrow", vec![fm(rng)], |s, x| s.graph.narrow(x[0], 1, 1, 2)),
        op_case("concat", vec![fm(rng), randn(rng, &[2, 2, 5])], |s, x| s.graph.concat(&[x[0], x[1]], 1)),
        op_case("flip", vec![fm(rng)], |s, x| s.graph.flip(x[0], 1)),
        op_case("scale_channels", vec![fm(rng), randn(rng, &[2, 4])], |s, x| {
            s.graph.scale_channels(x[0], x[1])
        }),
        op_case("broadcast_time", vec![randn(rng, &[2, 4])], |s, x| s.graph.broadcast_time(x[0], 3)),
        op_case("softmax", vec![fm(rng)], |s, x| s.graph.softmax(x[0])),
        op_case("sqrt_clamp", vec![pos(fm(rng))], |s, x| s.graph.sqrt_clamp(x[0], STD_EPS)),
        op_case("batch_norm", vec![fm(rng), randn(rng, &[4]), randn(rng, &[4])], |s, x| {
            Ok(s.graph.batch_norm(x[0], x[1], x[2], 1, 1e-5, None)?.0)
        }),
        op_case("aam_softmax", vec![randn(rng, &[4, 5]), randn(rng, &[3, 5])], |s, x| {
            s.graph.aam_softmax(x[0], x[1], &[0, 2, 1, 2], 0.2, 30.0)
        }),
    ];
    for (kind, name) in [
        (Reduce::Mean, "reduce_mean"),
        (Reduce::Sum, "reduce_sum"),
        (Reduce::Max, "reduce_max"),
        (Reduce::Std, "reduce_std"),
    ] {
        v.push(op_case(name, vec![fm(rng)], move |s, x| s.graph.reduce(x[0], kind, 2)));
    }
    for (reverse, name) in [(false, "lstm_fwd"), (true, "lstm_rev")] {
        let inputs = vec![randn(rng, &[2, 3, 4]), randn(rng, &[8, 3]), randn(rng, &[8, 2]), randn(rng, &[8])];
        v.push(op_case(name, inputs, move |s, x| s.graph.lstm(x[0], x[1], x[2], x[3], reverse)));
    }
    v
}

fn layer_case(
    name: &str,
    store: ParamStore,
    input: Tensor,
    build: impl Fn(&mut Session<'_>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        level: Level::Layer,
        store,
        inputs: vec![input],
        max_coords: usize::MAX,
        build: Box::new(build),
    }
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut v = Vec::new();
    let mut store = ParamStore::new();
    let unit = ConvUnit::new(&mut store, "u", 4, 6, 3, 2, UnitStyle::ConvBnRelu, rng)?;
    v.push(layer_case("conv_bn_relu", store, randn(rng, &[2, 4, 5]), move |s, x| unit.forward(s, x[0])));

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 5, 4, rng)?;
    v.push(layer_case("linear", store, randn(rng, &[3, 5]), move |s, x| lin.forward(s, x[0])));

    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 6, 2, rng)?;
    v.push(layer_case("se_block", store, randn(rng, &[2, 6, 5]), move |s, x| se.forward(s, x[0])));

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "c", 4, 3, rng)?;
    v.push(layer_case("lstm_cell", store, randn(rng, &[2, 4, 5]), move |s, x| {
        cell.forward(s, x[0], Direction::Forward)
    }));

    let mut store = ParamStore::new();
    let bi = BiLstm::new(&mut store, "bi", 4, 2, rng)?;
    v.push(layer_case("bilstm", store, randn(rng, &[2, 4, 5]), move |s, x| bi.forward(s, x[0])));

    let mut store = ParamStore::new();
    let pool = AttentivePool::new(&mut store, "pool", 4, 3, rng)?;
    v.push(layer_case("attentive_pool", store, randn(rng, &[2, 4, 5]), move |s, x| pool.forward(s, x[0])));
    Ok(v)
}

fn block_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    Variant::ALL
        .into_iter()
        .map(|variant| {
            let cfg = BlockConfig {
                channels: 16,
                scale: 4,
                kernel_size: 3,
                dilation: 2,
                se_bottleneck: 4,
                variant,
            };
            let mut store = ParamStore::new();
            let block = ContextBlock::new(&mut store, "b", &cfg, rng)?;
            Ok(Case {
                name: variant.as_str().to_string(),
                level: Level::Block,
                store,
                inputs: vec![randn(rng, &[2, 16, 5])],
                max_coords: usize::MAX,
                build: Box::new(move |s, x| block.forward(s, x[0])),
            })
        })
        .collect()
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    Variant::ALL
        .into_iter()
        .map(|variant| {
            let cfg = ModelConfig {
                mfa_channels: 24,
                attention_channels: 8,
                ..ModelConfig::toy(16, variant, 3)
            };
            let model = Model::build(&cfg, rng.random())?;
            let features = randn(rng, &[3, cfg.mel_bins, 10]);
            let labels = [0, 1, 2];
            let classifier = model.classifier;
            let store = model.params.clone();
            Ok(Case {
                name: format!("model_{}", variant.as_str()),
                level: Level::Model,
                store,
                inputs: Vec::new(),
                max_coords: 20,
                build: Box::new(move |s, _| {
                    let x = s.input(features.clone(), false)?;
                    let e = model.forward(s, x)?;
                    let w = s.p(classifier)?;
                    s.graph.aam_softmax(e, w, &labels, 0.2, 30.0)
                }),
            })
        })
        .collect()
}

/// Every registered check, in report order. A `fault` corrupts the backward
/// rule of one op family in every analytic pass.
pub fn standard_suite(fault: Option<OpTag>) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut cases = op_cases(&mut rng);
    cases.extend(layer_cases(&mut rng)?);
    cases.extend(block_cases(&mut rng)?);
    cases.extend(model_cases(&mut rng)?);
    cases
        .into_iter()
        .enumerate()
        .map(|(i, mut c)| {
            let opts = CheckOptions {
                max_coords: c.max_coords,
                seed: i as u64,
                fault,
                ..Default::default()
            };
            let result = check(&c.name, c.level.threshold(), &mut c.store, &c.inputs, &opts, &c.build)?;
            Ok(SuiteRow { level: c.level, result })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn exact_gradients_pass_and_faults_fail() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", ParamKind::Learnable, Tensor::from_vec(vec![0.3, -0.7, 1.1]))
            .unwrap();
        let x = Tensor::from_vec(vec![0.5, 0.2, -0.4]);
        let build = |s: &mut Session<'_>, v: &[Var]| {
            let wv = s.p(w)?;
            let m = s.graph.mul(v[0], wv)?;
            s.graph.tanh(m)
        };
        let ok = check("tanh·mul", 1e-6, &mut store, std::slice::from_ref(&x), &CheckOptions::default(), build).unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.coords, 6);
        let opts = CheckOptions {
            fault: Some(OpTag::Tanh),
            ..Default::default()
        };
        let bad = check("tanh·mul", 1e-6, &mut store, &[x], &opts, build).unwrap();
        assert!(!bad.passed());
        // Perturbations are undone.
        assert_eq!(store.get(w).data(), &[0.3, -0.7, 1.1]);
    }

    #[test]
    fn standard_suite_passes_and_detects_a_corrupted_rule() {
        let rows = standard_suite(None).unwrap();
        for r in &rows {
            assert!(r.result.passed(), "{} {:?}", r.level.as_str(), r.result);
        }
        let faulty = standard_suite(Some(OpTag::Sigmoid)).unwrap();
        let failed: Vec<_> = faulty.iter().filter(|r| !r.result.passed()).map(|r| r.result.name.as_str()).collect();
        assert!(failed.contains(&"sigmoid"));
        assert!(failed.contains(&"se_block"));
        assert!(failed.contains(&"se_res2"));
        assert!(!failed.contains(&"relu"));
    }
}
