//! Loss, optimizer, learning-rate schedule and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::data::{derive_seed, Corpus, Pipeline, PipelineConfig};
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self { margin: 0.2, scale: 30.0 }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(invalid!("AAM margin must lie in [0, π/2), got {}", self.margin));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid!("AAM scale must be positive, got {}", self.scale));
        }
        Ok(())
    }
}

/// Batch-mean AAM-softmax loss with gradients for the embeddings (`B×D`)
/// and class weights (`K×D`).
pub fn aam_softmax_loss(embeddings: &Tensor, labels: &[usize], weights: &Tensor, cfg: &AamConfig) -> Result<(f64, Tensor, Tensor)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let e = g.leaf(embeddings.clone(), true)?;
    let w = g.leaf(weights.clone(), true)?;
    let loss = g.aam_softmax(e, w, labels, cfg.margin, cfg.scale)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss, Tensor::scalar(1.0))?;
    Ok((value, grads.take(e).unwrap(), grads.take(w).unwrap()))
}

/// Triangular2 cyclical learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-8,
            max_lr: 1e-3,
            step_size: 65_000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.base_lr && self.base_lr < self.max_lr && self.max_lr.is_finite()) {
            return Err(invalid!("need 0 ≤ base_lr < max_lr, got {} and {}", self.base_lr, self.max_lr));
        }
        if self.step_size == 0 {
            return Err(invalid!("step_size must be ≥ 1"));
        }
        Ok(())
    }

    pub fn lr(&self, t: u64) -> f64 {
        let s = self.step_size as f64;
        let t = t as f64;
        let cycle = (1.0 + t / (2.0 * s)).floor();
        let x = (t / s - 2.0 * cycle + 1.0).abs();
        self.base_lr + (self.max_lr - self.base_lr) * (1.0 - x).max(0.0) / 2f64.powf(cycle - 1.0)
    }
}

pub fn cyclical_lr(t: u64, sched: &LrSchedule) -> f64 {
    sched.lr(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 coefficient, added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-5,
        }
    }
}

/// Adam with per-parameter moments keyed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update of every parameter in `grads`. A non-finite gradient
    /// aborts before anything is modified.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", store.entry(*id).name)));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if self.moments.len() <= id.index() {
                self.moments.resize(id.index() + 1, None);
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + weight_decay * *w;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub aam: AamConfig,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub pipeline: PipelineConfig,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 128,
            seed: 0,
            schedule: LrSchedule::default(),
            aam: AamConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            pipeline: PipelineConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Where a run writes its artifacts; `None` skips the artifact.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub const LOG_HEADER: &str = "step\tlr\tloss";

/// Corpus item indices for one step, drawn uniformly with replacement.
pub fn sample_batch(corpus_len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, step, 0xBA7C]));
    (0..batch).map(|_| rng.random_range(0..corpus_len)).collect()
}

fn save_atomic(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    checkpoint::save(model, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` optimizer steps. On a non-finite loss or gradient the
/// run stops with [`Error::NonFinite`]; the last scheduled checkpoint is
/// left untouched.
pub fn train<C: Corpus + ?Sized>(
    model: &mut Model,
    corpus: &C,
    cfg: &TrainConfig,
    out: &TrainOutputs,
    mut progress: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.schedule.validate()?;
    cfg.aam.validate()?;
    if cfg.batch_size == 0 {
        return Err(invalid!("batch_size must be positive"));
    }
    if corpus.num_speakers() < 2 {
        return Err(invalid!("training needs at least 2 speakers"));
    }
    if corpus.num_speakers() > model.config.num_speakers {
        return Err(invalid!(
            "corpus has {} speakers but the classifier has {}",
            corpus.num_speakers(),
            model.config.num_speakers
        ));
    }
    let pipeline = Pipeline::new(cfg.pipeline.clone(), cfg.workers)?;
    let mut adam = Adam::new(cfg.adam);
    let mut log = match &out.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((w, p.clone()))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let lr = cfg.schedule.lr(step);
        let items = sample_batch(corpus.len(), cfg.batch_size, cfg.seed, step);
        let labels: Vec<usize> = items.iter().map(|&i| corpus.speaker(i)).collect();
        let batch = pipeline.train_batch(corpus, &items, cfg.seed, step)?;
        let (loss, grads, bn) = {
            let mut s = Session::new(&model.params, Mode::Train);
            let x = s.input(batch, false)?;
            let e = model.forward(&mut s, x)?;
            let w = s.p(model.classifier)?;
            let l = s.graph.aam_softmax(e, w, &labels, cfg.aam.margin, cfg.aam.scale)?;
            let loss = s.value(l).data()[0];
            let (_, grads) = s.param_grads(l)?;
            (loss, grads, s.take_bn_updates())
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        adam.update(&mut model.params, &grads, lr)?;
        model.params.apply_bn_updates(&bn);
        let rec = StepRecord { step, lr, loss };
        if let Some((w, p)) = &mut log {
            writeln!(w, "{}\t{}\t{}", rec.step, rec.lr, rec.loss).map_err(|e| Error::io(&*p, e))?;
        }
        progress(&rec);
        records.push(rec);
        let scheduled = cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0;
        if let (true, Some(p)) = (scheduled, &out.checkpoint) {
            save_atomic(model, p)?;
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    if let Some(p) = &out.checkpoint {
        save_atomic(model, p)?;
    }
    Ok(records)
}

/// Reads a metrics log written by [`train`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let parse = |line: usize, msg: String| Error::Parse {
        file: path.display().to_string(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, LOG_HEADER)) => {}
        _ => return Err(parse(1, format!("expected header {LOG_HEADER:?}"))),
    }
    lines
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || parse(n + 1, format!("malformed log line {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Trailing moving average of `window` losses ending at each step.
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Variant;
    use crate::data::SynthCorpus;
    use crate::model::ModelConfig;
    use crate::params::ParamKind;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn schedule_reference_points() {
        let s = LrSchedule::default();
        assert!(close(s.lr(0), 1e-8, 1e-12));
        assert!(close(s.lr(65_000), 1e-3, 1e-12));
        assert!(close(s.lr(130_000), 1e-8, 1e-12));
        assert!(close(s.lr(195_000), 1e-8 + (1e-3 - 1e-8) / 2.0, 1e-12));
        assert!(close(s.lr(195_000), 5.00005e-4, 1e-12));
        assert!(close(s.lr(32_500), 1e-8 + (1e-3 - 1e-8) / 2.0, 1e-12));
        for t in (0..400_000).step_by(997) {
            let lr = s.lr(t);
            assert!((s.base_lr..=s.max_lr).contains(&lr));
        }
    }

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", ParamKind::Learnable, Tensor::from_vec(vec![v])).unwrap();
        (s, id)
    }

    #[test]
    fn adam_hand_traces() {
        let no_decay = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut s, id) = one_param(0.7);
        let mut opt = Adam::new(no_decay);
        opt.update(&mut s, &[(id, Tensor::from_vec(vec![0.0]))], 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[0.7]);

        let (mut s, id) = one_param(0.0);
        let mut opt = Adam::new(no_decay);
        opt.update(&mut s, &[(id, Tensor::from_vec(vec![1.0]))], 1e-3).unwrap();
        assert!(close(s.get(id).data()[0], -1e-3 / (1.0 + 1e-8), 1e-12));

        // Two steps against a scalar recursion, with decay.
        let cfg = AdamConfig::default();
        let (mut s, id) = one_param(0.5);
        let mut opt = Adam::new(cfg);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, (g, lr)) in [(0.3, 1e-3), (-0.8, 2e-3)].into_iter().enumerate() {
            opt.update(&mut s, &[(id, Tensor::from_vec(vec![g]))], lr).unwrap();
            let g = g + 2e-5 * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= lr * mh / (vh.sqrt() + 1e-8);
            assert!(close(s.get(id).data()[0], p, 1e-12));
        }
    }

    #[test]
    fn decay_shrinks_and_nan_aborts() {
        let (mut s, id) = one_param(-2.0);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            let before = s.get(id).data()[0].abs();
            opt.update(&mut s, &[(id, Tensor::from_vec(vec![0.0]))], 1e-2).unwrap();
            assert!(s.get(id).data()[0].abs() < before);
        }
        let before = s.get(id).clone();
        assert!(matches!(
            opt.update(&mut s, &[(id, Tensor::from_vec(vec![f64::NAN]))], 1e-2),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.get(id), &before);
    }

    /// Scalar reference for one sample's AAM loss from cosines.
    fn aam_ref(cos: &[f64], y: usize, m: f64, s: f64) -> f64 {
        let c = cos[y];
        let sin = (1.0 - c * c).max(0.0).sqrt();
        let target = s * (c * m.cos() - sin * m.sin());
        let denom = target.exp() + cos.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &cj)| (s * cj).exp()).sum::<f64>();
        -(target.exp() / denom).ln()
    }

    #[test]
    fn aam_three_class_hand_example() {
        // Unit class axes make cos θ_j the embedding coordinates.
        let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let cos = [0.9, 0.1, -0.2];
        let e = Tensor::new(&[1, 3], cos.to_vec()).unwrap();
        let norm = (0.81f64 + 0.01 + 0.04).sqrt();
        let unit: Vec<f64> = cos.iter().map(|c| c / norm).collect();
        let (loss, _, _) = aam_softmax_loss(&e, &[0], &w, &AamConfig::default()).unwrap();
        assert!((loss - aam_ref(&unit, 0, 0.2, 30.0)).abs() < 1e-10);
        // Pre-normalized embedding with exactly these cosines.
        let e = Tensor::new(&[1, 3], unit.clone()).unwrap();
        let (loss, _, _) = aam_softmax_loss(&e, &[0], &w, &AamConfig::default()).unwrap();
        assert!((loss - aam_ref(&unit, 0, 0.2, 30.0)).abs() < 1e-10);
    }

    #[test]
    fn margin_free_aam_is_cosine_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Tensor::randn(&[4, 6], &mut rng);
        let w = Tensor::randn(&[5, 6], &mut rng);
        let labels = [0, 4, 2, 2];
        let cfg = AamConfig { margin: 0.0, scale: 1.0 };
        let (loss, _, _) = aam_softmax_loss(&e, &labels, &w, &cfg).unwrap();
        let unit = |r: &[f64]| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect::<Vec<_>>()
        };
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let ei = unit(e.row(i));
            let logits: Vec<f64> = (0..5).map(|k| unit(w.row(k)).iter().zip(&ei).map(|(a, b)| a * b).sum()).collect();
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            expect += lse - logits[y];
        }
        assert!((loss - expect / 4.0).abs() < 1e-12);
    }

    #[test]
    fn aam_loss_properties() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let aligned = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let losses: Vec<f64> = [1.0, 10.0, 30.0]
            .iter()
            .map(|&s| aam_softmax_loss(&aligned, &[0], &w, &AamConfig { margin: 0.0, scale: s }).unwrap().0)
            .collect();
        assert!(losses.iter().all(|&l| l > 0.0));
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let e = Tensor::randn(&[6, 4], &mut rng);
            let w = Tensor::randn(&[3, 4], &mut rng);
            let labels = [0, 1, 2, 0, 1, 2];
            let with = aam_softmax_loss(&e, &labels, &w, &AamConfig::default()).unwrap().0;
            let without = aam_softmax_loss(&e, &labels, &w, &AamConfig { margin: 0.0, scale: 30.0 }).unwrap().0;
            assert!(with >= without && without >= 0.0);
        }
        assert!(aam_softmax_loss(&aligned, &[3], &w, &AamConfig::default()).is_err());
        assert!(aam_softmax_loss(&Tensor::zeros(&[1, 2]), &[0], &w, &AamConfig::default()).is_err());
    }

    fn tiny_run(seed: u64, steps: u64, dir: &Path) -> (Vec<StepRecord>, TrainOutputs) {
        let corpus = SynthCorpus::new(3, 4, 2).unwrap();
        let cfg = ModelConfig {
            mfa_channels: 24,
            attention_channels: 8,
            ..ModelConfig::toy(16, Variant::SeRes2, 3)
        };
        let mut model = Model::build(&cfg, seed).unwrap();
        let tc = TrainConfig {
            steps,
            batch_size: 3,
            seed,
            schedule: LrSchedule {
                step_size: 4,
                ..Default::default()
            },
            checkpoint_every: 2,
            ..Default::default()
        };
        let out = TrainOutputs {
            checkpoint: Some(dir.join("m.ckpt")),
            log: Some(dir.join("log.tsv")),
        };
        let recs = train(&mut model, &corpus, &tc, &out, |_| {}).unwrap();
        (recs, out)
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (a, out) = tiny_run(3, 4, d1.path());
        let (b, _) = tiny_run(3, 4, d2.path());
        assert_eq!(a, b);
        assert_eq!(a[0].lr, 1e-8);
        let text = std::fs::read_to_string(out.log.as_ref().unwrap()).unwrap();
        assert!(text.starts_with("step\tlr\tloss\n"));
        assert_eq!(read_log(out.log.as_ref().unwrap()).unwrap(), a);
        let ckpt = checkpoint::load(out.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ckpt.config.width, 16);
        assert_eq!(
            std::fs::read(d1.path().join("m.ckpt")).unwrap(),
            std::fs::read(d2.path().join("m.ckpt")).unwrap()
        );
    }

    #[test]
    fn moving_average_windows() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }
}
