//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. Empty path values mean "not set".

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use res2ctx::audio::NoiseReverbConfig;
use res2ctx::blocks::Variant;
use res2ctx::data::PipelineConfig;
use res2ctx::evaluation::DcfParams;
use res2ctx::mel::{MelConfig, SpecAugmentConfig};
use res2ctx::model::ModelConfig;
use res2ctx::training::{AamConfig, AdamConfig, LrSchedule, TrainConfig};
use res2ctx::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// `Full` for widths of 512 and above, `Toy` otherwise.
    Auto,
    /// Scale 4; MFA, attention and SE widths follow `width`.
    Toy,
    /// Scale 8; MFA 1536, attention and SE bottleneck 128.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub width: usize,
    /// 0 takes the preset's value (also for the three widths below).
    pub scale: usize,
    pub mfa_channels: usize,
    pub attention_channels: usize,
    pub se_bottleneck: usize,
    pub seed: u64,

    pub train_manifest: Option<PathBuf>,
    pub embed_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub cohort: Option<PathBuf>,

    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: u64,
    pub margin: f64,
    pub aam_scale: f64,
    pub weight_decay: f64,
    pub checkpoint_every: u64,

    pub augment: bool,
    pub snr_min: f64,
    pub snr_max: f64,
    pub noise_prob: f64,
    pub reverb_prob: f64,
    pub reverb_tail: f64,
    pub specaugment: bool,
    pub freq_mask: usize,
    pub time_mask: usize,

    pub asnorm: bool,
    pub asnorm_k: usize,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sched = LrSchedule::default();
        let aam = AamConfig::default();
        let noise = NoiseReverbConfig::default();
        let (snr_min, snr_max) = noise.snr_db.unwrap_or((5.0, 20.0));
        let sa = SpecAugmentConfig::default();
        let dcf = DcfParams::default();
        Self {
            preset: Preset::Auto,
            variant: Variant::SeRes2,
            width: 64,
            scale: 0,
            mfa_channels: 0,
            attention_channels: 0,
            se_bottleneck: 0,
            seed: 0,
            train_manifest: None,
            embed_manifest: None,
            checkpoint: None,
            embeddings: None,
            trials: None,
            scores: None,
            cohort: None,
            steps: 2000,
            batch_size: 32,
            base_lr: sched.base_lr,
            max_lr: sched.max_lr,
            step_size: sched.step_size,
            margin: aam.margin,
            aam_scale: aam.scale,
            weight_decay: AdamConfig::default().weight_decay,
            checkpoint_every: 0,
            augment: true,
            snr_min,
            snr_max,
            noise_prob: noise.noise_prob,
            reverb_prob: noise.reverb_prob,
            reverb_tail: noise.reverb_tail_s,
            specaugment: true,
            freq_mask: sa.freq_mask_max,
            time_mask: sa.time_mask_max,
            asnorm: false,
            asnorm_k: 100,
            p_target: dcf.p_target,
            c_miss: dcf.c_miss,
            c_fa: dcf.c_fa,
        }
    }
}

fn invalid(msg: String) -> Error {
    Error::Invalid(msg)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key in serialization order, with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let preset = match self.preset {
            Preset::Auto => "auto",
            Preset::Toy => "toy",
            Preset::Full => "full",
        };
        vec![
            ("preset", preset.to_string()),
            ("variant", self.variant.to_string()),
            ("width", self.width.to_string()),
            ("scale", self.scale.to_string()),
            ("mfa_channels", self.mfa_channels.to_string()),
            ("attention_channels", self.attention_channels.to_string()),
            ("se_bottleneck", self.se_bottleneck.to_string()),
            ("seed", self.seed.to_string()),
            ("train_manifest", show_path(&self.train_manifest)),
            ("embed_manifest", show_path(&self.embed_manifest)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("embeddings", show_path(&self.embeddings)),
            ("trials", show_path(&self.trials)),
            ("scores", show_path(&self.scores)),
            ("cohort", show_path(&self.cohort)),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("max_lr", self.max_lr.to_string()),
            ("step_size", self.step_size.to_string()),
            ("margin", self.margin.to_string()),
            ("aam_scale", self.aam_scale.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("augment", self.augment.to_string()),
            ("snr_min", self.snr_min.to_string()),
            ("snr_max", self.snr_max.to_string()),
            ("noise_prob", self.noise_prob.to_string()),
            ("reverb_prob", self.reverb_prob.to_string()),
            ("reverb_tail", self.reverb_tail.to_string()),
            ("specaugment", self.specaugment.to_string()),
            ("freq_mask", self.freq_mask.to_string()),
            ("time_mask", self.time_mask.to_string()),
            ("asnorm", self.asnorm.to_string()),
            ("asnorm_k", self.asnorm_k.to_string()),
            ("p_target", self.p_target.to_string()),
            ("c_miss", self.c_miss.to_string()),
            ("c_fa", self.c_fa.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => {
                self.preset = match v {
                    "auto" => Preset::Auto,
                    "toy" => Preset::Toy,
                    "full" => Preset::Full,
                    _ => return Err(invalid(format!("preset: expected auto, toy or full, got {v:?}"))),
                }
            }
            "variant" => self.variant = v.parse()?,
            "width" => self.width = num(key, v)?,
            "scale" => self.scale = num(key, v)?,
            "mfa_channels" => self.mfa_channels = num(key, v)?,
            "attention_channels" => self.attention_channels = num(key, v)?,
            "se_bottleneck" => self.se_bottleneck = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "train_manifest" => self.train_manifest = path(v),
            "embed_manifest" => self.embed_manifest = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "embeddings" => self.embeddings = path(v),
            "trials" => self.trials = path(v),
            "scores" => self.scores = path(v),
            "cohort" => self.cohort = path(v),
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "base_lr" => self.base_lr = num(key, v)?,
            "max_lr" => self.max_lr = num(key, v)?,
            "step_size" => self.step_size = num(key, v)?,
            "margin" => self.margin = num(key, v)?,
            "aam_scale" => self.aam_scale = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "augment" => self.augment = flag(key, v)?,
            "snr_min" => self.snr_min = num(key, v)?,
            "snr_max" => self.snr_max = num(key, v)?,
            "noise_prob" => self.noise_prob = num(key, v)?,
            "reverb_prob" => self.reverb_prob = num(key, v)?,
            "reverb_tail" => self.reverb_tail = num(key, v)?,
            "specaugment" => self.specaugment = flag(key, v)?,
            "freq_mask" => self.freq_mask = num(key, v)?,
            "time_mask" => self.time_mask = num(key, v)?,
            "asnorm" => self.asnorm = flag(key, v)?,
            "asnorm_k" => self.asnorm_k = num(key, v)?,
            "p_target" => self.p_target = num(key, v)?,
            "c_miss" => self.c_miss = num(key, v)?,
            "c_fa" => self.c_fa = num(key, v)?,
            _ => return Err(invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                file: origin.to_string(),
                line: n + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key {k:?} given twice")));
            }
            cfg.set(k, v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(p: impl AsRef<Path>) -> Result<Self> {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?;
        Self::parse(&text, &p.display().to_string())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn model_config(&self, num_speakers: usize) -> Result<ModelConfig> {
        let preset = match self.preset {
            Preset::Auto if self.width >= 512 => Preset::Full,
            Preset::Auto => Preset::Toy,
            p => p,
        };
        let mut m = match preset {
            Preset::Toy | Preset::Auto => ModelConfig::toy(self.width, self.variant, num_speakers),
            Preset::Full => ModelConfig {
                num_speakers,
                ..ModelConfig::new(self.width, self.variant)
            },
        };
        let pick = |v: usize, d: usize| if v == 0 { d } else { v };
        m.scale = pick(self.scale, m.scale);
        m.mfa_channels = pick(self.mfa_channels, m.mfa_channels);
        m.attention_channels = pick(self.attention_channels, m.attention_channels);
        m.se_bottleneck = pick(self.se_bottleneck, m.se_bottleneck);
        m.validate()?;
        Ok(m)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mel: MelConfig::default(),
            augment: self.augment.then_some(NoiseReverbConfig {
                snr_db: Some((self.snr_min, self.snr_max)),
                noise_prob: self.noise_prob,
                reverb_tail_s: self.reverb_tail,
                reverb_prob: self.reverb_prob,
            }),
            specaugment: self.specaugment.then_some(SpecAugmentConfig {
                freq_mask_max: self.freq_mask,
                time_mask_max: self.time_mask,
            }),
        }
    }

    pub fn train_config(&self, workers: usize) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            schedule: LrSchedule {
                base_lr: self.base_lr,
                max_lr: self.max_lr,
                step_size: self.step_size,
            },
            aam: AamConfig {
                margin: self.margin,
                scale: self.aam_scale,
            },
            adam: AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            checkpoint_every: self.checkpoint_every,
            pipeline: self.pipeline(),
            workers,
        };
        cfg.schedule.validate()?;
        cfg.aam.validate()?;
        if let Some(a) = &cfg.pipeline.augment {
            a.validate()?;
        }
        Ok(cfg)
    }

    pub fn dcf(&self) -> Result<DcfParams> {
        let p = DcfParams {
            p_target: self.p_target,
            c_miss: self.c_miss,
            c_fa: self.c_fa,
        };
        p.validate()?;
        Ok(p)
    }
}
