//! Log-mel filterbank features and SpecAugment masking.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    /// 80 bands, 25 ms Hamming window, 10 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 80,
            win: 400,
            hop: 160,
            n_fft: 512,
            fmin: 20.0,
            fmax: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.hop == 0 || self.win <= self.hop || self.n_fft < self.win {
            return Err(invalid!(
                "mel config needs n_mels ≥ 1, 0 < hop < win ≤ n_fft (got {}, {}, {}, {})",
                self.n_mels,
                self.hop,
                self.win,
                self.n_fft
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(invalid!("mel band edges must satisfy 0 ≤ fmin < fmax ≤ {}", nyquist));
        }
        if self.log_floor <= 0.0 {
            return Err(invalid!("log floor must be positive"));
        }
        Ok(())
    }

    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        (samples >= self.win).then(|| 1 + (samples - self.win) / self.hop)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Symmetric Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Triangular filters on the HTK mel scale, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Tensor {
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(&[cfg.n_mels, bins]);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb.set(&[m, k], w);
        }
    }
    fb
}

/// Reusable log-mel extractor (holds the FFT plan, window and filters).
pub struct LogMel {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Tensor,
    /// Non-zero bin range of each filter.
    support: Vec<(usize, usize)>,
}

impl LogMel {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let filters = mel_filterbank(&cfg);
        let bins = cfg.n_fft / 2 + 1;
        let support = (0..cfg.n_mels)
            .map(|m| {
                let row = &filters.data()[m * bins..(m + 1) * bins];
                let lo = row.iter().position(|&v| v != 0.0).unwrap_or(0);
                let hi = row.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
                (lo, hi.max(lo))
            })
            .collect();
        Ok(Self {
            window: hamming(cfg.win),
            filters,
            support,
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    /// `|FFT(window · frame)|²` over the non-negative frequency bins.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for (b, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    /// `n_mels × T` natural-log mel energies, `T = 1 + ⌊(len − win)/hop⌋`.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(invalid!("expected {} Hz audio, got {}", self.cfg.sample_rate, w.sample_rate));
        }
        let t = self
            .cfg
            .num_frames(w.len())
            .ok_or_else(|| invalid!("{} samples is shorter than one {}-sample window", w.len(), self.cfg.win))?;
        let bins = self.cfg.n_fft / 2 + 1;
        let mut out = Tensor::zeros(&[self.cfg.n_mels, t]);
        for f in 0..t {
            let start = f * self.cfg.hop;
            let p = self.power_spectrum(&w.samples[start..start + self.cfg.win]);
            for (m, &(lo, hi)) in self.support.iter().enumerate() {
                let row = &self.filters.data()[m * bins + lo..m * bins + hi];
                let e: f64 = row.iter().zip(&p[lo..hi]).map(|(a, b)| a * b).sum();
                out.set(&[m, f], e.max(self.cfg.log_floor).ln());
            }
        }
        Ok(out)
    }
}

pub fn logmel(w: &Waveform, cfg: &MelConfig) -> Result<Tensor> {
    LogMel::new(cfg.clone())?.compute(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub freq_mask_max: usize,
    pub time_mask_max: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            freq_mask_max: 8,
            time_mask_max: 10,
        }
    }
}

/// Masked bands as `[start, start + width)` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Masks {
    pub freq: (usize, usize),
    pub time: (usize, usize),
}

/// One frequency band and one time band, each of uniform width in
/// `0..=max` (capped at the axis extent), filled with the map's mean.
pub fn specaugment<R: Rng + ?Sized>(x: &Tensor, cfg: &SpecAugmentConfig, rng: &mut R) -> Result<(Tensor, Masks)> {
    let [f, t] = *x.shape() else {
        return Err(invalid!("specaugment expects a mel×T map, got {:?}", x.shape()));
    };
    let mut band = |extent: usize, max: usize| {
        let width = rng.random_range(0..=max.min(extent));
        let start = rng.random_range(0..=extent - width);
        (start, width)
    };
    let masks = Masks {
        freq: band(f, cfg.freq_mask_max),
        time: band(t, cfg.time_mask_max),
    };
    let fill = x.sum() / x.numel() as f64;
    let mut out = x.clone();
    let (fs, fw) = masks.freq;
    let (ts, tw) = masks.time;
    for m in 0..f {
        for i in 0..t {
            if (fs..fs + fw).contains(&m) || (ts..ts + tw).contains(&i) {
                out.set(&[m, i], fill);
            }
        }
    }
    Ok((out, masks))
}
