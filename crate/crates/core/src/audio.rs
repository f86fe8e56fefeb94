//! Waveforms, WAV I/O, cropping and synthetic noise / reverberation.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// Two seconds at 16 kHz.
pub const CROP_SAMPLES: usize = 32_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }
}

/// Reads a RIFF PCM 16-bit mono WAV file at 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: only PCM 16-bit mono is supported (got {} channel(s), {}-bit {:?})",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: expected {} Hz, got {} Hz",
            path.display(),
            SAMPLE_RATE,
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes PCM 16-bit mono, clipping to `[-1, 1)`.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &v in &w.samples {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {}", path.display(), other)),
    }
}

/// Random contiguous two-second crop; shorter inputs are wrap-padded from
/// their first sample.
pub fn crop_2s<R: Rng + ?Sized>(w: &Waveform, rng: &mut R) -> Result<Waveform> {
    crop(w, CROP_SAMPLES, rng)
}

pub fn crop<R: Rng + ?Sized>(w: &Waveform, len: usize, rng: &mut R) -> Result<Waveform> {
    if w.is_empty() {
        return Err(invalid!("cannot crop an empty waveform"));
    }
    let samples = if w.len() >= len {
        let start = rng.random_range(0..=w.len() - len);
        w.samples[start..start + len].to_vec()
    } else {
        (0..len).map(|i| w.samples[i % w.len()]).collect()
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReverbConfig {
    /// SNR range in dB; `None` disables noise (infinite SNR).
    pub snr_db: Option<(f64, f64)>,
    pub noise_prob: f64,
    /// Decay time constant of the synthetic impulse response in seconds;
    /// zero disables reverberation.
    pub reverb_tail_s: f64,
    pub reverb_prob: f64,
}

impl Default for NoiseReverbConfig {
    fn default() -> Self {
        Self {
            snr_db: Some((5.0, 20.0)),
            noise_prob: 0.5,
            reverb_tail_s: 0.05,
            reverb_prob: 0.3,
        }
    }
}

impl NoiseReverbConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.snr_db {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid!("SNR range must be finite and ordered, got ({lo}, {hi})"));
            }
        }
        for (name, p) in [("noise_prob", self.noise_prob), ("reverb_prob", self.reverb_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{} must lie in [0, 1], got {}", name, p));
            }
        }
        if !(self.reverb_tail_s >= 0.0 && self.reverb_tail_s.is_finite()) {
            return Err(invalid!("reverb tail must be a non-negative length"));
        }
        Ok(())
    }
}

/// Adds white Gaussian noise scaled so the clean-to-noise power ratio is
/// exactly `snr_db`.
pub fn add_noise<R: Rng + ?Sized>(w: &Waveform, snr_db: f64, rng: &mut R) -> Waveform {
    if snr_db == f64::INFINITY {
        return w.clone();
    }
    let noise: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(rng)).collect();
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len().max(1) as f64;
    let gain = if pn > 0.0 {
        (w.power() / (pn * 10f64.powf(snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    Waveform {
        samples: w.samples.iter().zip(&noise).map(|(s, n)| s + gain * n).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Exponentially decaying random impulse response with a unit direct path.
pub fn synthetic_rir<R: Rng + ?Sized>(tail_s: f64, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let tau = tail_s * sample_rate as f64;
    let len = (5.0 * tau).ceil() as usize + 1;
    let mut h = vec![1.0];
    h.extend((1..len).map(|n| {
        let g: f64 = StandardNormal.sample(rng);
        0.3 * g * (-(n as f64) / tau).exp()
    }));
    h
}

/// Causal convolution truncated to the input length. Long kernels go
/// through the FFT.
pub fn convolve(w: &Waveform, kernel: &[f64]) -> Waveform {
    let x = &w.samples;
    let samples = if kernel.len() <= 64 || x.is_empty() {
        (0..x.len())
            .map(|n| {
                let kmax = kernel.len().min(n + 1);
                (0..kmax).map(|k| kernel[k] * x[n - k]).sum()
            })
            .collect()
    } else {
        fft_convolve(x, kernel)
    };
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

fn fft_convolve(x: &[f64], k: &[f64]) -> Vec<f64> {
    let n = (x.len() + k.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let mut a = spectrum(x);
    let b = spectrum(k);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

/// Rescales `w` to the given peak amplitude (no-op for silence).
pub fn normalize_peak(w: &Waveform, peak: f64) -> Waveform {
    let p = w.peak();
    if p == 0.0 || p == peak {
        return w.clone();
    }
    let g = peak / p;
    Waveform {
        samples: w.samples.iter().map(|v| v * g).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Random reverberation and/or noise, rescaled to the input's peak level.
pub fn augment_noise_reverb<R: Rng + ?Sized>(w: &Waveform, cfg: &NoiseReverbConfig, rng: &mut R) -> Result<Waveform> {
    cfg.validate()?;
    let mut out = w.clone();
    if cfg.reverb_tail_s > 0.0 && rng.random_bool(cfg.reverb_prob) {
        let rir = synthetic_rir(cfg.reverb_tail_s, w.sample_rate, rng);
        out = convolve(&out, &rir);
    }
    if let Some((lo, hi)) = cfg.snr_db {
        if rng.random_bool(cfg.noise_prob) {
            let snr = if lo == hi { lo } else { rng.random_range(lo..hi) };
            out = add_noise(&out, snr, rng);
        }
    }
    Ok(normalize_peak(&out, w.peak()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(len: usize) -> Waveform {
        let s = (0..len).map(|i| 0.5 * (i as f64 * 0.07).sin()).collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn crops_have_two_seconds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(crop_2s(&tone(80_000), &mut rng).unwrap().len(), CROP_SAMPLES);
        let short = tone(16_000);
        let c = crop_2s(&short, &mut rng).unwrap();
        assert_eq!(c.len(), CROP_SAMPLES);
        assert_eq!(&c.samples[..16_000], &short.samples[..]);
        assert_eq!(&c.samples[16_000..], &short.samples[..]);
        let long = tone(50_000);
        let a = crop_2s(&long, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = crop_2s(&long, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(crop_2s(&Waveform::new(vec![], SAMPLE_RATE).unwrap(), &mut rng).is_err());
    }

    #[test]
    fn identity_augmentations() {
        let w = tone(4000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_noise(&w, f64::INFINITY, &mut rng), w);
        assert_eq!(convolve(&w, &[1.0]), w);
        let mut k = vec![0.0; 300];
        k[0] = 1.0;
        k[1] = 0.5;
        k[299] = -0.25;
        let fast = convolve(&w, &k);
        for n in 0..w.len() {
            let mut direct = w.samples[n];
            if n >= 1 {
                direct += 0.5 * w.samples[n - 1];
            }
            if n >= 299 {
                direct -= 0.25 * w.samples[n - 299];
            }
            assert!((fast.samples[n] - direct).abs() < 1e-12);
        }
        let cfg = NoiseReverbConfig {
            snr_db: None,
            reverb_tail_s: 0.0,
            ..Default::default()
        };
        assert_eq!(augment_noise_reverb(&w, &cfg, &mut rng).unwrap(), w);
    }

    #[test]
    fn measured_snr_matches_target() {
        let w = tone(32_000);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for target in [0.0, 5.0, 12.5, 20.0] {
            let noisy = add_noise(&w, target, &mut rng);
            let noise_power = noisy.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / w.len() as f64;
            let measured = 10.0 * (w.power() / noise_power).log10();
            assert!((measured - target).abs() <= 0.5, "{measured} vs {target}");
        }
    }

    #[test]
    fn augmentation_keeps_peak_and_is_seeded() {
        let w = tone(8000);
        let cfg = NoiseReverbConfig {
            noise_prob: 1.0,
            reverb_prob: 1.0,
            ..Default::default()
        };
        let a = augment_noise_reverb(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = augment_noise_reverb(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, w);
        assert!((a.peak() - w.peak()).abs() < 1e-12);
        let bad = NoiseReverbConfig {
            snr_db: Some((10.0, 5.0)),
            ..Default::default()
        };
        assert!(augment_noise_reverb(&w, &bad, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn wav_round_trip_and_format_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = tone(1000);
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.len(), 1000);
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(Error::Format(_))));
        let wrong_rate = dir.path().join("r.wav");
        write_wav(&wrong_rate, &Waveform::new(vec![0.0; 10], 8000).unwrap()).unwrap();
        assert!(read_wav(&wrong_rate).is_err());
        assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }
}
