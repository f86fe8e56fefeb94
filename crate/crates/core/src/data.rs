//! Corpora, the synthetic speaker generator and the training data pipeline.
//!
//! Every random choice for item `i` of step `s` is drawn from an RNG seeded
//! with `item_seed(global, s, i)`, so batches do not depend on how many
//! workers build them.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{self, augment_noise_reverb, crop_2s, NoiseReverbConfig, Waveform, SAMPLE_RATE};
use crate::error::{invalid, Error, Result};
use crate::mel::{specaugment, LogMel, MelConfig, SpecAugmentConfig};
use crate::tensor::Tensor;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of seed components.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x9E37_79B9_7F4A_7C15, |acc, &p| mix(acc ^ mix(p.wrapping_add(0x9E37_79B9_7F4A_7C15))))
}

pub fn item_seed(global: u64, step: u64, index: u64) -> u64 {
    derive_seed(&[global, step, index])
}

pub trait Corpus: Sync {
    fn len(&self) -> usize;
    fn num_speakers(&self) -> usize;
    /// Speaker index in `0..num_speakers()`.
    fn speaker(&self, i: usize) -> usize;
    fn waveform(&self, i: usize) -> Result<Waveform>;
    /// Stable identifier used in embedding tables and trial lists.
    fn item_id(&self, i: usize) -> String;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A view of selected items of another corpus. Speaker indices are those
/// of the parent.
pub struct Subset<'a, C: Corpus + ?Sized> {
    inner: &'a C,
    items: Vec<usize>,
}

impl<'a, C: Corpus + ?Sized> Subset<'a, C> {
    pub fn new(inner: &'a C, items: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = items.iter().find(|&&i| i >= inner.len()) {
            return Err(invalid!("subset item {} out of range for a corpus of {}", bad, inner.len()));
        }
        Ok(Self { inner, items })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }
}

impl<C: Corpus + ?Sized> Corpus for Subset<'_, C> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn num_speakers(&self) -> usize {
        self.inner.num_speakers()
    }

    fn speaker(&self, i: usize) -> usize {
        self.inner.speaker(self.items[i])
    }

    fn waveform(&self, i: usize) -> Result<Waveform> {
        self.inner.waveform(self.items[i])
    }

    fn item_id(&self, i: usize) -> String {
        self.inner.item_id(self.items[i])
    }
}

/// Splits item indices into (train, held-out), holding out the last
/// `held_out` items of every speaker in corpus order.
pub fn split_per_speaker<C: Corpus + ?Sized>(corpus: &C, held_out: usize) -> (Vec<usize>, Vec<usize>) {
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_speakers()];
    for i in 0..corpus.len() {
        by_speaker[corpus.speaker(i)].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for items in by_speaker {
        let cut = items.len().saturating_sub(held_out);
        train.extend_from_slice(&items[..cut]);
        test.extend_from_slice(&items[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker: String,
}

/// Parses `path<TAB>speaker_id` lines. Relative paths resolve against the
/// manifest's directory; blank lines are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: &str| Error::Parse {
            file: path.display().to_string(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let (p, spk) = line.split_once('\t').ok_or_else(|| parse("expected path<TAB>speaker_id"))?;
        if p.is_empty() || spk.is_empty() || spk.contains('\t') {
            return Err(parse("expected exactly two non-empty fields"));
        }
        out.push(ManifestEntry {
            path: base.join(p),
            speaker: spk.to_string(),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries.iter().map(|(p, s)| format!("{p}\t{s}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// WAV files listed in a manifest; speakers are indexed by first appearance.
pub struct ManifestCorpus {
    entries: Vec<ManifestEntry>,
    speakers: Vec<usize>,
    names: Vec<String>,
}

impl ManifestCorpus {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_entries(read_manifest(path)?))
    }

    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut names = Vec::new();
        let speakers = entries
            .iter()
            .map(|e| {
                *index.entry(e.speaker.clone()).or_insert_with(|| {
                    names.push(e.speaker.clone());
                    names.len() - 1
                })
            })
            .collect();
        Self { entries, speakers, names }
    }

    pub fn speaker_name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }
}

impl Corpus for ManifestCorpus {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn num_speakers(&self) -> usize {
        self.names.len()
    }

    fn speaker(&self, i: usize) -> usize {
        self.speakers[i]
    }

    fn waveform(&self, i: usize) -> Result<Waveform> {
        audio::read_wav(&self.entries[i].path)
    }

    fn item_id(&self, i: usize) -> String {
        let p = &self.entries[i].path;
        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
    }
}

/// Per-speaker source parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub f0: f64,
    /// Formant centre frequencies and bandwidths in Hz.
    pub formants: [(f64, f64); 3],
    pub breathiness: f64,
}

impl Voice {
    /// Neutral-vowel formants scaled by a vocal-tract length factor, with
    /// small per-formant offsets.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let tract = rng.random_range(0.85..1.15);
        let mut formant = |hz: f64, bw: f64| (hz * tract * rng.random_range(0.95..1.05), bw * rng.random_range(0.8..1.25));
        let formants = [formant(500.0, 80.0), formant(1500.0, 110.0), formant(2500.0, 150.0)];
        Self {
            f0: rng.random_range(90.0..220.0),
            formants,
            breathiness: rng.random_range(0.005..0.05),
        }
    }
}

/// Deterministic corpus of synthetic speakers: a glottal pulse train at the
/// speaker's f0 through three two-pole formant resonators, with per-utterance
/// pitch jitter, formant drift, a syllabic envelope and breath noise.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub duration_s: f64,
    voices: Vec<Voice>,
}

impl SynthCorpus {
    pub fn new(num_speakers: usize, utts_per_speaker: usize, seed: u64) -> Result<Self> {
        if num_speakers < 2 {
            return Err(invalid!("a corpus needs at least 2 speakers, got {}", num_speakers));
        }
        if utts_per_speaker == 0 {
            return Err(invalid!("utts_per_speaker must be positive"));
        }
        let voices = (0..num_speakers)
            .map(|s| Voice::sample(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5EED, s as u64]))))
            .collect();
        Ok(Self {
            num_speakers,
            utts_per_speaker,
            seed,
            duration_s: 3.0,
            voices,
        })
    }

    pub fn voice(&self, speaker: usize) -> &Voice {
        &self.voices[speaker]
    }

    pub fn utterance(&self, speaker: usize, utt: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, speaker as u64, utt as u64]));
        synthesize(&self.voices[speaker], self.duration_s, &mut rng)
    }

    /// Writes `spkNNN_uttNNN.wav` files and `manifest.tsv` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let name = format!("{}.wav", self.item_id(i));
            audio::write_wav(dir.join(&name), &self.waveform(i)?)?;
            lines.push((name, format!("spk{:03}", self.speaker(i))));
        }
        let manifest = dir.join("manifest.tsv");
        write_manifest(&manifest, &lines)?;
        Ok(manifest)
    }
}

impl Corpus for SynthCorpus {
    fn len(&self) -> usize {
        self.num_speakers * self.utts_per_speaker
    }

    fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    fn speaker(&self, i: usize) -> usize {
        i / self.utts_per_speaker
    }

    fn waveform(&self, i: usize) -> Result<Waveform> {
        Ok(self.utterance(i / self.utts_per_speaker, i % self.utts_per_speaker))
    }

    fn item_id(&self, i: usize) -> String {
        format!("spk{:03}_utt{:03}", i / self.utts_per_speaker, i % self.utts_per_speaker)
    }
}

/// Two-pole resonator `y[n] = g·x[n] + 2r·cos θ·y[n−1] − r²·y[n−2]`
/// with unit gain at DC; the centre frequency may vary per sample.
fn resonate(x: &[f64], freq: impl Fn(usize) -> f64, bw: f64, sr: f64) -> Vec<f64> {
    let r = (-PI * bw / sr).exp();
    let a2 = -r * r;
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let a1 = 2.0 * r * (2.0 * PI * freq(n) / sr).cos();
        let g = 1.0 - a1 - a2;
        let y1 = if n >= 1 { y[n - 1] } else { 0.0 };
        let y2 = if n >= 2 { y[n - 2] } else { 0.0 };
        y[n] = g * x[n] + a1 * y1 + a2 * y2;
    }
    y
}

/// Syllable length in samples.
const SYLLABLE: usize = 4000;

/// One utterance of `voice`: per-utterance pitch offset, per-syllable
/// intonation and vowel (formant) shifts, vibrato, pulse jitter, breath
/// noise and a syllabic envelope.
pub fn synthesize<R: Rng + ?Sized>(voice: &Voice, duration_s: f64, rng: &mut R) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let syllables = n.div_ceil(SYLLABLE).max(1);
    let f0 = voice.f0 * rng.random_range(0.9..1.1);
    let intonation: Vec<f64> = (0..syllables).map(|_| rng.random_range(0.93..1.07)).collect();
    let vowels: Vec<[f64; 3]> = (0..syllables)
        .map(|_| [rng.random_range(0.8..1.2), rng.random_range(0.85..1.15), rng.random_range(0.92..1.08)])
        .collect();
    let vibrato_rate = rng.random_range(3.0..6.0);
    let vibrato_depth = rng.random_range(0.01..0.03);
    let phase0: f64 = rng.random_range(0.0..1.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let mut source = vec![0.0; n];
    let mut phase = phase0;
    for (i, s) in source.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f = f0 * intonation[i / SYLLABLE] * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin());
        phase += f / sr;
        if phase >= 1.0 {
            phase -= 1.0;
            *s = 1.0 + 0.1 * rng.random_range(-1.0..1.0);
        }
        let breath: f64 = StandardNormal.sample(rng);
        *s += voice.breathiness * breath;
    }
    let mut y = source;
    for (k, &(f, bw)) in voice.formants.iter().enumerate() {
        y = resonate(&y, |i| f * vowels[i / SYLLABLE][k], bw, sr);
    }
    let syllable_rate = sr / SYLLABLE as f64 / 2.0;
    for (i, v) in y.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let env = 0.55 + 0.45 * (2.0 * PI * syllable_rate * t + env_phase).sin();
        *v *= env;
    }
    let w = Waveform {
        samples: y,
        sample_rate: SAMPLE_RATE,
    };
    audio::normalize_peak(&w, 0.5)
}

/// Feature pipeline settings shared by training and embedding extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mel: MelConfig,
    pub augment: Option<NoiseReverbConfig>,
    pub specaugment: Option<SpecAugmentConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            augment: Some(NoiseReverbConfig::default()),
            specaugment: Some(SpecAugmentConfig::default()),
        }
    }
}

/// Builds training batches: crop → noise/reverb → log-mel → SpecAugment.
pub struct Pipeline {
    cfg: PipelineConfig,
    logmel: LogMel,
    workers: usize,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, workers: usize) -> Result<Self> {
        Ok(Self {
            logmel: LogMel::new(cfg.mel.clone())?,
            cfg,
            workers: workers.max(1),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Training features for one item; every random draw comes from `seed`.
    pub fn train_item(&self, w: &Waveform, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = crop_2s(w, &mut rng)?;
        if let Some(aug) = &self.cfg.augment {
            w = augment_noise_reverb(&w, aug, &mut rng)?;
        }
        let mut x = self.logmel.compute(&w)?;
        if let Some(sa) = &self.cfg.specaugment {
            x = specaugment(&x, sa, &mut rng)?.0;
        }
        Ok(x)
    }

    /// Clean full-length features for evaluation.
    pub fn eval_item(&self, w: &Waveform) -> Result<Tensor> {
        self.logmel.compute(w)
    }

    /// `B×mel×T` batch for the given corpus items at `step`.
    pub fn train_batch<C: Corpus + ?Sized>(&self, corpus: &C, items: &[usize], global_seed: u64, step: u64) -> Result<Tensor> {
        let job = |slot: usize| -> Result<Tensor> {
            let w = corpus.waveform(items[slot])?;
            self.train_item(&w, item_seed(global_seed, step, slot as u64))
        };
        let feats = parallel_map(items.len(), self.workers, job)?;
        stack(&feats)
    }
}

/// Runs `f(0..n)` on up to `workers` scoped threads, preserving order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("pipeline worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| invalid!("cannot stack an empty batch"))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        first.expect_same_shape(t)?;
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// Worker count from `RES2CTX_THREADS`, defaulting to 1.
pub fn workers_from_env() -> usize {
    std::env::var("RES2CTX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_order_sensitive_and_stable() {
        assert_eq!(item_seed(1, 2, 3), item_seed(1, 2, 3));
        assert_ne!(item_seed(1, 2, 3), item_seed(1, 3, 2));
        assert_ne!(item_seed(0, 0, 0), item_seed(0, 0, 1));
    }

    #[test]
    fn synth_corpus_is_deterministic_and_sized() {
        let c = SynthCorpus::new(20, 50, 7).unwrap();
        assert_eq!(c.len(), 1000);
        assert_eq!(c.speaker(999), 19);
        assert_eq!(c.waveform(123).unwrap(), SynthCorpus::new(20, 50, 7).unwrap().waveform(123).unwrap());
        assert_ne!(c.waveform(123).unwrap(), c.waveform(124).unwrap());
        let w = c.waveform(0).unwrap();
        assert_eq!(w.len(), 48_000);
        assert!((w.peak() - 0.5).abs() < 1e-12);
        assert!(SynthCorpus::new(1, 5, 0).is_err());
    }

    #[test]
    fn per_speaker_split_is_disjoint_and_covers_every_speaker() {
        let c = SynthCorpus::new(4, 5, 1).unwrap();
        let (train, test) = split_per_speaker(&c, 2);
        assert_eq!((train.len(), test.len()), (12, 8));
        assert!(train.iter().all(|i| !test.contains(i)));
        let held = Subset::new(&c, test.clone()).unwrap();
        assert_eq!(held.len(), 8);
        assert_eq!(held.num_speakers(), 4);
        for (k, &i) in test.iter().enumerate() {
            assert_eq!(held.speaker(k), c.speaker(i));
            assert_eq!(held.item_id(k), c.item_id(i));
        }
        assert!(Subset::new(&c, vec![20]).is_err());
    }

    #[test]
    fn speakers_are_separable_in_logmel_space() {
        let c = SynthCorpus::new(6, 4, 3).unwrap();
        let lm = LogMel::new(MelConfig::default()).unwrap();
        let means: Vec<Vec<f64>> = (0..c.len())
            .map(|i| {
                let m = lm.compute(&c.waveform(i).unwrap()).unwrap();
                let t = m.shape()[1];
                (0..80).map(|f| m.row(f).iter().sum::<f64>() / t as f64).collect()
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (mut within, mut between) = (Vec::new(), Vec::new());
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                let d = dist(&means[i], &means[j]);
                if c.speaker(i) == c.speaker(j) {
                    within.push(d);
                } else {
                    between.push(d);
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(avg(&within) < avg(&between), "{} vs {}", avg(&within), avg(&between));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = SynthCorpus::new(2, 2, 1).unwrap();
        let manifest = c.write_to_dir(dir.path()).unwrap();
        let m = ManifestCorpus::open(&manifest).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.num_speakers(), 2);
        assert_eq!(m.speaker_name(m.speaker(3)), "spk001");
        assert_eq!(m.item_id(1), "spk000_utt001");
        assert_eq!(m.waveform(0).unwrap().len(), 48_000);
        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "a.wav\tspk\n\nb.wav spk\n").unwrap();
        match read_manifest(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_do_not_depend_on_worker_count() {
        let c = SynthCorpus::new(3, 2, 5).unwrap();
        let items = [0, 3, 5, 1, 2];
        let one = Pipeline::new(PipelineConfig::default(), 1).unwrap();
        let three = Pipeline::new(PipelineConfig::default(), 3).unwrap();
        let a = one.train_batch(&c, &items, 11, 4).unwrap();
        assert_eq!(a.shape(), &[5, 80, 198]);
        assert_eq!(a, three.train_batch(&c, &items, 11, 4).unwrap());
        assert_ne!(a, one.train_batch(&c, &items, 11, 5).unwrap());
    }
}
