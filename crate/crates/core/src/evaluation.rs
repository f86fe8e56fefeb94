//! Trial scoring and verification metrics: cosine scoring, AS-norm, EER,
//! minDCF and DET tables, plus the text formats they travel in.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{parallel_map, Corpus, Pipeline};
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::params::Mode;

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("cosine of vectors with {} and {} entries", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid!("cosine of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(invalid!("P_target must lie in (0, 1), got {}", self.p_target));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(invalid!("detection costs must be positive"));
        }
        Ok(())
    }

    /// Cost of the better of accept-all and reject-all.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa) / self.default_cost()
    }
}

/// One operating point: a trial is accepted when `score ≥ threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("trial scores".into()));
    }
    let nt = labels.iter().filter(|&&l| l).count();
    let nn = labels.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(invalid!("metrics need at least one target and one non-target trial (got {nt} and {nn})"));
    }
    Ok((nt, nn))
}

/// Operating points at every unique score in ascending order, then `+∞`.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<DetPoint>> {
    let (nt, nn) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    let (mut misses, mut false_accepts) = (0usize, nn);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        points.push(DetPoint {
            threshold: t,
            far: false_accepts as f64 / nn as f64,
            frr: misses as f64 / nt as f64,
        });
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                misses += 1;
            } else {
                false_accepts -= 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// DET table: `−∞`, every unique score, `+∞`.
pub fn det_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<DetPoint>> {
    let mut points = vec![DetPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    }];
    points.extend(sweep(scores, labels)?);
    Ok(points)
}

/// EER and the threshold at the crossing of a threshold-ordered curve that
/// starts at FAR=1, FRR=0 and ends at FAR=0, FRR=1.
pub fn eer_from_curve(points: &[DetPoint]) -> Result<(f64, f64)> {
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (da, db) = (a.far - a.frr, b.far - b.frr);
        if db > 0.0 {
            continue;
        }
        if db == 0.0 {
            return Ok((b.far, b.threshold));
        }
        let alpha = da / (da - db);
        let threshold = if b.threshold.is_finite() && a.threshold.is_finite() {
            a.threshold + alpha * (b.threshold - a.threshold)
        } else {
            a.threshold
        };
        return Ok((a.far + alpha * (b.far - a.far), threshold));
    }
    Err(invalid!("DET curve never reaches FAR ≤ FRR"))
}

/// Equal error rate, linearly interpolated between adjacent operating
/// points.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(eer_from_curve(&sweep(scores, labels)?)?.0)
}

/// Threshold at which [`eer`] is attained (interpolated).
pub fn eer_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(eer_from_curve(&sweep(scores, labels)?)?.1)
}

/// Normalized minimum detection cost over thresholds at the midpoints of
/// consecutive unique scores plus `±∞`.
pub fn min_dcf(scores: &[f64], labels: &[bool], p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let points = sweep(scores, labels)?;
    Ok(points
        .iter()
        .map(|q| p.normalized_cost(q.frr, q.far))
        .fold(f64::INFINITY, f64::min))
}

/// Normalized detection cost at a fixed threshold.
pub fn dcf_at(scores: &[f64], labels: &[bool], threshold: f64, p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let (nt, nn) = class_counts(scores, labels)?;
    let misses = scores.iter().zip(labels).filter(|(&s, &l)| l && s < threshold).count();
    let fas = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= threshold).count();
    Ok(p.normalized_cost(misses as f64 / nt as f64, fas as f64 / nn as f64))
}

pub const AS_NORM_EPS: f64 = 1e-12;

/// Mean and floored population deviation of a top-K cohort score set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
    /// The raw deviation fell below the floor.
    pub degenerate: bool,
}

impl CohortStats {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.len() < 2 {
            return Err(invalid!("cohort statistics need at least 2 scores"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Ok(Self {
            mean,
            std: std.max(AS_NORM_EPS),
            degenerate: std < AS_NORM_EPS,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedScore {
    pub score: f64,
    pub degenerate: bool,
}

/// Symmetric normalization of `raw` against enrollment and test cohort
/// statistics.
pub fn as_norm_from_stats(raw: f64, enroll: &CohortStats, test: &CohortStats) -> NormalizedScore {
    NormalizedScore {
        score: 0.5 * ((raw - enroll.mean) / enroll.std + (raw - test.mean) / test.std),
        degenerate: enroll.degenerate || test.degenerate,
    }
}

/// Cohort embeddings with a top-K size (capped at the cohort size).
#[derive(Clone, Debug)]
pub struct CohortSet {
    embeddings: Vec<Vec<f64>>,
    k: usize,
}

impl CohortSet {
    pub fn new(embeddings: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(invalid!("AS-norm top-K must be at least 2, got {k}"));
        }
        if embeddings.len() < 2 {
            return Err(invalid!("AS-norm cohort needs at least 2 embeddings, got {}", embeddings.len()));
        }
        let dim = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(invalid!("cohort embeddings differ in dimension"));
        }
        Ok(Self {
            k: k.min(embeddings.len()),
            embeddings,
        })
    }

    pub fn from_table(table: &EmbeddingTable, k: usize) -> Result<Self> {
        Self::new(table.rows.clone(), k)
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Effective K after capping.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Statistics of the K highest cosine scores of `e` against the cohort.
    pub fn stats(&self, e: &[f64]) -> Result<CohortStats> {
        let mut s = self.embeddings.iter().map(|c| cosine(e, c)).collect::<Result<Vec<_>>>()?;
        s.sort_by(|a, b| b.total_cmp(a));
        CohortStats::from_scores(&s[..self.k])
    }
}

pub fn as_norm(raw: f64, enroll: &[f64], test: &[f64], cohort: &CohortSet) -> Result<NormalizedScore> {
    Ok(as_norm_from_stats(raw, &cohort.stats(enroll)?, &cohort.stats(test)?))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn non_blank(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(n, l)| (n + 1, l)).filter(|(_, l)| !l.trim().is_empty())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// `enroll_id test_id label` lines, label 1 (target) or 0.
pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    non_blank(&text)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [enroll, test, label] = f[..] else {
                return Err(parse_err(path, n, "expected `enroll_id test_id label`"));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(path, n, format!("label must be 1 or 0, got {other:?}"))),
            };
            Ok(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                target,
            })
        })
        .collect()
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let mut text = String::new();
    for t in trials {
        let _ = writeln!(text, "{} {} {}", t.enroll, t.test, u8::from(t.target));
    }
    write_text(path.as_ref(), &text)
}

/// Every unordered pair of distinct items; target iff the speakers match.
pub fn all_pairs_trials(ids: &[String], speakers: &[usize]) -> Vec<Trial> {
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            out.push(Trial {
                enroll: ids[i].clone(),
                test: ids[j].clone(),
                target: speakers[i] == speakers[j],
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

/// `enroll_id<TAB>test_id<TAB>score` lines.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoredTrial>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    non_blank(&text)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let [enroll, test, score] = f[..] else {
                return Err(parse_err(path, n, "expected `enroll_id<TAB>test_id<TAB>score`"));
            };
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| parse_err(path, n, format!("bad score {score:?}")))?;
            Ok(ScoredTrial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                score,
            })
        })
        .collect()
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[ScoredTrial]) -> Result<()> {
    let mut text = String::new();
    for s in scores {
        let _ = writeln!(text, "{}\t{}\t{}", s.enroll, s.test, s.score);
    }
    write_text(path.as_ref(), &text)
}

/// Attaches trial labels to scores by `(enroll, test)` key.
pub fn label_scores(trials: &[Trial], scores: &[ScoredTrial]) -> Result<(Vec<f64>, Vec<bool>)> {
    let by_key: HashMap<(&str, &str), f64> = scores.iter().map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score)).collect();
    let mut out_scores = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in trials {
        let s = by_key
            .get(&(t.enroll.as_str(), t.test.as_str()))
            .ok_or_else(|| invalid!("no score for trial {} {}", t.enroll, t.test))?;
        out_scores.push(*s);
        labels.push(t.target);
    }
    Ok((out_scores, labels))
}

/// Id → embedding map with a fixed dimension, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<()> {
        let id = id.into();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(invalid!("embedding id {id:?} must be non-empty without whitespace"));
        }
        if let Some(first) = self.rows.first() {
            if first.len() != v.len() {
                return Err(invalid!("embedding {id} has dimension {}, table has {}", v.len(), first.len()));
            }
        }
        if self.index.contains_key(&id) {
            return Err(invalid!("duplicate embedding id {id}"));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| invalid!("no embedding for id {id}"))
    }

    /// `id<TAB>v1<TAB>…<TAB>vD` lines.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        let mut table = Self::new();
        for (n, line) in non_blank(&text) {
            let mut f = line.split('\t');
            let id = f.next().unwrap_or_default();
            let v = f
                .map(|x| x.trim().parse::<f64>().map_err(|_| parse_err(path, n, format!("bad value {x:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(parse_err(path, n, "expected an id followed by values"));
            }
            table.insert(id, v).map_err(|e| parse_err(path, n, e.to_string()))?;
        }
        Ok(table)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::new();
        for (id, row) in self.ids.iter().zip(&self.rows) {
            text.push_str(id);
            for v in row {
                let _ = write!(text, "\t{v}");
            }
            text.push('\n');
        }
        write_text(path.as_ref(), &text)
    }
}

/// Scores for a trial list plus the number of trials whose AS-norm
/// statistics hit the deviation floor.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<ScoredTrial>,
    pub degenerate: usize,
}

/// Cosine scores, optionally AS-normalized. Cohort statistics are computed
/// once per distinct id.
pub fn score_trials(trials: &[Trial], table: &EmbeddingTable, cohort: Option<&CohortSet>) -> Result<ScoreSet> {
    let mut stats: HashMap<&str, CohortStats> = HashMap::new();
    let mut degenerate = 0;
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials {
        let (e, x) = (table.require(&t.enroll)?, table.require(&t.test)?);
        let mut score = cosine(e, x)?;
        if let Some(c) = cohort {
            for id in [t.enroll.as_str(), t.test.as_str()] {
                if !stats.contains_key(id) {
                    stats.insert(id, c.stats(table.require(id)?)?);
                }
            }
            let n = as_norm_from_stats(score, &stats[t.enroll.as_str()], &stats[t.test.as_str()]);
            degenerate += usize::from(n.degenerate);
            score = n.score;
        }
        scores.push(ScoredTrial {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score,
        });
    }
    Ok(ScoreSet { scores, degenerate })
}

/// Eval-mode embeddings of every corpus item on clean full-length features.
pub fn extract_embeddings<C: Corpus + ?Sized>(model: &Model, corpus: &C, pipeline: &Pipeline, workers: usize) -> Result<EmbeddingTable> {
    let feats = parallel_map(corpus.len(), workers, |i| pipeline.eval_item(&corpus.waveform(i)?))?;
    let mut table = EmbeddingTable::new();
    for (i, x) in feats.iter().enumerate() {
        let e = model.embed(x, Mode::Eval)?;
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("embedding of {}", corpus.item_id(i))));
        }
        table.insert(corpus.item_id(i), e.into_data())?;
    }
    Ok(table)
}

pub fn write_det(path: impl AsRef<Path>, points: &[DetPoint]) -> Result<()> {
    let mut text = String::from("threshold\tfar\tfrr\n");
    for p in points {
        let _ = writeln!(text, "{}\t{}\t{}", p.threshold, p.far, p.frr);
    }
    write_text(path.as_ref(), &text)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub trials: usize,
    pub eer: f64,
    pub min_dcf: f64,
}

pub fn evaluate(scores: &[f64], labels: &[bool], p: &DcfParams) -> Result<Metrics> {
    Ok(Metrics {
        trials: scores.len(),
        eer: eer(scores, labels)?,
        min_dcf: min_dcf(scores, labels, p)?,
    })
}

pub fn write_metrics(path: impl AsRef<Path>, m: &Metrics, p: &DcfParams) -> Result<()> {
    let text = format!(
        "metric\tvalue\ntrials\t{}\neer\t{}\nmin_dcf\t{}\np_target\t{}\nc_miss\t{}\nc_fa\t{}\n",
        m.trials, m.eer, m.min_dcf, p.p_target, p.c_miss, p.c_fa
    );
    write_text(path.as_ref(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Vec<f64>, Vec<bool>) {
        (
            vec![0.9, 0.7, 0.5, 0.6, 0.3, 0.1],
            vec![true, true, true, false, false, false],
        )
    }

    /// Operating points by counting against every candidate threshold.
    fn brute_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - nt;
        let mut cands: Vec<f64> = scores.to_vec();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        cands.push(f64::INFINITY);
        cands
            .iter()
            .map(|&t| {
                let fa = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count();
                let miss = scores.iter().zip(labels).filter(|(&s, &l)| l && s < t).count();
                (fa as f64 / nn, miss as f64 / nt)
            })
            .collect()
    }

    fn brute_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let p = brute_points(scores, labels);
        for k in 0..p.len() - 1 {
            let (da, db) = (p[k].0 - p[k].1, p[k + 1].0 - p[k + 1].1);
            if db > 0.0 {
                continue;
            }
            if db == 0.0 {
                return p[k + 1].0;
            }
            let alpha = da / (da - db);
            return p[k].0 + alpha * (p[k + 1].0 - p[k].0);
        }
        unreachable!()
    }

    fn brute_min_dcf(scores: &[f64], labels: &[bool], p: &DcfParams) -> f64 {
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - nt;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let mut thresholds = vec![f64::NEG_INFINITY, f64::INFINITY];
        thresholds.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        thresholds
            .iter()
            .map(|&t| {
                let fa = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count();
                let miss = scores.iter().zip(labels).filter(|(&s, &l)| l && s < t).count();
                p.normalized_cost(miss as f64 / nt, fa as f64 / nn)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..=60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64 - 0.3).collect();
        (scores, labels)
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -3.0];
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine(&a, &[-1.0, -2.0, 3.0]).unwrap(), -1.0);
        assert!(cosine(&a, &[0.0; 3]).is_err());
        assert!(cosine(&a, &[1.0]).is_err());
    }

    #[test]
    fn six_trial_fixture_gives_one_third() {
        let (s, l) = fixture();
        assert_eq!(eer(&s, &l).unwrap(), 1.0 / 3.0);
        assert_eq!(brute_eer(&s, &l), 1.0 / 3.0);
    }

    #[test]
    fn separated_scores_give_zero() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [true, true, false, false];
        assert_eq!(eer(&s, &l).unwrap(), 0.0);
        assert_eq!(min_dcf(&s, &l, &DcfParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn single_class_input_is_rejected() {
        let p = DcfParams::default();
        assert!(eer(&[0.1, 0.2], &[true, true]).is_err());
        assert!(min_dcf(&[0.1, 0.2], &[false, false], &p).is_err());
        assert!(det_curve(&[0.1], &[true]).is_err());
        assert!(eer(&[0.1, f64::NAN], &[true, false]).is_err());
        assert!(eer(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn random_labels_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let l: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
        assert!((eer(&s, &l).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn metrics_match_brute_force_oracles_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let p = DcfParams::default();
        for _ in 0..1000 {
            let (s, l) = random_instance(&mut rng);
            assert_eq!(eer(&s, &l).unwrap(), brute_eer(&s, &l), "{s:?} {l:?}");
            assert_eq!(min_dcf(&s, &l, &p).unwrap(), brute_min_dcf(&s, &l, &p), "{s:?} {l:?}");
        }
    }

    #[test]
    fn min_dcf_on_two_hundred_trials_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let s: Vec<f64> = l.iter().map(|&t| rng.random::<f64>() + if t { 0.3 } else { 0.0 }).collect();
        let p = DcfParams::default();
        let v = min_dcf(&s, &l, &p).unwrap();
        assert_eq!(v, brute_min_dcf(&s, &l, &p));
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn det_table_shape_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (s, l) = random_instance(&mut rng);
            let det = det_curve(&s, &l).unwrap();
            let mut u = s.clone();
            u.sort_by(f64::total_cmp);
            u.dedup();
            assert_eq!(det.len(), u.len() + 2);
            assert_eq!((det[0].far, det[0].frr), (1.0, 0.0));
            let last = det[det.len() - 1];
            assert_eq!((last.far, last.frr), (0.0, 1.0));
            for w in det.windows(2) {
                assert!(w[1].far <= w[0].far && w[1].frr >= w[0].frr);
                assert!(w[1].threshold > w[0].threshold);
            }
            let from_table = eer_from_curve(&det).unwrap().0;
            assert!((from_table - eer(&s, &l).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn det_file_has_header_and_rows() {
        let (s, l) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.tsv");
        write_det(&p, &det_curve(&s, &l).unwrap()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold\tfar\tfrr");
        assert_eq!(lines.len(), 1 + 8);
        assert_eq!(lines[1], "-inf\t1\t0");
        assert_eq!(lines[8], "inf\t0\t1");
    }

    #[test]
    fn min_dcf_is_bounded_by_cost_at_eer_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DcfParams::default();
        for _ in 0..200 {
            let (s, l) = random_instance(&mut rng);
            let t = eer_threshold(&s, &l).unwrap();
            assert!(min_dcf(&s, &l, &p).unwrap() <= dcf_at(&s, &l, t, &p).unwrap());
        }
    }

    #[test]
    fn dcf_params_are_validated() {
        let (s, l) = fixture();
        let bad = DcfParams {
            p_target: 1.0,
            ..DcfParams::default()
        };
        assert!(min_dcf(&s, &l, &bad).is_err());
        let bad = DcfParams {
            c_fa: 0.0,
            ..DcfParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn as_norm_hand_example() {
        let e = CohortStats::from_scores(&[0.2, 0.4]).unwrap();
        let t = CohortStats::from_scores(&[0.1, 0.5]).unwrap();
        assert!((e.mean - 0.3).abs() < 1e-15 && (e.std - 0.1).abs() < 1e-15);
        assert!((t.mean - 0.3).abs() < 1e-15 && (t.std - 0.2).abs() < 1e-15);
        let n = as_norm_from_stats(0.5, &e, &t);
        assert!((n.score - 1.5).abs() < 1e-12);
        assert!(!n.degenerate);
        let oracle = 0.5 * ((0.5 - 0.3) / 0.1 + (0.5 - 0.3) / 0.2);
        assert!((n.score - oracle).abs() < 1e-12);
    }

    #[test]
    fn as_norm_at_cohort_mean_is_zero() {
        let e = CohortStats::from_scores(&[0.1, 0.3, 0.8]).unwrap();
        let t = CohortStats::from_scores(&[0.4, 0.5]).unwrap();
        let raw = e.mean;
        let t = CohortStats { mean: raw, ..t };
        assert_eq!(as_norm_from_stats(raw, &e, &t).score, 0.0);
    }

    #[test]
    fn degenerate_cohort_hits_the_floor_and_is_flagged() {
        let s = CohortStats::from_scores(&[0.4, 0.4, 0.4]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.std, AS_NORM_EPS);
        let n = as_norm_from_stats(s.mean, &s, &s);
        assert!(n.degenerate);
        assert_eq!(n.score, 0.0);
        assert!(CohortStats::from_scores(&[0.1]).is_err());
    }

    #[test]
    fn cohort_top_k_selection_and_capping() {
        let cohort = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 0.0]];
        let e = [1.0, 0.0];
        let c2 = CohortSet::new(cohort.clone(), 2).unwrap();
        let top = [1.0, 0.5f64.sqrt()];
        let want = CohortStats::from_scores(&top).unwrap();
        let got = c2.stats(&e).unwrap();
        assert!((got.mean - want.mean).abs() < 1e-15 && (got.std - want.std).abs() < 1e-15);

        let capped = CohortSet::new(cohort.clone(), 100).unwrap();
        assert_eq!(capped.k(), 4);
        let all: Vec<f64> = cohort.iter().map(|c| cosine(&e, c).unwrap()).collect();
        let full = CohortStats::from_scores(&all).unwrap();
        let got = capped.stats(&e).unwrap();
        assert!((got.mean - full.mean).abs() < 1e-15 && (got.std - full.std).abs() < 1e-15);

        assert!(CohortSet::new(cohort.clone(), 1).is_err());
        assert!(CohortSet::new(vec![vec![1.0]], 2).is_err());
    }

    #[test]
    fn trial_score_and_table_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trials = vec![
            Trial {
                enroll: "a".into(),
                test: "b".into(),
                target: true,
            },
            Trial {
                enroll: "a".into(),
                test: "c".into(),
                target: false,
            },
        ];
        let tp = dir.path().join("trials.txt");
        write_trials(&tp, &trials).unwrap();
        assert_eq!(std::fs::read_to_string(&tp).unwrap(), "a b 1\na c 0\n");
        assert_eq!(read_trials(&tp).unwrap(), trials);

        let mut table = EmbeddingTable::new();
        table.insert("a", vec![1.0, 0.1]).unwrap();
        table.insert("b", vec![0.9, 0.2]).unwrap();
        table.insert("c", vec![-0.3, 1.0 / 3.0]).unwrap();
        assert!(table.insert("c", vec![0.0, 1.0]).is_err());
        assert!(table.insert("d", vec![0.0]).is_err());
        let ep = dir.path().join("emb.tsv");
        table.write(&ep).unwrap();
        assert_eq!(EmbeddingTable::read(&ep).unwrap(), table);

        let scored = score_trials(&trials, &table, None).unwrap();
        assert_eq!(scored.degenerate, 0);
        assert_eq!(scored.scores[0].score, cosine(&[1.0, 0.1], &[0.9, 0.2]).unwrap());
        let sp = dir.path().join("scores.tsv");
        write_scores(&sp, &scored.scores).unwrap();
        assert_eq!(read_scores(&sp).unwrap(), scored.scores);
        let (s, l) = label_scores(&trials, &scored.scores).unwrap();
        assert_eq!(l, vec![true, false]);
        assert_eq!(s[1], scored.scores[1].score);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.txt");
        std::fs::write(&p, "a b 1\n\na c 2\n").unwrap();
        match read_trials(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "a\tb\tx\n").unwrap();
        assert!(matches!(read_scores(&p), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&p, "a\t1\t2\nb\t1\n").unwrap();
        assert!(matches!(EmbeddingTable::read(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn as_normed_scoring_uses_cohort() {
        let mut table = EmbeddingTable::new();
        table.insert("e", vec![1.0, 0.2, 0.0]).unwrap();
        table.insert("t", vec![0.8, 0.1, 0.3]).unwrap();
        let cohort = CohortSet::new(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]], 2).unwrap();
        let trials = [Trial {
            enroll: "e".into(),
            test: "t".into(),
            target: true,
        }];
        let got = score_trials(&trials, &table, Some(&cohort)).unwrap();
        let raw = cosine(table.get("e").unwrap(), table.get("t").unwrap()).unwrap();
        let want = as_norm(raw, table.get("e").unwrap(), table.get("t").unwrap(), &cohort).unwrap();
        assert_eq!(got.scores[0].score, want.score);
        let missing = [Trial {
            enroll: "e".into(),
            test: "zz".into(),
            target: false,
        }];
        assert!(score_trials(&missing, &table, None).is_err());
    }

    #[test]
    fn all_pairs_labels_follow_speakers() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let t = all_pairs_trials(&ids, &[0, 0, 1]);
        assert_eq!(t.len(), 3);
        assert_eq!(t.iter().filter(|t| t.target).count(), 1);
    }
}
