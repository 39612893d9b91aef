//! Evaluation metrics: word error rate, equal error rate with adaptive
//! s-norm for verification trials, weighted and plain accuracy.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let words: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if words == 0 {
        return Err(Error::EmptyReference);
    }
    let edits: usize = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / words as f64)
}

/// One scored verification trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    /// `true` for a same-speaker trial.
    pub same: bool,
}

impl TrialScore {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, score: f64, same: bool) -> Self {
        TrialScore {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            score,
            same,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub rate: f64,
    pub threshold: f64,
}

/// Equal error rate. A trial is accepted when `score ≥ θ`; θ sweeps the
/// distinct scores in increasing order and finally +∞ (nothing accepted).
/// The rate is read off where false accepts and false rejects cross, with
/// linear interpolation between the two thresholds around the crossing.
pub fn eer(scores: &[TrialScore]) -> Result<Eer> {
    let mut same: Vec<f64> = Vec::new();
    let mut diff: Vec<f64> = Vec::new();
    for t in scores {
        if !t.score.is_finite() {
            return Err(Error::NonFinite { op: "eer" });
        }
        if t.same {
            same.push(t.score)
        } else {
            diff.push(t.score)
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::SingleClassTrials);
    }
    same.sort_by(f64::total_cmp);
    diff.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = same.iter().chain(&diff).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (ns, nd) = (same.len() as f64, diff.len() as f64);
    let rates = |th: f64| {
        let far = (diff.len() - diff.partition_point(|&s| s < th)) as f64 / nd;
        let frr = same.partition_point(|&s| s < th) as f64 / ns;
        (far, frr)
    };
    let mut prev: Option<(f64, f64, f64)> = None;
    for &th in &thresholds {
        let (far, frr) = rates(th);
        if frr >= far {
            let Some((pth, pfar, pfrr)) = prev else {
                return Ok(Eer { rate: far, threshold: th });
            };
            if frr == far {
                return Ok(Eer { rate: far, threshold: th });
            }
            let (d0, d1) = (pfar - pfrr, far - frr);
            let t = d0 / (d0 - d1);
            let rate = pfar + t * (far - pfar);
            let threshold = if th.is_finite() { pth + t * (th - pth) } else { pth };
            return Ok(Eer { rate, threshold });
        }
        prev = Some((th, far, frr));
    }
    unreachable!("at +inf every same trial is rejected")
}

/// Mean and sample standard deviation of the `k` highest cohort scores.
pub fn top_k_stats(cohort: &[f64], k: usize) -> Result<(f64, f64)> {
    if k == 0 || cohort.len() < k {
        return Err(Error::config(format!("cohort of {} cannot supply top-{k}", cohort.len())));
    }
    let mut sorted = cohort.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..k];
    let mean = top.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return Err(Error::DegenerateCohort);
    }
    let var = top.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return Err(Error::DegenerateCohort);
    }
    Ok((mean, sd))
}

/// `min(10, cohort size)`.
pub fn default_top_k(cohort_len: usize) -> usize {
    cohort_len.min(10)
}

/// `½[(raw − μ_e)/σ_e + (raw − μ_t)/σ_t]` with top-K cohort statistics.
pub fn adaptive_s_norm(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64], k: usize) -> Result<f64> {
    let (me, se) = top_k_stats(enroll_cohort, k)?;
    let (mt, st) = top_k_stats(test_cohort, k)?;
    Ok(0.5 * ((raw - me) / se + (raw - mt) / st))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn check_lengths(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(pred.len(), gold.len()));
    }
    if gold.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class accuracies.
pub fn weighted_accuracy(pred: &[usize], gold: &[usize], num_classes: usize) -> Result<f64> {
    Ok(per_class_accuracy(pred, gold, num_classes)?.iter().sum::<f64>() / num_classes as f64)
}

pub fn per_class_accuracy(pred: &[usize], gold: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    check_lengths(pred, gold)?;
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if g >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: g,
                classes: num_classes,
            });
        }
        totals[g] += 1;
        hits[g] += usize::from(p == g);
    }
    if let Some(c) = totals.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    Ok(hits.iter().zip(&totals).map(|(&h, &n)| h as f64 / n as f64).collect())
}

/// A task's headline number plus supporting values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    /// Name of the primary metric, e.g. `wer`, `eer`, `1-wa`.
    pub metric: String,
    /// Lower is better for every task.
    pub value: f64,
    #[serde(default)]
    pub aux: BTreeMap<String, f64>,
}

/// A line of a trial list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub same: bool,
    pub enroll_id: String,
    pub test_id: String,
}

fn parse_label(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "target" | "same" | "true" => Some(true),
        "0" | "nontarget" | "different" | "false" => Some(false),
        _ => None,
    }
}

/// Parses `label enroll_id test_id` lines; blank lines and `#` comments are
/// skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [label, enroll, test] = f[..] else {
            return Err(Error::Parse(format!("trial line {}: expected 3 fields", n + 1)));
        };
        let same = parse_label(label).ok_or_else(|| Error::Parse(format!("trial line {}: bad label {label}", n + 1)))?;
        out.push(Trial {
            same,
            enroll_id: enroll.to_string(),
            test_id: test.to_string(),
        });
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", u8::from(t.same), t.enroll_id, t.test_id))
        .collect()
}

/// Score file row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub enroll_id: String,
    pub test_id: String,
    pub raw: f64,
    pub normalized: f64,
}

pub fn write_scores<W: Write>(w: W, rows: &[ScoreRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
