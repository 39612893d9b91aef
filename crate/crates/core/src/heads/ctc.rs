//! Connectionist temporal classification: log-space forward-backward loss
//! and greedy decoding. Label 0 is the blank.

use crate::autodiff::{log_softmax_vec, Graph, Scalar, Var};
use crate::{Error, Result};

pub const BLANK: usize = 0;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Number of adjacent equal labels; each one forces a blank between them.
pub fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Checks label range `1..=vocab` and that `frames` can fit the target.
pub fn validate_target(target: &[usize], vocab: usize, frames: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l > vocab) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: vocab + 1,
        });
    }
    let r = repeats(target);
    if frames < target.len() + r {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            repeats: r,
            frames,
        });
    }
    Ok(())
}

/// CTC negative log-likelihood of `target` under per-frame log
/// probabilities `log_probs[T×C]`, together with the gradient of that loss
/// w.r.t. the unnormalized logits the log probabilities came from.
pub fn ctc_loss_and_grad(log_probs: &[f64], classes: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes < 2 {
        return Err(Error::config("CTC needs at least one non-blank class"));
    }
    let frames = log_probs.len() / classes;
    if frames == 0 || frames * classes != log_probs.len() {
        return Err(Error::EmptySequence { op: "ctc_loss" });
    }
    validate_target(target, classes - 1, frames)?;

    let n = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..n).map(|s| if s % 2 == 0 { BLANK } else { target[s / 2] }).collect();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * n];
    alpha[0] = lp(0, ext[0]);
    if n > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..n {
            let prev = &alpha[(t - 1) * n..t * n];
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { neg };
            let c = if skip_ok(s) { prev[s - 2] } else { neg };
            let acc = lse3(a, b, c);
            alpha[t * n + s] = if acc == neg { neg } else { acc + lp(t, ext[s]) };
        }
    }
    let last = &alpha[(frames - 1) * n..];
    let log_likelihood = if n > 1 { lse2(last[n - 1], last[n - 2]) } else { last[0] };
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![neg; frames * n];
    beta[(frames - 1) * n + n - 1] = 0.0;
    if n > 1 {
        beta[(frames - 1) * n + n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let next = |s2: usize| beta[(t + 1) * n + s2] + lp(t + 1, ext[s2]);
            let a = next(s);
            let b = if s + 1 < n { next(s + 1) } else { neg };
            let c = if s + 2 < n && skip_ok(s + 2) { next(s + 2) } else { neg };
            beta[t * n + s] = lse3(a, b, c);
        }
    }

    let mut grad: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
    for t in 0..frames {
        for s in 0..n {
            let occ = alpha[t * n + s] + beta[t * n + s] - log_likelihood;
            if occ > neg {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_likelihood, grad))
}

/// CTC loss over `logits[T×(V+1)]` recorded on the graph.
pub fn ctc_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, target: &[usize]) -> Result<Var> {
    let lv = g.value(logits);
    let Some((t, c)) = lv.dims2() else {
        return Err(Error::Shape {
            op: "ctc_loss",
            left: lv.shape().to_vec(),
            right: vec![],
        });
    };
    if t == 0 {
        return Err(Error::EmptySequence { op: "ctc_loss" });
    }
    let mut log_probs = Vec::with_capacity(t * c);
    for row in lv.rows() {
        let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        log_probs.extend(log_softmax_vec(&r));
    }
    let (loss, grad) = ctc_loss_and_grad(&log_probs, c, target)?;
    g.fused_scalar(logits, "ctc_loss", S::of(loss), grad.into_iter().map(S::of).collect())
}

/// Per-frame argmax (ties to the lowest index), merge repeats, drop blanks.
pub fn greedy_decode<S: Scalar>(logits: &crate::autodiff::Tensor<S>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.rows() {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Collapse of an explicit frame path.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
