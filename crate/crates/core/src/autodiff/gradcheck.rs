use rand::seq::index::sample;

use super::{Graph, ParamId, ParamStore, Var};
use crate::rng::SeedStream;
use crate::{Error, Result};

/// Finite-difference settings. The perturbation for coordinate `p` is
/// `h = step · max(1, |p|)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Upper bound on checked coordinates; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound on the error denominator, so coordinates whose true
    /// gradient is zero (e.g. attention key biases) compare rounding noise
    /// against an absolute scale instead of against itself. The bound
    /// actually used is at least `1e6 · ε · |f| / h`, well above the
    /// difference quotient's rounding noise.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            max_coords: None,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Path and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// The stencil's rounding error is about `10 · ε · |f| / h`; scaling that by
/// 1e5 keeps pure rounding noise below a relative error of 1e-5, so a
/// coordinate only fails when its absolute error is far above what the
/// finite difference can resolve.
const NOISE_SCALE: f64 = 1e6;

/// `|a − b| / max(1e-12, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-12)
}

fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / f64::max(floor, a.abs() + b.abs())
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares `backward()` against the fourth-order central difference
/// `(−f(p+2h) + 8f(p+h) − 8f(p−h) + f(p−2h)) / 12h` on the trainable
/// coordinates of `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(Error::config("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let f0 = g.value(loss).item().abs();
    let grads = g.backward(loss)?;

    let coords: Vec<(ParamId, usize)> = store
        .trainable_ids()
        .into_iter()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = match cfg.max_coords {
        Some(m) if m < coords.len() => {
            let mut rng = SeedStream::new(cfg.seed).rng("grad_check");
            let mut idx = sample(&mut rng, coords.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (id, i) in chosen {
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
        let p = store.value(id).data()[i];
        let h = cfg.step * p.abs().max(1.0);
        let mut at = |x: f64| -> Result<f64> {
            work.value_mut(id).data_mut()[i] = x;
            eval(&work, &f)
        };
        let (u2, u1, d1, d2) = (at(p + 2.0 * h)?, at(p + h)?, at(p - h)?, at(p - 2.0 * h)?);
        work.value_mut(id).data_mut()[i] = p;
        let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * h);
        let noise = NOISE_SCALE * f64::EPSILON * f0.max(1.0) / h;
        let err = relative_error_floored(analytic, numeric, cfg.floor.max(noise));
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.path(id).to_string(), i));
        }
    }
    Ok(report)
}
