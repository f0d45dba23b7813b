//! Platt scaling: fit two scalars (a, b) on validation correctness data
//! by minimizing the negative log likelihood of `sigmoid(a z + b)`, and
//! apply them to probability volumes. Stored maps hold probabilities, so
//! logits are reconstructed with epsilon clamping.

use crate::error::{Error, Result};
use crate::volume::ProbabilityVolume;
use serde::{Deserialize, Serialize};

/// Clamp used when inverting the sigmoid on saturated probabilities.
pub const DEFAULT_LOGIT_EPSILON: f64 = 1e-6;

const MAX_NEWTON_ITERS: usize = 200;

/// The two calibration scalars. Serialized as `{"a": .., "b": ..}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
}

/// One validation voxel: the reconstructed logit and whether the atlas
/// label matched the ground truth there.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationSample {
    pub logit: f64,
    pub correct: bool,
}

/// Numerically stable sigmoid.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid with clamping: `ln(p' / (1 - p'))` for
/// `p' = clamp(p, epsilon, 1 - epsilon)`.
pub fn prob_to_logit(p: f64, epsilon: f64) -> f64 {
    debug_assert!(epsilon > 0.0 && epsilon < 0.5);
    let p = p.clamp(epsilon, 1.0 - epsilon);
    (p / (1.0 - p)).ln()
}

/// Negative log likelihood of `sigmoid(a z + b)` over the samples,
/// summed in input order.
pub fn nll(samples: &[CalibrationSample], a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let m = a * s.logit + b;
        // ln(1 + e^m) - y m, evaluated without overflow
        let softplus = m.max(0.0) + (-m.abs()).exp().ln_1p();
        total += softplus - if s.correct { m } else { 0.0 };
    }
    total
}

/// Fit (a, b) by Newton's method with backtracking, starting from the
/// identity transform (1, 0). The objective is convex, so any accepted
/// sequence of descent steps reaches the optimum; starting at (1, 0)
/// also guarantees the fitted loss never exceeds the loss there.
pub fn platt_fit(samples: &[CalibrationSample]) -> Result<PlattParams> {
    if samples.is_empty() {
        return Err(Error::EmptySample("calibration samples".into()));
    }
    let n_correct = samples.iter().filter(|s| s.correct).count();
    if n_correct == 0 || n_correct == samples.len() {
        return Err(Error::SingleClass);
    }
    for (i, s) in samples.iter().enumerate() {
        if !s.logit.is_finite() {
            return Err(Error::InvalidValue(format!(
                "calibration sample {i} has non-finite logit {}",
                s.logit
            )));
        }
    }

    let mut a = 1.0f64;
    let mut b = 0.0f64;
    let mut loss = nll(samples, a, b);
    let grad_tol = 1e-10 * samples.len() as f64;

    for _ in 0..MAX_NEWTON_ITERS {
        let mut g_a = 0.0;
        let mut g_b = 0.0;
        let mut h_aa = 1e-12;
        let mut h_ab = 0.0;
        let mut h_bb = 1e-12;
        for s in samples {
            let p = sigmoid(a * s.logit + b);
            let d = p - if s.correct { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            g_a += d * s.logit;
            g_b += d;
            h_aa += w * s.logit * s.logit;
            h_ab += w * s.logit;
            h_bb += w;
        }
        if g_a.abs() < grad_tol && g_b.abs() < grad_tol {
            break;
        }
        let det = h_aa * h_bb - h_ab * h_ab;
        let (mut da, mut db) = if det.abs() > 0.0 && det.is_finite() {
            (
                -(h_bb * g_a - h_ab * g_b) / det,
                -(h_aa * g_b - h_ab * g_a) / det,
            )
        } else {
            (-g_a, -g_b)
        };
        // fall back to the gradient direction if Newton points uphill
        if g_a * da + g_b * db >= 0.0 {
            da = -g_a;
            db = -g_b;
        }
        let mut step = 1.0f64;
        let mut accepted = false;
        while step >= 1e-12 {
            let cand = nll(samples, a + step * da, b + step * db);
            if cand < loss {
                a += step * da;
                b += step * db;
                loss = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(PlattParams { a, b })
}

/// Apply the calibration: per voxel, `sigmoid(a * logit(p) + b)`.
pub fn platt_apply(
    prob_map: &ProbabilityVolume,
    params: &PlattParams,
    epsilon: f64,
) -> ProbabilityVolume {
    let data = prob_map
        .data()
        .iter()
        .map(|&p| sigmoid(params.a * prob_to_logit(p as f64, epsilon) + params.b) as f32)
        .collect();
    ProbabilityVolume::new_unchecked(prob_map.dims(), data)
}
