//! Evaluation machinery: Dice scores, per-voxel t-score maps comparing
//! error values of incorrect versus correct atlases, the oracle error
//! probability generator, and significance testing (Mann-Whitney U with
//! Benjamini/Hochberg correction).

use crate::error::{Error, Result};
use crate::probsource::ensure_same_dims;
use crate::rng;
use crate::volume::{Dims, ErrorField, LabelVolume, ProbabilityVolume, UNASSIGNED};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Clamp magnitude for t-scores; also the sentinel for voxels where one
/// side has too few members for a finite statistic.
pub const T_CLAMP: f64 = 1000.0;

const STREAM_ORACLE_G: u64 = 0x6f72_6163_6c65_2d67; // per-atlas noise
const STREAM_ORACLE_GS: u64 = 0x6f72_6163_6c65_2d73; // shared noise

/// Per-label Dice scores and their mean over the evaluated label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: BTreeMap<u16, f64>,
    pub average: f64,
}

/// Oracle noise modes: independent per atlas, or shared across atlases
/// at each voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    G,
    Gs,
}

/// Oracle experiment parameters. Correct atlases receive `p_correct`,
/// incorrect ones `p_incorrect`, before Gaussian noise of deviation
/// `sigma` is added and the result clamped to [0, 1].
#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub sigma: f64,
    pub p_correct: f64,
    pub p_incorrect: f64,
    pub seed: u64,
}

impl OracleConfig {
    pub fn new(mode: OracleMode, seed: u64) -> Self {
        Self {
            mode,
            sigma: 0.2,
            p_correct: 0.4,
            p_incorrect: 0.6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_correct >= 0.0 && self.p_correct < self.p_incorrect && self.p_incorrect <= 1.0)
        {
            return Err(Error::Config(format!(
                "oracle probabilities must satisfy 0 <= p_correct < p_incorrect <= 1, \
                 got {} and {}",
                self.p_correct, self.p_incorrect
            )));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config(format!(
                "sigma must be a non-negative finite real, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Per-voxel t-scores clamped to [-T_CLAMP, T_CLAMP].
#[derive(Clone, Debug, PartialEq)]
pub struct TScoreVolume {
    dims: Dims,
    data: Vec<f32>,
}

impl TScoreVolume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.voxel_count() {
            return Err(Error::InvalidValue(format!(
                "t-score volume: data length {} does not match dims {dims}",
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || v.abs() > T_CLAMP as f32)
        {
            return Err(Error::InvalidValue(format!(
                "t-score {} at index {i} outside [-{T_CLAMP}, {T_CLAMP}]",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        // stored as a plain f32 volume
        crate::volume::IntensityVolume::new(self.dims, self.data.clone())?.save(path)
    }
}

/// Dice overlap per label: `2 |A ∩ B| / (|A| + |B|)`. A label absent
/// from both volumes scores 1. The unassigned sentinel may appear in the
/// inputs but may not be evaluated.
pub fn dice(
    seg_a: &LabelVolume,
    seg_b: &LabelVolume,
    labels: &BTreeSet<u16>,
) -> Result<DiceReport> {
    ensure_same_dims(seg_a.dims(), seg_b.dims(), "dice")?;
    if labels.is_empty() {
        return Err(Error::InvalidValue("dice: empty label set".into()));
    }
    if labels.contains(&UNASSIGNED) {
        return Err(Error::InvalidValue(
            "dice: the unassigned sentinel cannot be evaluated".into(),
        ));
    }
    // slot table for one-pass counting
    let mut slot = vec![u16::MAX; u16::MAX as usize + 1];
    let ordered: Vec<u16> = labels.iter().copied().collect();
    for (i, &l) in ordered.iter().enumerate() {
        slot[l as usize] = i as u16;
    }
    let mut counts = vec![[0u64; 3]; ordered.len()]; // |A|, |B|, |A ∩ B|
    for (&la, &lb) in seg_a.data().iter().zip(seg_b.data()) {
        let sa = slot[la as usize];
        let sb = slot[lb as usize];
        if sa != u16::MAX {
            counts[sa as usize][0] += 1;
        }
        if sb != u16::MAX {
            counts[sb as usize][1] += 1;
        }
        if la == lb && sa != u16::MAX {
            counts[sa as usize][2] += 1;
        }
    }
    let mut per_label = BTreeMap::new();
    let mut sum = 0.0;
    for (i, &l) in ordered.iter().enumerate() {
        let [a, b, inter] = counts[i];
        let d = if a + b == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (a + b) as f64
        };
        per_label.insert(l, d);
        sum += d;
    }
    Ok(DiceReport {
        average: sum / ordered.len() as f64,
        per_label,
    })
}

fn mean_and_sample_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch t-statistic of wrong-minus-correct error values, with sentinel
/// handling: an empty or singleton side determines the sign (all or
/// nearly all correct gives +T_CLAMP, all or nearly all wrong gives
/// -T_CLAMP, and two singletons compare directly).
pub fn welch_t(correct: &[f64], wrong: &[f64]) -> f64 {
    if wrong.is_empty() {
        return T_CLAMP;
    }
    if correct.is_empty() {
        return -T_CLAMP;
    }
    if wrong.len() == 1 && correct.len() == 1 {
        return match wrong[0].partial_cmp(&correct[0]).expect("finite values") {
            std::cmp::Ordering::Greater => T_CLAMP,
            std::cmp::Ordering::Less => -T_CLAMP,
            std::cmp::Ordering::Equal => 0.0,
        };
    }
    if wrong.len() == 1 {
        return T_CLAMP;
    }
    if correct.len() == 1 {
        return -T_CLAMP;
    }
    let (mw, vw) = mean_and_sample_var(wrong);
    let (mc, vc) = mean_and_sample_var(correct);
    let num = mw - mc;
    let den2 = vw / wrong.len() as f64 + vc / correct.len() as f64;
    if den2 <= 0.0 {
        return if num > 0.0 {
            T_CLAMP
        } else if num < 0.0 {
            -T_CLAMP
        } else {
            0.0
        };
    }
    (num / den2.sqrt()).clamp(-T_CLAMP, T_CLAMP)
}

/// Per-voxel one-sided t-score of the error values of incorrect versus
/// correct atlases. Positive means incorrect atlases received higher
/// error values, the desired direction.
pub fn tscore_map<E: ErrorField + Sync>(
    target_seg: &LabelVolume,
    atlas_segs: &[LabelVolume],
    error_volumes: &[E],
) -> Result<TScoreVolume> {
    if atlas_segs.is_empty() || atlas_segs.len() != error_volumes.len() {
        return Err(Error::Config(format!(
            "need matching non-empty atlas and error lists, got {} and {}",
            atlas_segs.len(),
            error_volumes.len()
        )));
    }
    let dims = target_seg.dims();
    for (i, s) in atlas_segs.iter().enumerate() {
        ensure_same_dims(s.dims(), dims, &format!("atlas segmentation {i}"))?;
    }
    for (i, e) in error_volumes.iter().enumerate() {
        ensure_same_dims(e.dims(), dims, &format!("error volume {i}"))?;
    }
    let segs: Vec<&[u16]> = atlas_segs.iter().map(|s| s.data()).collect();
    let errs: Vec<&[f32]> = error_volumes.iter().map(|e| e.values()).collect();
    let tdata = target_seg.data();
    let n = segs.len();

    let data: Vec<f32> = (0..dims.voxel_count())
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(n), Vec::with_capacity(n)),
            |(correct, wrong), v| {
                correct.clear();
                wrong.clear();
                for i in 0..n {
                    let e = errs[i][v] as f64;
                    if segs[i][v] == tdata[v] {
                        correct.push(e);
                    } else {
                        wrong.push(e);
                    }
                }
                welch_t(correct, wrong) as f32
            },
        )
        .collect();
    TScoreVolume::new(dims, data)
}

/// Generate per-atlas oracle error probabilities from the ground truth:
/// the base value marks each atlas voxel correct or incorrect, then
/// Gaussian noise is added (independent per atlas in mode G, shared
/// across atlases in mode GS) and the result clamped to [0, 1].
/// Counter-based generation keyed by (seed, voxel, atlas) makes the
/// output independent of scheduling.
pub fn oracle_error_probs(
    target_seg: &LabelVolume,
    atlas_segs: &[LabelVolume],
    cfg: &OracleConfig,
) -> Result<Vec<ProbabilityVolume>> {
    cfg.validate()?;
    if atlas_segs.is_empty() {
        return Err(Error::Config("at least one atlas is required".into()));
    }
    let dims = target_seg.dims();
    for (i, s) in atlas_segs.iter().enumerate() {
        ensure_same_dims(s.dims(), dims, &format!("atlas segmentation {i}"))?;
    }
    let tdata = target_seg.data();
    let out = atlas_segs
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let data: Vec<f32> = (0..dims.voxel_count())
                .into_par_iter()
                .map(|v| {
                    let base = if seg.data()[v] == tdata[v] {
                        cfg.p_correct
                    } else {
                        cfg.p_incorrect
                    };
                    let noise = if cfg.sigma == 0.0 {
                        0.0
                    } else {
                        let g = match cfg.mode {
                            OracleMode::G => {
                                rng::gauss(cfg.seed, STREAM_ORACLE_G, i as u64 + 1, v as u64)
                            }
                            OracleMode::Gs => rng::gauss(cfg.seed, STREAM_ORACLE_GS, 0, v as u64),
                        };
                        cfg.sigma * g
                    };
                    (base + noise).clamp(0.0, 1.0) as f32
                })
                .collect();
            ProbabilityVolume::new_unchecked(dims, data)
        })
        .collect();
    Ok(out)
}

/// Mann-Whitney U statistic and p-value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MwuResult {
    pub u: f64,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Alternative {
    TwoSided,
    AGreater,
}

/// Combined sample size below which the p-value is computed by exact
/// enumeration of group assignments.
const MWU_EXACT_LIMIT: usize = 8;

fn u_statistic_ranks(a: &[f64], b: &[f64]) -> f64 {
    let n1 = a.len();
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    // midranks over tie groups
    let mut r1 = 0.0f64;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i + 1;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for item in &pooled[i..j] {
            if item.1 {
                r1 += rank;
            }
        }
        i = j;
    }
    r1 - (n1 * (n1 + 1)) as f64 / 2.0
}

fn normal_cdf(z: f64) -> f64 {
    // Abramowitz & Stegun 26.2.17 rational approximation, |err| < 7.5e-8.
    let t = 1.0 / (1.0 + 0.2316419 * z.abs());
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let upper = pdf * poly;
    if z >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

fn mwu_with(a: &[f64], b: &[f64], alt: Alternative) -> Result<MwuResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample("mann-whitney".into()));
    }
    for v in a.iter().chain(b) {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!(
                "mann-whitney sample value {v} is not finite"
            )));
        }
    }
    let n1 = a.len();
    let n2 = b.len();
    let u = u_statistic_ranks(a, b);
    let mu = (n1 * n2) as f64 / 2.0;

    let p = if n1 + n2 < MWU_EXACT_LIMIT {
        exact_p(a, b, u, mu, alt)
    } else {
        // normal approximation with tie correction
        let total = n1 + n2;
        let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        pooled.sort_by(|x, y| x.total_cmp(y));
        let mut tie_term = 0.0f64;
        let mut i = 0;
        while i < pooled.len() {
            let mut j = i + 1;
            while j < pooled.len() && pooled[j] == pooled[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let nf = total as f64;
        let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let z = (u - mu) / var.sqrt();
            match alt {
                Alternative::TwoSided => (2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0),
                Alternative::AGreater => (1.0 - normal_cdf(z)).clamp(0.0, 1.0),
            }
        }
    };
    Ok(MwuResult { u, p })
}

/// Exact permutation p-value: enumerate every assignment of the pooled
/// values to the first group.
fn exact_p(a: &[f64], b: &[f64], u_obs: f64, mu: f64, alt: Alternative) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n1 = a.len();
    let total = pooled.len();
    let mut extreme = 0u64;
    let mut count = 0u64;
    let mut indices: Vec<usize> = (0..n1).collect();
    const EPS: f64 = 1e-9;
    loop {
        let ga: Vec<f64> = indices.iter().map(|&i| pooled[i]).collect();
        let gb: Vec<f64> = (0..total)
            .filter(|i| !indices.contains(i))
            .map(|i| pooled[i])
            .collect();
        let mut u = 0.0;
        for x in &ga {
            for y in &gb {
                if x > y {
                    u += 1.0;
                } else if x == y {
                    u += 0.5;
                }
            }
        }
        let hit = match alt {
            Alternative::TwoSided => (u - mu).abs() >= (u_obs - mu).abs() - EPS,
            Alternative::AGreater => u >= u_obs - EPS,
        };
        if hit {
            extreme += 1;
        }
        count += 1;
        // next combination in lexicographic order
        let mut i = n1;
        loop {
            if i == 0 {
                return extreme as f64 / count as f64;
            }
            i -= 1;
            if indices[i] != i + total - n1 {
                break;
            }
        }
        indices[i] += 1;
        for j in (i + 1)..n1 {
            indices[j] = indices[j - 1] + 1;
        }
    }
}

/// U = pairwise count of `a > b` with half credit for ties; two-sided
/// p-value by exact enumeration for small samples and by the
/// tie-corrected normal approximation otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult> {
    mwu_with(a, b, Alternative::TwoSided)
}

/// One-sided variant testing whether `a` tends to exceed `b`.
pub fn mann_whitney_u_one_sided(a: &[f64], b: &[f64]) -> Result<MwuResult> {
    mwu_with(a, b, Alternative::AGreater)
}

/// Benjamini/Hochberg step-up: reject the hypotheses whose p-values are
/// at most the largest p(k) with p(k) <= k * fdr / m. Flags are returned
/// in input order.
pub fn benjamini_hochberg(p_values: &[f64], fdr: f64) -> Result<Vec<bool>> {
    if !(fdr > 0.0 && fdr < 1.0) {
        return Err(Error::Config(format!("fdr must lie in (0, 1), got {fdr}")));
    }
    for (i, &p) in p_values.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidValue(format!(
                "p-value {p} at index {i} outside [0, 1]"
            )));
        }
    }
    let m = p_values.len();
    let mut sorted: Vec<f64> = p_values.to_vec();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut threshold = None;
    for (k, &p) in sorted.iter().enumerate().rev() {
        if p <= (k + 1) as f64 * fdr / m as f64 {
            threshold = Some(p);
            break;
        }
    }
    Ok(match threshold {
        Some(t) => p_values.iter().map(|&p| p <= t).collect(),
        None => vec![false; m],
    })
}

/// One row of the significance report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: String,
    pub p_value: f64,
    pub rejected: bool,
}
