//! Label-fusion core: per-voxel dependency matrices, closed-form fusion
//! weights, weighted consensus voting, plurality voting with a trust
//! threshold, fallback merging, and the end-to-end pipeline.
//!
//! The dependency matrix at a voxel holds pairwise products of the
//! per-atlas error values. The weight vector solves the ridge-stabilized
//! system `(M + alpha I) u = 1` and normalizes `u` to sum 1; weights may
//! be negative. Normalization makes the weights invariant to a uniform
//! scaling of `M` when `alpha` scales along (or is zero), which is what
//! permits unnormalized error scores as inputs.

use crate::calibration::{platt_apply, PlattParams, DEFAULT_LOGIT_EPSILON};
use crate::error::{Error, Result};
use crate::probsource::{
    ensure_same_dims, intensity_error_score, network_error_prob, patch_search_refine,
    IntensityScoreConfig, PatchSearchConfig,
};
use crate::volume::{
    Dims, ErrorField, IntensityVolume, LabelVolume, ProbabilityVolume, ScoreVolume, UNASSIGNED,
};
use rayon::prelude::*;

/// Absolute lower bound on the ridge added to the dependency matrix.
/// Rank-one matrices (the product form for two or more atlases) are
/// singular without it.
pub const RIDGE_FLOOR: f64 = 1e-12;

/// Relative backward-error bound a solve must meet to be accepted.
const RESIDUAL_TOL: f64 = 1e-8;

/// Symmetric matrix of joint error values for a set of atlases.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DependencyMatrix {
    /// Build from explicit entries, row-major. Entries must be finite,
    /// non-negative, and symmetric.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::InvalidValue(format!(
                "dependency matrix: expected {n}x{n} entries, got {}",
                entries.len()
            )));
        }
        for (i, &e) in entries.iter().enumerate() {
            if !e.is_finite() || e < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "dependency matrix entry {e} at index {i} is negative or non-finite"
                )));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return Err(Error::InvalidValue(format!(
                        "dependency matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// Per-voxel atlas weights; they sum to 1 and individual entries may be
/// negative.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Fusion method selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMethod {
    Jlf,
    Pv,
}

/// Fusion parameters shared by both methods.
#[derive(Clone, Copy, Debug)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Trust threshold for plurality voting; an atlas votes when its
    /// error probability is strictly below it.
    pub pv_threshold: f64,
    /// Relative ridge coefficient; the matrix receives
    /// `max(ridge_alpha * trace / n, RIDGE_FLOOR) * I`.
    pub ridge_alpha: f64,
    /// With a fallback present, a voxel takes the fallback label when
    /// every atlas error exceeds this threshold.
    pub jlf_fallback_threshold: f64,
}

impl FusionConfig {
    pub fn new(method: FusionMethod) -> Self {
        Self {
            method,
            pv_threshold: 0.5,
            ridge_alpha: 1e-6,
            jlf_fallback_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pv_threshold > 0.0 && self.pv_threshold < 1.0) {
            return Err(Error::Config(format!(
                "pv-threshold must lie in (0, 1), got {}",
                self.pv_threshold
            )));
        }
        if !(self.jlf_fallback_threshold > 0.0 && self.jlf_fallback_threshold < 1.0) {
            return Err(Error::Config(format!(
                "jlf-fallback-threshold must lie in (0, 1), got {}",
                self.jlf_fallback_threshold
            )));
        }
        if !self.ridge_alpha.is_finite() || self.ridge_alpha < 0.0 {
            return Err(Error::Config(format!(
                "ridge must be a non-negative finite real, got {}",
                self.ridge_alpha
            )));
        }
        Ok(())
    }
}

/// Pairwise products of the per-atlas error values, diagonal included.
pub fn build_dependency_matrix(error_values: &[f64]) -> Result<DependencyMatrix> {
    if error_values.is_empty() {
        return Err(Error::InvalidValue(
            "dependency matrix needs at least one error value".into(),
        ));
    }
    for (i, &e) in error_values.iter().enumerate() {
        if !e.is_finite() || e < 0.0 {
            return Err(Error::InvalidValue(format!(
                "error value {e} at index {i} is negative or non-finite"
            )));
        }
    }
    let n = error_values.len();
    let mut entries = vec![0.0; n * n];
    fill_products(error_values, &mut entries);
    Ok(DependencyMatrix { n, entries })
}

#[inline]
fn fill_products(values: &[f64], out: &mut [f64]) {
    let n = values.len();
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = values[i] * values[j];
        }
    }
}

/// Scratch buffers for the per-voxel solve, reused across voxels within
/// a worker thread.
struct SolveScratch {
    mat: Vec<f64>,
    lu: Vec<f64>,
    sol: Vec<f64>,
    perm: Vec<usize>,
    errs: Vec<f64>,
}

impl SolveScratch {
    fn new(n: usize) -> Self {
        Self {
            mat: vec![0.0; n * n],
            lu: vec![0.0; n * n],
            sol: vec![0.0; n],
            perm: vec![0; n],
            errs: vec![0.0; n],
        }
    }
}

/// Solve `(mat + alpha I) u = 1` and normalize `u` to sum 1. `mat` is
/// row-major `n x n` in `scratch.mat`; the result lands in `scratch.sol`.
fn solve_normalized(scratch: &mut SolveScratch, n: usize, alpha: f64) -> Result<()> {
    let lu = &mut scratch.lu;
    let a = &mut scratch.mat;
    let x = &mut scratch.sol;
    let perm = &mut scratch.perm;

    lu.copy_from_slice(a);
    if alpha != 0.0 {
        for i in 0..n {
            a[i * n + i] += alpha;
            lu[i * n + i] += alpha;
        }
    }

    // LU with partial pivoting.
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_abs = lu[perm[k] * n + k].abs();
        for (r, &row) in perm.iter().enumerate().skip(k + 1) {
            let cand = lu[row * n + k].abs();
            if cand > pivot_abs {
                pivot_abs = cand;
                pivot_row = r;
            }
        }
        if pivot_abs == 0.0 {
            return Err(Error::Singular);
        }
        perm.swap(k, pivot_row);
        let pk = perm[k];
        let pivot = lu[pk * n + k];
        for &pr in perm.iter().skip(k + 1) {
            let factor = lu[pr * n + k] / pivot;
            lu[pr * n + k] = factor;
            for c in (k + 1)..n {
                lu[pr * n + c] -= factor * lu[pk * n + c];
            }
        }
    }

    // Forward then backward substitution with rhs = 1.
    for i in 0..n {
        let mut v = 1.0;
        for j in 0..i {
            v -= lu[perm[i] * n + j] * x[j];
        }
        x[i] = v;
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for j in (i + 1)..n {
            v -= lu[perm[i] * n + j] * x[j];
        }
        x[i] = v / lu[perm[i] * n + i];
    }

    // Backward-error check against the ridged matrix.
    let mut row_norm = 0.0f64;
    let mut x_norm = 0.0f64;
    let mut res_norm = 0.0f64;
    for i in 0..n {
        let mut row_sum = 0.0;
        let mut r = -1.0f64;
        for j in 0..n {
            row_sum += a[i * n + j].abs();
            r += a[i * n + j] * x[j];
        }
        row_norm = row_norm.max(row_sum);
        res_norm = res_norm.max(r.abs());
        x_norm = x_norm.max(x[i].abs());
    }
    let rel = res_norm / (row_norm * x_norm + 1.0);
    if rel.is_nan() || rel > RESIDUAL_TOL {
        return Err(Error::Singular);
    }

    let sum: f64 = x.iter().sum();
    let abs_sum: f64 = x.iter().map(|v| v.abs()).sum();
    if sum == 0.0 || !sum.is_finite() || abs_sum / sum.abs() > 1e5 {
        return Err(Error::Singular);
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Closed-form fusion weights: `(m + alpha I)^-1 1`, normalized to sum 1.
/// `ridge_alpha` is added as given, with no relative scaling or floor.
pub fn solve_weights(m: &DependencyMatrix, ridge_alpha: f64) -> Result<WeightVector> {
    if !ridge_alpha.is_finite() || ridge_alpha < 0.0 {
        return Err(Error::Config(format!(
            "ridge must be a non-negative finite real, got {ridge_alpha}"
        )));
    }
    let n = m.n;
    let mut scratch = SolveScratch::new(n);
    scratch.mat.copy_from_slice(&m.entries);
    solve_normalized(&mut scratch, n, ridge_alpha)?;
    Ok(WeightVector {
        weights: scratch.sol,
    })
}

fn check_stack_dims<T, F: Fn(&T) -> Dims>(items: &[T], dims: Dims, f: F, what: &str) -> Result<()> {
    for (i, it) in items.iter().enumerate() {
        if f(it) != dims {
            return Err(Error::DimsMismatch(format!(
                "{what} {i}: {} vs {dims}",
                f(it)
            )));
        }
    }
    Ok(())
}

/// Effective ridge for a voxel: relative to the mean diagonal entry of
/// the dependency matrix, floored at [`RIDGE_FLOOR`].
#[inline]
fn effective_ridge(ridge_alpha: f64, trace: f64, n: usize) -> f64 {
    (ridge_alpha * trace / n as f64).max(RIDGE_FLOOR)
}

/// Consensus fusion: per voxel, build the dependency matrix from the
/// atlas error values, solve the weights, and pick the candidate label
/// with the largest summed weight. Ties go to the smallest label id.
pub fn jlf_fuse<E: ErrorField + Sync>(
    atlas_segs: &[LabelVolume],
    error_volumes: &[E],
    cfg: &FusionConfig,
) -> Result<LabelVolume> {
    cfg.validate()?;
    if atlas_segs.is_empty() || atlas_segs.len() != error_volumes.len() {
        return Err(Error::Config(format!(
            "need matching non-empty atlas and error lists, got {} and {}",
            atlas_segs.len(),
            error_volumes.len()
        )));
    }
    let dims = atlas_segs[0].dims();
    check_stack_dims(atlas_segs, dims, |s| s.dims(), "atlas segmentation")?;
    check_stack_dims(error_volumes, dims, |e| e.dims(), "error volume")?;
    let n = atlas_segs.len();
    let segs: Vec<&[u16]> = atlas_segs.iter().map(|s| s.data()).collect();
    let errs: Vec<&[f32]> = error_volumes.iter().map(|e| e.values()).collect();

    let labels: Vec<u16> = (0..dims.voxel_count())
        .into_par_iter()
        .map_init(
            || SolveScratch::new(n),
            |scratch, v| -> Result<u16> {
                let mut trace = 0.0f64;
                for (slot, err) in scratch.errs.iter_mut().zip(&errs) {
                    let e = err[v] as f64;
                    *slot = e;
                    trace += e * e;
                }
                fill_products(&scratch.errs, &mut scratch.mat);
                let alpha = effective_ridge(cfg.ridge_alpha, trace, n);
                solve_normalized(scratch, n, alpha).map_err(|_| {
                    let (x, y, z) = dims.coords(v);
                    Error::SingularAt { x, y, z }
                })?;
                Ok(vote_weighted(&segs, &scratch.sol, v))
            },
        )
        .collect::<Result<Vec<u16>>>()?;
    LabelVolume::new(dims, labels)
}

/// Weighted vote over the candidate labels present at voxel `v`.
fn vote_weighted(segs: &[&[u16]], weights: &[f64], v: usize) -> u16 {
    let n = segs.len();
    let mut best_label = 0u16;
    let mut best_score = f64::NEG_INFINITY;
    'outer: for i in 0..n {
        let label = segs[i][v];
        for seg in &segs[..i] {
            if seg[v] == label {
                continue 'outer;
            }
        }
        let mut score = 0.0;
        for (j, seg) in segs.iter().enumerate() {
            if seg[v] == label {
                score += weights[j];
            }
        }
        if score > best_score || (score == best_score && label < best_label) {
            best_score = score;
            best_label = label;
        }
    }
    best_label
}

/// Plurality voting over trusted atlases. An atlas is trusted at a voxel
/// when its error probability is strictly below the threshold; with no
/// trusted atlas the voxel becomes [`UNASSIGNED`]. Ties go to the
/// smallest label id.
pub fn plurality_vote(
    atlas_segs: &[LabelVolume],
    error_volumes: &[ProbabilityVolume],
    threshold: f64,
) -> Result<LabelVolume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "pv-threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if atlas_segs.is_empty() || atlas_segs.len() != error_volumes.len() {
        return Err(Error::Config(format!(
            "need matching non-empty atlas and error lists, got {} and {}",
            atlas_segs.len(),
            error_volumes.len()
        )));
    }
    let dims = atlas_segs[0].dims();
    check_stack_dims(atlas_segs, dims, |s| s.dims(), "atlas segmentation")?;
    check_stack_dims(error_volumes, dims, |e| e.dims(), "error volume")?;
    let n = atlas_segs.len();
    let segs: Vec<&[u16]> = atlas_segs.iter().map(|s| s.data()).collect();
    let errs: Vec<&[f32]> = error_volumes.iter().map(|e| e.data()).collect();

    let labels: Vec<u16> = (0..dims.voxel_count())
        .into_par_iter()
        .map(|v| {
            let mut best_label = UNASSIGNED;
            let mut best_count = 0usize;
            'outer: for i in 0..n {
                if (errs[i][v] as f64) >= threshold {
                    continue;
                }
                let label = segs[i][v];
                for j in 0..i {
                    if segs[j][v] == label && (errs[j][v] as f64) < threshold {
                        continue 'outer;
                    }
                }
                let count = (i..n)
                    .filter(|&j| segs[j][v] == label && (errs[j][v] as f64) < threshold)
                    .count();
                if count > best_count || (count == best_count && label < best_label) {
                    best_count = count;
                    best_label = label;
                }
            }
            best_label
        })
        .collect();
    LabelVolume::new(dims, labels)
}

/// Replace [`UNASSIGNED`] voxels in `fused` with the fallback label.
/// The fallback itself must not contain the sentinel.
pub fn merge_fallback(fused: &LabelVolume, fallback: &LabelVolume) -> Result<LabelVolume> {
    ensure_same_dims(fused.dims(), fallback.dims(), "fallback merge")?;
    if fallback.contains_unassigned() {
        return Err(Error::InvalidValue(
            "fallback segmentation contains the reserved unassigned label".into(),
        ));
    }
    let data = fused
        .data()
        .iter()
        .zip(fallback.data())
        .map(|(&f, &b)| if f == UNASSIGNED { b } else { f })
        .collect();
    LabelVolume::new(fused.dims(), data)
}

/// How the pipeline derives per-atlas error values.
enum ErrorSource {
    Probabilities(Vec<ProbabilityVolume>),
    Scores(Vec<ScoreVolume>),
}

/// Everything `fuse_pipeline` consumes besides configuration.
pub struct FuseInputs<'a> {
    pub target: &'a IntensityVolume,
    pub atlas_segs: &'a [LabelVolume],
    /// Warped atlas images; required for the intensity route.
    pub atlas_imgs: Option<&'a [IntensityVolume]>,
    /// Correctness probability maps, one per atlas; complemented into
    /// error probabilities (after optional calibration).
    pub prob_maps: Option<&'a [ProbabilityVolume]>,
    /// Error probability maps consumed as-is (no complement); mutually
    /// exclusive with `prob_maps`.
    pub error_maps: Option<&'a [ProbabilityVolume]>,
    pub platt: Option<PlattParams>,
    pub fallback: Option<&'a LabelVolume>,
}

/// Pipeline configuration: fusion parameters plus the intensity error
/// settings and the optional patch search.
pub struct PipelineConfig {
    pub fusion: FusionConfig,
    pub score: IntensityScoreConfig,
    pub patch_search: Option<PatchSearchConfig>,
}

/// End-to-end fusion: derive per-atlas error volumes, fuse, and merge a
/// fallback where nothing was trustworthy.
pub fn fuse_pipeline(cfg: &PipelineConfig, inputs: &FuseInputs<'_>) -> Result<LabelVolume> {
    cfg.fusion.validate()?;
    cfg.score.validate()?;
    let n = inputs.atlas_segs.len();
    if n == 0 {
        return Err(Error::Config("at least one atlas is required".into()));
    }
    let dims = inputs.target.dims();
    check_stack_dims(inputs.atlas_segs, dims, |s| s.dims(), "atlas segmentation")?;
    if let Some(imgs) = inputs.atlas_imgs {
        if imgs.len() != n {
            return Err(Error::Config(format!(
                "expected {n} atlas images, got {}",
                imgs.len()
            )));
        }
        check_stack_dims(imgs, dims, |v| v.dims(), "atlas image")?;
    }
    if let Some(probs) = inputs.prob_maps {
        if probs.len() != n {
            return Err(Error::Config(format!(
                "expected {n} probability maps, got {}",
                probs.len()
            )));
        }
        check_stack_dims(probs, dims, |v| v.dims(), "probability map")?;
    }
    if let Some(errs) = inputs.error_maps {
        if errs.len() != n {
            return Err(Error::Config(format!(
                "expected {n} error maps, got {}",
                errs.len()
            )));
        }
        check_stack_dims(errs, dims, |v| v.dims(), "error map")?;
    }
    if let Some(fb) = inputs.fallback {
        ensure_same_dims(fb.dims(), dims, "fallback segmentation")?;
    }
    if inputs.prob_maps.is_some() && inputs.error_maps.is_some() {
        return Err(Error::Config(
            "probability maps and error maps are mutually exclusive".into(),
        ));
    }
    if inputs.platt.is_some() && inputs.prob_maps.is_none() {
        return Err(Error::Config(
            "calibration parameters require probability maps".into(),
        ));
    }

    // Derive the error source and the effective atlas segmentations
    // (the patch search may relabel).
    let mut segs: &[LabelVolume] = inputs.atlas_segs;
    let refined_segs: Vec<LabelVolume>;
    let source = if let Some(probs) = inputs.prob_maps {
        if cfg.patch_search.is_some() {
            return Err(Error::Config(
                "patch search requires the intensity route, not probability maps".into(),
            ));
        }
        let calibrated: Vec<ProbabilityVolume> = match &inputs.platt {
            Some(params) => probs
                .iter()
                .map(|p| platt_apply(p, params, DEFAULT_LOGIT_EPSILON))
                .collect(),
            None => probs.to_vec(),
        };
        ErrorSource::Probabilities(calibrated.iter().map(network_error_prob).collect())
    } else if let Some(errs) = inputs.error_maps {
        if cfg.patch_search.is_some() {
            return Err(Error::Config(
                "patch search requires the intensity route, not error maps".into(),
            ));
        }
        ErrorSource::Probabilities(errs.to_vec())
    } else {
        let imgs = inputs.atlas_imgs.ok_or_else(|| {
            Error::Config("either atlas images or probability/error maps must be provided".into())
        })?;
        match &cfg.patch_search {
            Some(search) => {
                let refined: Vec<(LabelVolume, ScoreVolume)> = imgs
                    .par_iter()
                    .zip(inputs.atlas_segs)
                    .map(|(img, seg)| {
                        patch_search_refine(inputs.target, img, seg, &cfg.score, search)
                    })
                    .collect::<Result<_>>()?;
                let (labs, scores): (Vec<_>, Vec<_>) = refined.into_iter().unzip();
                refined_segs = labs;
                segs = &refined_segs;
                ErrorSource::Scores(scores)
            }
            None => ErrorSource::Scores(
                imgs.par_iter()
                    .map(|img| intensity_error_score(inputs.target, img, &cfg.score))
                    .collect::<Result<_>>()?,
            ),
        }
    };

    let fused = match (&cfg.fusion.method, &source) {
        (FusionMethod::Pv, ErrorSource::Probabilities(errs)) => {
            let voted = plurality_vote(segs, errs, cfg.fusion.pv_threshold)?;
            match inputs.fallback {
                Some(fb) => merge_fallback(&voted, fb)?,
                None => voted,
            }
        }
        (FusionMethod::Pv, ErrorSource::Scores(_)) => {
            return Err(Error::Config(
                "plurality voting requires probability maps; raw intensity scores \
                 have no calibrated trust threshold"
                    .into(),
            ));
        }
        (FusionMethod::Jlf, source) => {
            let fused = match source {
                ErrorSource::Probabilities(errs) => jlf_fuse(segs, errs, &cfg.fusion)?,
                ErrorSource::Scores(errs) => jlf_fuse(segs, errs, &cfg.fusion)?,
            };
            match inputs.fallback {
                Some(fb) => {
                    let errs: Vec<&[f32]> = match &source {
                        ErrorSource::Probabilities(e) => e.iter().map(|v| v.data()).collect(),
                        ErrorSource::Scores(e) => e.iter().map(|v| v.data()).collect(),
                    };
                    apply_jlf_fallback(&fused, fb, &errs, cfg.fusion.jlf_fallback_threshold)?
                }
                None => fused,
            }
        }
    };
    Ok(fused)
}

/// Take the fallback label wherever every atlas error exceeds the
/// threshold.
fn apply_jlf_fallback(
    fused: &LabelVolume,
    fallback: &LabelVolume,
    errs: &[&[f32]],
    threshold: f64,
) -> Result<LabelVolume> {
    if fallback.contains_unassigned() {
        return Err(Error::InvalidValue(
            "fallback segmentation contains the reserved unassigned label".into(),
        ));
    }
    let data = (0..fused.dims().voxel_count())
        .map(|v| {
            let min_err = errs
                .iter()
                .map(|e| e[v] as f64)
                .fold(f64::INFINITY, f64::min);
            if min_err > threshold {
                fallback.data()[v]
            } else {
                fused.data()[v]
            }
        })
        .collect();
    LabelVolume::new(fused.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(nx: usize, ny: usize, nz: usize) -> Dims {
        Dims::new(nx, ny, nz).unwrap()
    }

    fn labels(d: Dims, data: Vec<u16>) -> LabelVolume {
        LabelVolume::new(d, data).unwrap()
    }

    fn probs(d: Dims, data: Vec<f32>) -> ProbabilityVolume {
        ProbabilityVolume::new(d, data).unwrap()
    }

    #[test]
    fn dependency_matrix_examples() {
        let m = build_dependency_matrix(&[0.1, 0.2]).unwrap();
        assert_abs_diff_eq!(m.get(0, 0), 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(0, 1), 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(1, 0), 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(1, 1), 0.04, epsilon = 1e-12);

        let z = build_dependency_matrix(&[0.0, 0.0, 0.0]).unwrap();
        assert!(z.entries().iter().all(|&e| e == 0.0));

        let s = build_dependency_matrix(&[0.5]).unwrap();
        assert_eq!(s.entries(), &[0.25]);

        assert!(build_dependency_matrix(&[-0.1]).is_err());
        assert!(build_dependency_matrix(&[f64::NAN]).is_err());
        assert!(build_dependency_matrix(&[]).is_err());
    }

    #[test]
    fn solve_weights_examples() {
        let ident = DependencyMatrix::from_entries(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = solve_weights(&ident, 0.0).unwrap();
        assert_abs_diff_eq!(w.weights()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights()[1], 0.5, epsilon = 1e-12);

        let single = DependencyMatrix::from_entries(1, vec![0.7]).unwrap();
        let w = solve_weights(&single, 0.0).unwrap();
        assert_abs_diff_eq!(w.weights()[0], 1.0, epsilon = 1e-12);

        // Independent 2x2 solve: inv(M) 1 is proportional to (1.5, 0.5).
        let m = DependencyMatrix::from_entries(2, vec![1.0, 0.5, 0.5, 2.0]).unwrap();
        let w = solve_weights(&m, 0.0).unwrap();
        assert_abs_diff_eq!(w.weights()[0], 0.75, epsilon = 1e-9);
        assert_abs_diff_eq!(w.weights()[1], 0.25, epsilon = 1e-9);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let zero = DependencyMatrix::from_entries(2, vec![0.0; 4]).unwrap();
        assert!(matches!(solve_weights(&zero, 0.0), Err(Error::Singular)));
        // a rank-one product matrix is singular without a ridge; unit
        // error values keep the elimination exact
        let rank1 = build_dependency_matrix(&[1.0, 1.0]).unwrap();
        assert!(matches!(solve_weights(&rank1, 0.0), Err(Error::Singular)));
        assert!(solve_weights(&rank1, 1e-9).is_ok());
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DependencyMatrix {
        // B^T B plus a diagonal boost stays symmetric positive definite.
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[k * n + i] * b[k * n + j];
                }
                entries[i * n + j] = s;
            }
        }
        for i in 0..n {
            entries[i * n + i] += 0.05;
        }
        // force exact symmetry under fp summation order
        for i in 0..n {
            for j in (i + 1)..n {
                let v = entries[i * n + j];
                entries[j * n + i] = v;
            }
        }
        DependencyMatrix::from_entries(n, entries).unwrap()
    }

    #[test]
    fn weights_match_lagrange_oracle() {
        // Oracle: solve the KKT system of min w^T M w subject to sum w = 1
        // with a general dense solver.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let m = random_spd(&mut rng, n);
            let w = solve_weights(&m, 0.0).unwrap();

            let mut kkt = nalgebra::DMatrix::zeros(n + 1, n + 1);
            for i in 0..n {
                for j in 0..n {
                    kkt[(i, j)] = 2.0 * m.get(i, j);
                }
                kkt[(i, n)] = 1.0;
                kkt[(n, i)] = 1.0;
            }
            let mut rhs = nalgebra::DVector::zeros(n + 1);
            rhs[n] = 1.0;
            let sol = kkt.lu().solve(&rhs).expect("oracle solve");
            for i in 0..n {
                assert_abs_diff_eq!(w.weights()[i], sol[i], epsilon = 1e-8);
            }
            let sum: f64 = w.weights().iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn jlf_single_atlas_copies_the_segmentation() {
        let d = dims(4, 3, 2);
        let seg = labels(d, (0..d.voxel_count()).map(|i| (i % 9) as u16).collect());
        let err = probs(d, vec![0.42; d.voxel_count()]);
        let out = jlf_fuse(
            std::slice::from_ref(&seg),
            std::slice::from_ref(&err),
            &FusionConfig::new(FusionMethod::Jlf),
        )
        .unwrap();
        assert_eq!(out.data(), seg.data());
    }

    #[test]
    fn unanimous_atlases_win_regardless_of_errors() {
        let d = dims(3, 3, 3);
        let seg = labels(
            d,
            (0..d.voxel_count()).map(|i| (i % 4 + 1) as u16).collect(),
        );
        let segs = vec![seg.clone(), seg.clone(), seg.clone()];
        let errs = vec![
            probs(d, vec![0.1; d.voxel_count()]),
            probs(d, vec![0.9; d.voxel_count()]),
            probs(d, vec![0.5; d.voxel_count()]),
        ];
        let out = jlf_fuse(&segs, &errs, &FusionConfig::new(FusionMethod::Jlf)).unwrap();
        assert_eq!(out.data(), seg.data());
    }

    #[test]
    fn low_error_pair_outvotes_high_error_atlas() {
        // labels (7, 7, 9), errors (0.1, 0.1, 0.9): weight mass must land
        // on the first two atlases. Cross-checked against a dense solve.
        let d = dims(1, 1, 1);
        let segs = vec![labels(d, vec![7]), labels(d, vec![7]), labels(d, vec![9])];
        let errs = vec![
            probs(d, vec![0.1]),
            probs(d, vec![0.1]),
            probs(d, vec![0.9]),
        ];
        let out = jlf_fuse(&segs, &errs, &FusionConfig::new(FusionMethod::Jlf)).unwrap();
        assert_eq!(out.data(), &[7]);

        let e = [0.1f64, 0.1, 0.9];
        let trace: f64 = e.iter().map(|v| v * v).sum();
        let alpha = (1e-6 * trace / 3.0).max(RIDGE_FLOOR);
        let mut m = nalgebra::DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = e[i] * e[j] + if i == j { alpha } else { 0.0 };
            }
        }
        let u = m
            .lu()
            .solve(&nalgebra::DVector::from_element(3, 1.0))
            .unwrap();
        let w: Vec<f64> = u.iter().map(|v| v / u.sum()).collect();
        assert!(w[0] + w[1] > w[2], "weights {w:?}");
    }

    #[test]
    fn plurality_examples() {
        let d = dims(1, 1, 1);
        // unanimous trusted set
        let segs = vec![labels(d, vec![5]), labels(d, vec![5])];
        let errs = vec![probs(d, vec![0.4]), probs(d, vec![0.4])];
        let out = plurality_vote(&segs, &errs, 0.5).unwrap();
        assert_eq!(out.data(), &[5]);

        // empty trusted set
        let errs = vec![probs(d, vec![0.6]), probs(d, vec![0.6])];
        let out = plurality_vote(&segs, &errs, 0.5).unwrap();
        assert_eq!(out.data(), &[UNASSIGNED]);

        // hand-enumerated trusted votes
        let segs = vec![labels(d, vec![3]), labels(d, vec![3]), labels(d, vec![5])];
        let errs = vec![
            probs(d, vec![0.2]),
            probs(d, vec![0.2]),
            probs(d, vec![0.1]),
        ];
        let out = plurality_vote(&segs, &errs, 0.5).unwrap();
        assert_eq!(out.data(), &[3]);

        // tie between counts goes to the smaller label
        let segs = vec![labels(d, vec![9]), labels(d, vec![2])];
        let errs = vec![probs(d, vec![0.1]), probs(d, vec![0.1])];
        let out = plurality_vote(&segs, &errs, 0.5).unwrap();
        assert_eq!(out.data(), &[2]);
    }

    #[test]
    fn merge_fallback_examples() {
        let d = dims(3, 1, 1);
        let fallback = labels(d, vec![1, 2, 3]);

        let fused = labels(d, vec![4, 5, 6]);
        let merged = merge_fallback(&fused, &fallback).unwrap();
        assert_eq!(merged.data(), fused.data());

        let fused = labels(d, vec![UNASSIGNED; 3]);
        let merged = merge_fallback(&fused, &fallback).unwrap();
        assert_eq!(merged.data(), fallback.data());

        let fused = labels(d, vec![4, UNASSIGNED, 6]);
        let merged = merge_fallback(&fused, &fallback).unwrap();
        assert_eq!(merged.data(), &[4, 2, 6]);

        let bad = labels(d, vec![1, UNASSIGNED, 3]);
        assert!(merge_fallback(&fused, &bad).is_err());
    }

    #[test]
    fn pipeline_rejects_pv_without_probabilities() {
        let d = dims(2, 2, 2);
        let target = IntensityVolume::new(d, vec![0.0; 8]).unwrap();
        let segs = vec![labels(d, vec![1; 8])];
        let imgs = vec![IntensityVolume::new(d, vec![0.0; 8]).unwrap()];
        let cfg = PipelineConfig {
            fusion: FusionConfig::new(FusionMethod::Pv),
            score: IntensityScoreConfig::default(),
            patch_search: None,
        };
        let inputs = FuseInputs {
            target: &target,
            atlas_segs: &segs,
            atlas_imgs: Some(&imgs),
            prob_maps: None,
            error_maps: None,
            platt: None,
            fallback: None,
        };
        assert!(matches!(
            fuse_pipeline(&cfg, &inputs),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn certain_probability_maps_reproduce_unanimous_labels() {
        let d = dims(2, 2, 1);
        let target = IntensityVolume::new(d, vec![0.0; 4]).unwrap();
        let seg = labels(d, vec![3, 3, 3, 3]);
        let segs = vec![seg.clone(), seg.clone()];
        let maps = vec![probs(d, vec![1.0; 4]), probs(d, vec![1.0; 4])];
        for method in [FusionMethod::Jlf, FusionMethod::Pv] {
            let cfg = PipelineConfig {
                fusion: FusionConfig::new(method),
                score: IntensityScoreConfig::default(),
                patch_search: None,
            };
            let inputs = FuseInputs {
                target: &target,
                atlas_segs: &segs,
                atlas_imgs: None,
                prob_maps: Some(&maps),
                error_maps: None,
                platt: None,
                fallback: None,
            };
            let out = fuse_pipeline(&cfg, &inputs).unwrap();
            assert_eq!(out.data(), seg.data());
        }
    }

    #[test]
    fn patch_search_route_shifts_labels_with_the_feature() {
        // atlas feature sits one voxel left of the target feature; the
        // search re-aligns labels before fusing
        let d = dims(12, 5, 5);
        let n = d.voxel_count();
        let mut tdata = vec![0.0f32; n];
        let mut adata = vec![0.0f32; n];
        let mut sdata = vec![1u16; n];
        for z in 0..5 {
            for y in 0..5 {
                tdata[d.index(6, y, z)] = 10.0;
                adata[d.index(5, y, z)] = 10.0;
                sdata[d.index(5, y, z)] = 7;
            }
        }
        let target = IntensityVolume::new(d, tdata).unwrap();
        let imgs = vec![IntensityVolume::new(d, adata).unwrap()];
        let segs = vec![labels(d, sdata)];
        let cfg = PipelineConfig {
            fusion: FusionConfig::new(FusionMethod::Jlf),
            score: IntensityScoreConfig {
                beta: 1.0,
                radius: 1,
            },
            patch_search: Some(PatchSearchConfig {
                search_radius: 1,
                patch_radius: 1,
            }),
        };
        let inputs = FuseInputs {
            target: &target,
            atlas_segs: &segs,
            atlas_imgs: Some(&imgs),
            prob_maps: None,
            error_maps: None,
            platt: None,
            fallback: None,
        };
        let fused = fuse_pipeline(&cfg, &inputs).unwrap();
        assert_eq!(fused.data()[d.index(6, 2, 2)], 7);
        assert_eq!(fused.data()[d.index(3, 2, 2)], 1);

        // patch search is undefined for probability inputs
        let probs = vec![probs(d, vec![0.5; n])];
        let inputs = FuseInputs {
            target: &target,
            atlas_segs: &segs,
            atlas_imgs: None,
            prob_maps: Some(&probs),
            error_maps: None,
            platt: None,
            fallback: None,
        };
        assert!(matches!(
            fuse_pipeline(&cfg, &inputs),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn jlf_fallback_triggers_only_above_threshold() {
        let d = dims(2, 1, 1);
        let segs = vec![labels(d, vec![4, 4])];
        let target = IntensityVolume::new(d, vec![0.0; 2]).unwrap();
        // voxel 0 has a low-error atlas, voxel 1 has none
        let maps = vec![probs(d, vec![0.9, 0.2])]; // correctness probs
        let fallback = labels(d, vec![8, 8]);
        let cfg = PipelineConfig {
            fusion: FusionConfig::new(FusionMethod::Jlf),
            score: IntensityScoreConfig::default(),
            patch_search: None,
        };
        let inputs = FuseInputs {
            target: &target,
            atlas_segs: &segs,
            atlas_imgs: None,
            prob_maps: Some(&maps),
            error_maps: None,
            platt: None,
            fallback: Some(&fallback),
        };
        let out = fuse_pipeline(&cfg, &inputs).unwrap();
        // errors are 0.1 and 0.8; only the second exceeds 0.5
        assert_eq!(out.data(), &[4, 8]);
    }

    #[test]
    fn scaling_all_error_volumes_keeps_jlf_labels() {
        let d = dims(4, 4, 4);
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let segs: Vec<LabelVolume> = (0..n)
            .map(|_| {
                labels(
                    d,
                    (0..d.voxel_count())
                        .map(|_| rng.gen_range(1..6) as u16)
                        .collect(),
                )
            })
            .collect();
        let base: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                (0..d.voxel_count())
                    .map(|_| rng.gen_range(0.01f32..2.0))
                    .collect()
            })
            .collect();
        let cfg = FusionConfig::new(FusionMethod::Jlf);
        let mk = |c: f32| -> Vec<ScoreVolume> {
            base.iter()
                .map(|v| ScoreVolume::new(d, v.iter().map(|x| x * c).collect()).unwrap())
                .collect()
        };
        let reference = jlf_fuse(&segs, &mk(1.0), &cfg).unwrap();
        for c in [1e-3f32, 1e3] {
            let scaled = jlf_fuse(&segs, &mk(c), &cfg).unwrap();
            assert_eq!(scaled.data(), reference.data(), "scale {c}");
        }
    }

    #[test]
    fn noiseless_oracle_probabilities_reproduce_ground_truth() {
        use crate::analysis::{dice, oracle_error_probs, OracleConfig, OracleMode};
        use crate::synth::{synth_dataset, SynthSpec};

        // seed 0 leaves every voxel with at least one correct atlas, the
        // regime where exact recovery is guaranteed at sigma = 0
        let spec = SynthSpec {
            dims: dims(16, 16, 16),
            n_labels: 6,
            n_atlases: 5,
            corruption_rate: 0.2,
            intensity_noise_sigma: 0.1,
            seed: 0,
        };
        let ds = synth_dataset(&spec).unwrap();
        let segs: Vec<LabelVolume> = ds.atlases.iter().map(|a| a.labels.clone()).collect();
        for v in 0..spec.dims.voxel_count() {
            assert!(
                segs.iter()
                    .any(|s| s.data()[v] == ds.target_labels.data()[v]),
                "pinned seed must cover every voxel"
            );
        }
        let oracle_cfg = OracleConfig {
            sigma: 0.0,
            ..OracleConfig::new(OracleMode::Gs, 3)
        };
        let errs = oracle_error_probs(&ds.target_labels, &segs, &oracle_cfg).unwrap();
        let labels: std::collections::BTreeSet<u16> = (1..=6).collect();
        for method in [FusionMethod::Jlf, FusionMethod::Pv] {
            let cfg = PipelineConfig {
                fusion: FusionConfig::new(method),
                score: IntensityScoreConfig::default(),
                patch_search: None,
            };
            let inputs = FuseInputs {
                target: &ds.target_image,
                atlas_segs: &segs,
                atlas_imgs: None,
                prob_maps: None,
                error_maps: Some(&errs),
                platt: None,
                fallback: None,
            };
            let fused = fuse_pipeline(&cfg, &inputs).unwrap();
            let report = dice(&ds.target_labels, &fused, &labels).unwrap();
            assert_eq!(report.average, 1.0, "{method:?}");
            assert!(report.per_label.values().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn jlf_output_is_identical_across_thread_counts() {
        let d = dims(8, 8, 4);
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let segs: Vec<LabelVolume> = (0..n)
            .map(|_| {
                labels(
                    d,
                    (0..d.voxel_count())
                        .map(|_| rng.gen_range(1..7) as u16)
                        .collect(),
                )
            })
            .collect();
        let errs: Vec<ProbabilityVolume> = (0..n)
            .map(|_| {
                probs(
                    d,
                    (0..d.voxel_count())
                        .map(|_| rng.gen_range(0.0f32..1.0))
                        .collect(),
                )
            })
            .collect();
        let cfg = FusionConfig::new(FusionMethod::Jlf);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| jlf_fuse(&segs, &errs, &cfg).unwrap())
        };
        let one = run(1);
        for t in [2, 4, 8] {
            assert_eq!(run(t).data(), one.data(), "threads {t}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_sum_to_one_and_scale_invariant(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=6);
            let m = random_spd(&mut rng, n);
            let w = solve_weights(&m, 0.0).unwrap();
            let sum: f64 = w.weights().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);

            for c in [1e-3f64, 1e3] {
                let scaled = DependencyMatrix::from_entries(
                    n, m.entries().iter().map(|e| e * c).collect()).unwrap();
                let ws = solve_weights(&scaled, 0.0).unwrap();
                for (a, b) in w.weights().iter().zip(ws.weights()) {
                    prop_assert!((a - b).abs() <= 1e-9, "c={c} {a} vs {b}");
                }
            }
        }
    }
}
