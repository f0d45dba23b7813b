//! Per-atlas voxelwise error sources.
//!
//! Errors come either from local intensity disagreement (a clipped cubic
//! neighborhood sum of squared differences raised to an exponent) or from
//! an externally produced per-voxel correctness probability map, whose
//! complement is the error probability. An optional local patch search
//! re-aligns atlas labels before the score is taken.

use crate::error::{Error, Result};
use crate::volume::{Dims, IntensityVolume, LabelVolume, ProbabilityVolume, ScoreVolume};
use rayon::prelude::*;
use std::ops::RangeInclusive;

/// Parameters of the intensity error score: exponent `beta` and the
/// neighborhood radius (the cube has side `2 * radius + 1`).
#[derive(Clone, Copy, Debug)]
pub struct IntensityScoreConfig {
    pub beta: f64,
    pub radius: usize,
}

impl Default for IntensityScoreConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            radius: 2,
        }
    }
}

impl IntensityScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "beta must be a positive finite real, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Parameters of the local patch search: displacement radius and the
/// similarity patch radius.
#[derive(Clone, Copy, Debug)]
pub struct PatchSearchConfig {
    pub search_radius: usize,
    pub patch_radius: usize,
}

impl Default for PatchSearchConfig {
    fn default() -> Self {
        Self {
            search_radius: 3,
            patch_radius: 2,
        }
    }
}

pub(crate) fn ensure_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

#[inline]
fn clipped(center: usize, radius: usize, n: usize) -> RangeInclusive<usize> {
    center.saturating_sub(radius)..=(center + radius).min(n - 1)
}

#[inline]
fn apply_beta(sum: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        sum
    } else {
        sum.powf(beta)
    }
}

/// Neighborhood sum of squared intensity differences, raised to `beta`.
/// The neighborhood is clipped at volume borders.
pub fn intensity_error_score(
    target: &IntensityVolume,
    atlas: &IntensityVolume,
    cfg: &IntensityScoreConfig,
) -> Result<ScoreVolume> {
    cfg.validate()?;
    ensure_same_dims(target.dims(), atlas.dims(), "intensity error score")?;
    let d = target.dims();
    let (nx, ny, nz) = (d.nx(), d.ny(), d.nz());
    let td = target.data();
    let ad = atlas.data();
    let r = cfg.radius;
    let out: Vec<f32> = (0..d.voxel_count())
        .into_par_iter()
        .map(|v| {
            let (x, y, z) = d.coords(v);
            let mut sum = 0.0f64;
            for zz in clipped(z, r, nz) {
                for yy in clipped(y, r, ny) {
                    for xx in clipped(x, r, nx) {
                        let i = d.index(xx, yy, zz);
                        let diff = td[i] as f64 - ad[i] as f64;
                        sum += diff * diff;
                    }
                }
            }
            apply_beta(sum, cfg.beta) as f32
        })
        .collect();
    ScoreVolume::new(d, out)
}

/// Error probability from a correctness probability map: `1 - p`.
pub fn network_error_prob(prob_map: &ProbabilityVolume) -> ProbabilityVolume {
    let data = prob_map.data().iter().map(|&p| 1.0 - p).collect();
    ProbabilityVolume::new_unchecked(prob_map.dims(), data)
}

/// Sum of squared differences between the patch at `(x, y, z)` in the
/// target and the patch displaced by `(dx, dy, dz)` in the atlas. Patch
/// voxels are clipped at the border; displaced samples that fall outside
/// the volume are skipped.
#[allow(clippy::too_many_arguments)]
fn patch_sum(
    d: Dims,
    td: &[f32],
    ad: &[f32],
    x: usize,
    y: usize,
    z: usize,
    dx: isize,
    dy: isize,
    dz: isize,
    rp: usize,
) -> f64 {
    let (nx, ny, nz) = (d.nx() as isize, d.ny() as isize, d.nz() as isize);
    let mut sum = 0.0f64;
    for zz in clipped(z, rp, nz as usize) {
        let az = zz as isize + dz;
        if az < 0 || az >= nz {
            continue;
        }
        for yy in clipped(y, rp, ny as usize) {
            let ay = yy as isize + dy;
            if ay < 0 || ay >= ny {
                continue;
            }
            for xx in clipped(x, rp, nx as usize) {
                let ax = xx as isize + dx;
                if ax < 0 || ax >= nx {
                    continue;
                }
                let t = td[d.index(xx, yy, zz)] as f64;
                let a = ad[d.index(ax as usize, ay as usize, az as usize)] as f64;
                let diff = t - a;
                sum += diff * diff;
            }
        }
    }
    sum
}

/// Local patch search: per voxel, find the displacement (bounded by the
/// search radius, staying inside the volume) minimizing the patch sum of
/// squared differences, and take the atlas label and score from there.
/// Ties keep zero displacement first, then the lexicographically
/// smallest `(dz, dy, dx)`.
pub fn patch_search_refine(
    target: &IntensityVolume,
    atlas_img: &IntensityVolume,
    atlas_seg: &LabelVolume,
    score_cfg: &IntensityScoreConfig,
    search_cfg: &PatchSearchConfig,
) -> Result<(LabelVolume, ScoreVolume)> {
    score_cfg.validate()?;
    ensure_same_dims(target.dims(), atlas_img.dims(), "patch search image")?;
    ensure_same_dims(target.dims(), atlas_seg.dims(), "patch search labels")?;
    let d = target.dims();
    let (nx, ny, nz) = (d.nx() as isize, d.ny() as isize, d.nz() as isize);
    let td = target.data();
    let ad = atlas_img.data();
    let sd = atlas_seg.data();
    let rs = search_cfg.search_radius as isize;
    let rp = search_cfg.patch_radius;

    let (labels, scores): (Vec<u16>, Vec<f32>) = (0..d.voxel_count())
        .into_par_iter()
        .map(|v| {
            let (x, y, z) = d.coords(v);
            let mut best_sum = patch_sum(d, td, ad, x, y, z, 0, 0, 0, rp);
            let mut best_label = sd[v];
            for dz in -rs..=rs {
                let az = z as isize + dz;
                if az < 0 || az >= nz {
                    continue;
                }
                for dy in -rs..=rs {
                    let ay = y as isize + dy;
                    if ay < 0 || ay >= ny {
                        continue;
                    }
                    for dx in -rs..=rs {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let ax = x as isize + dx;
                        if ax < 0 || ax >= nx {
                            continue;
                        }
                        let s = patch_sum(d, td, ad, x, y, z, dx, dy, dz, rp);
                        if s < best_sum {
                            best_sum = s;
                            best_label = sd[d.index(ax as usize, ay as usize, az as usize)];
                        }
                    }
                }
            }
            (best_label, apply_beta(best_sum, score_cfg.beta) as f32)
        })
        .unzip();

    Ok((LabelVolume::new(d, labels)?, ScoreVolume::new(d, scores)?))
}
