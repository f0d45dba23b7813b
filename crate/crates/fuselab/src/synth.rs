//! Synthetic dataset generation: a blobby ground-truth segmentation
//! (seeded Voronoi regions), an intensity rendering of it, and corrupted
//! atlas copies, all deterministic in the seed.

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{AtlasPair, Dims, IntensityVolume, LabelVolume};

const STREAM_SEED_POINTS: u64 = 0x7365_6564;
const STREAM_TARGET_NOISE: u64 = 0x746e_6f69;
const STREAM_ATLAS_NOISE: u64 = 0x616e_6f69;
const STREAM_CORRUPT: u64 = 0x636f_7272;
const STREAM_RELABEL: u64 = 0x7265_6c61;

/// Parameters of the synthetic dataset.
#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub dims: Dims,
    pub n_labels: usize,
    pub n_atlases: usize,
    /// Fraction of voxels whose atlas label is perturbed.
    pub corruption_rate: f64,
    pub intensity_noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels == 0 {
            return Err(Error::Config("n_labels must be positive".into()));
        }
        // ids 1..=n_labels must stay clear of the unassigned sentinel
        if self.n_labels > u16::MAX as usize - 1 {
            return Err(Error::Config(format!(
                "n_labels {} exceeds the label type capacity",
                self.n_labels
            )));
        }
        if self.n_labels > self.dims.voxel_count() {
            return Err(Error::Config(format!(
                "n_labels {} exceeds the voxel count {}",
                self.n_labels,
                self.dims.voxel_count()
            )));
        }
        if self.n_atlases == 0 {
            return Err(Error::Config("n_atlases must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::Config(format!(
                "corruption rate must lie in [0, 1], got {}",
                self.corruption_rate
            )));
        }
        if !self.intensity_noise_sigma.is_finite() || self.intensity_noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise sigma must be a non-negative finite real, got {}",
                self.intensity_noise_sigma
            )));
        }
        Ok(())
    }
}

/// A generated target with its atlases.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub target_image: IntensityVolume,
    pub target_labels: LabelVolume,
    pub atlases: Vec<AtlasPair>,
}

fn render_intensity(
    labels: &LabelVolume,
    sigma: f64,
    seed: u64,
    stream: u64,
    substream: u64,
) -> Result<IntensityVolume> {
    let data = labels
        .data()
        .iter()
        .enumerate()
        .map(|(v, &l)| {
            let noise = if sigma == 0.0 {
                0.0
            } else {
                sigma * rng::gauss(seed, stream, substream, v as u64)
            };
            (l as f64 + noise) as f32
        })
        .collect();
    IntensityVolume::new(labels.dims(), data)
}

/// Generate the dataset. Target labels are the Voronoi cells of
/// `n_labels` distinct seed voxels (ids 1..=n_labels); intensities map
/// each label id to its own level plus Gaussian noise; each atlas
/// re-labels every voxel independently with probability
/// `corruption_rate` to a uniformly random different label and renders
/// its intensity from the corrupted labels.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let d = spec.dims;
    let nvox = d.voxel_count();

    // distinct seed voxels, drawn with rejection on occupied positions
    let mut seed_points: Vec<(usize, usize, usize)> = Vec::with_capacity(spec.n_labels);
    let mut occupied = vec![false; nvox];
    for i in 0..spec.n_labels {
        let mut attempt = 0u64;
        loop {
            let hx = rng::hash4(spec.seed, STREAM_SEED_POINTS, i as u64, attempt * 3);
            let hy = rng::hash4(spec.seed, STREAM_SEED_POINTS, i as u64, attempt * 3 + 1);
            let hz = rng::hash4(spec.seed, STREAM_SEED_POINTS, i as u64, attempt * 3 + 2);
            let p = (
                (hx % d.nx() as u64) as usize,
                (hy % d.ny() as u64) as usize,
                (hz % d.nz() as u64) as usize,
            );
            let idx = d.index(p.0, p.1, p.2);
            if !occupied[idx] {
                occupied[idx] = true;
                seed_points.push(p);
                break;
            }
            attempt += 1;
        }
    }

    // nearest seed labels the voxel; distance ties go to the lower id
    let mut target = Vec::with_capacity(nvox);
    for v in 0..nvox {
        let (x, y, z) = d.coords(v);
        let mut best = 0usize;
        let mut best_d = u64::MAX;
        for (i, &(sx, sy, sz)) in seed_points.iter().enumerate() {
            let dx = x.abs_diff(sx) as u64;
            let dy = y.abs_diff(sy) as u64;
            let dz = z.abs_diff(sz) as u64;
            let dist = dx * dx + dy * dy + dz * dz;
            if dist < best_d {
                best_d = dist;
                best = i;
            }
        }
        target.push((best + 1) as u16);
    }
    let target_labels = LabelVolume::new(d, target)?;
    let target_image = render_intensity(
        &target_labels,
        spec.intensity_noise_sigma,
        spec.seed,
        STREAM_TARGET_NOISE,
        0,
    )?;

    let mut atlases = Vec::with_capacity(spec.n_atlases);
    for a in 0..spec.n_atlases {
        let labels: Vec<u16> = target_labels
            .data()
            .iter()
            .enumerate()
            .map(|(v, &orig)| {
                let u = rng::unit_f64(rng::hash4(spec.seed, STREAM_CORRUPT, a as u64, v as u64));
                if u <= spec.corruption_rate && spec.n_labels > 1 {
                    // uniform over the other labels
                    let k = rng::hash4(spec.seed, STREAM_RELABEL, a as u64, v as u64)
                        % (spec.n_labels as u64 - 1);
                    let k = (k + 1) as u16;
                    if k < orig {
                        k
                    } else {
                        k + 1
                    }
                } else {
                    orig
                }
            })
            .collect();
        let labels = LabelVolume::new(d, labels)?;
        let image = render_intensity(
            &labels,
            spec.intensity_noise_sigma,
            spec.seed,
            STREAM_ATLAS_NOISE,
            a as u64 + 1,
        )?;
        atlases.push(AtlasPair { image, labels });
    }

    Ok(SynthDataset {
        target_image,
        target_labels,
        atlases,
    })
}
