//! Multi-atlas label fusion over file-based volumes.
//!
//! The pipeline combines warped atlas segmentations of a target image
//! into a consensus segmentation. Per-atlas error values come from local
//! intensity disagreement or from externally computed per-voxel
//! correctness probabilities (optionally Platt-calibrated); fusion is
//! either closed-form weighted consensus over a per-voxel dependency
//! matrix or plurality voting over trusted atlases, with an external
//! fallback segmentation for voxels nothing was trusted on. Evaluation
//! utilities cover Dice scores, correctness t-score maps, oracle error
//! probabilities, and significance testing.

pub mod analysis;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod probsource;
pub mod rng;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
