//! Critically sampled multilevel transform codec for voxelized point cloud
//! attributes.
//!
//! The codec builds a Morton-ordered octree hierarchy over the occupied
//! voxels, runs a region-adaptive hierarchical transform with per-block
//! high-pass bases, predicts each level's high-pass coefficients from the
//! reconstructed coarser level (plain upsampling, a locally linear filter,
//! an inverse-distance baseline, or a polynomial of bilateral filter), and
//! codes the quantized residuals with an adaptive run-length Golomb-Rice
//! coder. A rate-distortion trainer tunes the transform kernels, predictor
//! parameters, quantizer step, and rate model on crops of a corpus.

pub mod cloud_io;
pub mod codec;
pub mod coding;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod linalg;
pub mod morton;
pub mod predictor;
pub mod trainer;
pub mod transform;

pub use cloud_io::VoxelizedCloud;
pub use codec::{decode_bitstream, encode_cloud, EncodeOptions, EncodeResult};
pub use coding::params::{ModelParams, PredictorConfig};
pub use error::{Error, Result};

use std::path::{Path, PathBuf};

/// Temp path next to `path` for atomic write-then-rename.
pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp.{}", std::process::id()));
    path.with_file_name(name)
}
