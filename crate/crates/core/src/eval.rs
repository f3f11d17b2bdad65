//! Rate-distortion evaluation: PSNR computation and step sweeps.

use crate::cloud_io::VoxelizedCloud;
use crate::codec::{decode_bitstream, encode_cloud, EncodeOptions};
use crate::coding::params::ModelParams;
use crate::error::{Error, Result};
use crate::predictor::PredictorKind;

/// Peak value for PSNR; attributes are full-range 8-bit.
pub const PSNR_PEAK: f64 = 255.0;

/// One point of a rate-distortion sweep. PSNRs are in dB, infinite for an
/// exact reconstruction; the combined value weights luma 6/8.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub delta: f64,
    pub bits_per_voxel: f64,
    pub psnr_y: f64,
    pub psnr_u: f64,
    pub psnr_v: f64,
    pub psnr_yuv: f64,
}

impl RdPoint {
    pub const CSV_HEADER: &'static str = "delta,bits_per_voxel,psnr_y,psnr_u,psnr_v,psnr_yuv";

    pub fn csv_row(&self) -> String {
        fn fmt(v: f64) -> String {
            if v.is_infinite() {
                "inf".into()
            } else {
                format!("{v}")
            }
        }
        format!(
            "{},{},{},{},{},{}",
            self.delta,
            self.bits_per_voxel,
            fmt(self.psnr_y),
            fmt(self.psnr_u),
            fmt(self.psnr_v),
            fmt(self.psnr_yuv)
        )
    }
}

/// Per-channel mean squared error between two attribute buffers.
pub fn channel_mse(a: &[f64], b: &[f64], channels: usize) -> Vec<f64> {
    let mut mse = vec![0.0; channels];
    let n = a.len() / channels;
    for (pa, pb) in a.chunks_exact(channels).zip(b.chunks_exact(channels)) {
        for c in 0..channels {
            let d = pa[c] - pb[c];
            mse[c] += d * d;
        }
    }
    for m in &mut mse {
        *m /= n as f64;
    }
    mse
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    }
}

/// Encodes and decodes the cloud at each step value and reports rate and
/// PSNR per channel. The attributes are compared in their stored space
/// (YUV for color pipelines).
pub fn rd_sweep(
    cloud: &VoxelizedCloud,
    params: &ModelParams,
    deltas: &[f64],
    predictor: Option<PredictorKind>,
) -> Result<Vec<RdPoint>> {
    if deltas.is_empty() {
        return Err(Error::Parameter("delta list must be nonempty".into()));
    }
    if cloud.channels != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            got: cloud.channels,
        });
    }
    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let enc = encode_cloud(
            cloud,
            params,
            &EncodeOptions {
                step_override: Some(delta),
                predictor_override: predictor,
            },
        )?;
        let dec = decode_bitstream(&enc.bytes, cloud, params)?;
        let mse = channel_mse(&dec.cloud.attributes, &cloud.attributes, 3);
        let (py, pu, pv) = (
            psnr_from_mse(mse[0]),
            psnr_from_mse(mse[1]),
            psnr_from_mse(mse[2]),
        );
        points.push(RdPoint {
            delta,
            bits_per_voxel: enc.stats.bits_per_voxel,
            psnr_y: py,
            psnr_u: pu,
            psnr_v: pv,
            psnr_yuv: (6.0 * py + pu + pv) / 8.0,
        });
    }
    Ok(points)
}

/// Checks that rate does not increase with the step; returns violations as
/// warnings.
pub fn monotonicity_warnings(points: &[RdPoint]) -> Vec<String> {
    let mut sorted: Vec<&RdPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.delta.total_cmp(&b.delta));
    let mut warnings = Vec::new();
    for pair in sorted.windows(2) {
        if pair[1].bits_per_voxel > pair[0].bits_per_voxel {
            warnings.push(format!(
                "rate inversion: delta {} -> {} bits/voxel rises {} -> {}",
                pair[0].delta, pair[1].delta, pair[0].bits_per_voxel, pair[1].bits_per_voxel
            ));
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::random_cloud;

    #[test]
    fn sweep_is_monotone_on_random_cloud() {
        let cloud = random_cloud(400, 5, 3, 55);
        let params = ModelParams::defaults(5, 1, PredictorKind::Linear);
        let deltas = [64.0, 16.0, 4.0];
        let points = rd_sweep(&cloud, &params, &deltas, None).unwrap();
        assert!(monotonicity_warnings(&points).is_empty());
        assert!(points[0].bits_per_voxel <= points[2].bits_per_voxel);
        assert!(points[0].psnr_yuv <= points[2].psnr_yuv);
    }

    #[test]
    fn csv_schema_is_stable() {
        let p = RdPoint {
            delta: 2.0,
            bits_per_voxel: 1.5,
            psnr_y: f64::INFINITY,
            psnr_u: 40.0,
            psnr_v: 41.25,
            psnr_yuv: f64::INFINITY,
        };
        assert_eq!(RdPoint::CSV_HEADER, "delta,bits_per_voxel,psnr_y,psnr_u,psnr_v,psnr_yuv");
        assert_eq!(p.csv_row(), "2,1.5,inf,40,41.25,inf");
    }
}
