//! End-to-end encode and decode pipelines.
//!
//! Encoder and decoder share one level-by-level transcode loop: the encoder
//! differs only in where the coded residual comes from (computed against
//! the analysis targets and quantized, instead of read from the stream).
//! Every float operation downstream of that point is executed identically,
//! so the encoder's internal reconstruction and the decoder output are
//! bitwise equal and prediction never drifts.

use crate::cloud_io::VoxelizedCloud;
use crate::coding::bitstream::{
    self, geometry_checksum, QuantizedPyramid, StreamHeader,
};
use crate::coding::params::{InvSqrtConfig, ModelParams, PredictorConfig};
use crate::error::{Error, Result};
use crate::hierarchy::build_hierarchy;
use crate::linalg::InvSqrtMode;
use crate::predictor::{self, PredictorKind};
use crate::transform::{self, CoefficientPyramid, TransformPlan};

impl ModelParams {
    /// Inverse-square-root mode for encoder-side projections at a level.
    pub fn enc_isqrt(&self, level_index: usize) -> InvSqrtMode<'_> {
        match &self.inv_sqrt {
            InvSqrtConfig::Exact => InvSqrtMode::Exact,
            InvSqrtConfig::Taylor { encoder, .. } => InvSqrtMode::Taylor {
                coeffs: &encoder[level_index],
            },
        }
    }

    /// Inverse-square-root mode for decoder-side de-orthonormalization.
    pub fn dec_isqrt(&self, level_index: usize) -> InvSqrtMode<'_> {
        match &self.inv_sqrt {
            InvSqrtConfig::Exact => InvSqrtMode::Exact,
            InvSqrtConfig::Taylor { decoder, .. } => InvSqrtMode::Taylor {
                coeffs: &decoder[level_index],
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncodeOptions {
    /// Overrides the quantizer step from the params file.
    pub step_override: Option<f64>,
    /// Overrides the predictor kind (parameters still come from the params
    /// file when the kinds match, defaults otherwise).
    pub predictor_override: Option<PredictorKind>,
}

#[derive(Debug, Clone)]
pub struct EncodeStats {
    pub point_count: usize,
    /// Payload bits, header excluded.
    pub payload_bits: u64,
    /// Payload bits per level, root first.
    pub per_level_bits: Vec<u64>,
    pub bits_per_voxel: f64,
}

#[derive(Debug, Clone)]
pub struct EncodeResult {
    pub bytes: Vec<u8>,
    pub stats: EncodeStats,
    /// Encoder-side reconstructed attributes (equals the decoder output).
    pub reconstruction: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Resolves the effective predictor configuration for a kind: the params
/// file wins when it configures that kind, defaults otherwise.
fn resolve_predictor(
    params: &ModelParams,
    kind: PredictorKind,
    warnings: &mut Vec<String>,
) -> PredictorConfig {
    if params.predictor.kind() == kind {
        params.predictor.clone()
    } else {
        if matches!(kind, PredictorKind::Linear | PredictorKind::Pbf) {
            warnings.push(format!(
                "params file configures `{}`, using default parameters for `{}`",
                params.predictor.kind().name(),
                kind.name()
            ));
        }
        PredictorConfig::default_for(kind, params.level_count())
    }
}

/// Where the coded residual coefficients come from during transcode.
enum ResidualIo<'a> {
    /// Quantize `target - prediction` and record the symbol.
    Encode {
        quantized: &'a mut QuantizedPyramid,
    },
    /// Read symbols from the stream.
    Decode { quantized: &'a QuantizedPyramid },
    /// Pass `target - prediction` through untouched (no quantization) and
    /// record it, for the lossless pipeline check.
    EncodeRaw { raw: &'a mut CoefficientPyramid },
    /// Read raw residuals.
    DecodeRaw { raw: &'a CoefficientPyramid },
}

impl ResidualIo<'_> {
    /// Returns the dequantized (or raw) residual for one coefficient and
    /// stores the coded symbol in encode modes. `flat` indexes the
    /// channel-interleaved coefficient buffer of the level.
    fn residual(
        &mut self,
        level: usize, // 0 = root
        flat: usize,
        step: f64,
        target_minus_pred: impl FnOnce() -> f64,
    ) -> f64 {
        match self {
            ResidualIo::Encode { quantized } => {
                let q = (target_minus_pred() / step).round() as i64;
                let slot = if level == 0 {
                    &mut quantized.root
                } else {
                    &mut quantized.high[level - 1]
                };
                debug_assert_eq!(slot.len(), flat);
                slot.push(q);
                q as f64 * step
            }
            ResidualIo::Decode { quantized } => {
                let q = if level == 0 {
                    quantized.root[flat]
                } else {
                    quantized.high[level - 1][flat]
                };
                q as f64 * step
            }
            ResidualIo::EncodeRaw { raw } => {
                let v = target_minus_pred();
                let slot = if level == 0 {
                    &mut raw.root
                } else {
                    &mut raw.high[level - 1]
                };
                debug_assert_eq!(slot.len(), flat);
                slot.push(v);
                v
            }
            ResidualIo::DecodeRaw { raw } => {
                if level == 0 {
                    raw.root[flat]
                } else {
                    raw.high[level - 1][flat]
                }
            }
        }
    }
}

/// Targets available only on the encoder side.
struct EncodeTargets {
    /// Orthonormalized root coefficients.
    root_bar: Vec<f64>,
    /// Orthonormalized high-pass coefficients per level.
    high_bar: Vec<Vec<f64>>,
}

/// The shared reconstruction loop. Returns the reconstructed attributes.
fn transcode(
    plan: &TransformPlan,
    params: &ModelParams,
    predictor: &PredictorConfig,
    channels: usize,
    step: f64,
    channel_scale: &[f64],
    targets: Option<&EncodeTargets>,
    io: &mut ResidualIo<'_>,
) -> Result<Vec<f64>> {
    let h = &plan.hierarchy;
    let eff = |c: usize| step * channel_scale.get(c).copied().unwrap_or(1.0);

    // Root: de-orthonormalize the coded coefficients.
    let root_n = h.node_count(0);
    let mut f_hat = vec![0.0; root_n * channels];
    for i in 0..root_n {
        let sqrt_g = plan.gram.g[0][i].sqrt();
        for c in 0..channels {
            let flat = i * channels + c;
            let coded = io.residual(0, flat, eff(c), || targets.unwrap().root_bar[flat]);
            f_hat[flat] = coded / sqrt_g;
        }
    }

    // Levels, coarse to fine.
    let mut pred_params = params.clone();
    pred_params.predictor = predictor.clone();
    for li in 0..plan.level_count() - 1 {
        let enc_mode = params.enc_isqrt(li);
        let g_bar_prime = match predictor::predict_field(plan, li, &f_hat, &pred_params, channels)? {
            Some(field) => {
                let delta = predictor::field_minus_upsample(
                    plan, li, &field, &f_hat, params, channels,
                )?;
                transform::project_ortho(plan, li, &delta, channels, enc_mode)?
            }
            None => vec![0.0; h.highpass_count(li) * channels],
        };
        let mut g_bar = vec![0.0; g_bar_prime.len()];
        for (flat, gp) in g_bar_prime.iter().enumerate() {
            let c = flat % channels;
            let coded = io.residual(li + 1, flat, eff(c), || {
                targets.unwrap().high_bar[li][flat] - gp
            });
            g_bar[flat] = gp + coded;
        }
        let g_hat = transform::apply_block_isqrt(plan, li, &g_bar, channels, params.dec_isqrt(li))?;
        f_hat = transform::synthesize_level(
            plan,
            li,
            &f_hat,
            &g_hat,
            &params.synthesis_kernel(li),
            channels,
        )?;
    }
    Ok(f_hat)
}

/// Builds the transform plan and encoder targets for a cloud.
fn analyze_targets(
    plan: &TransformPlan,
    params: &ModelParams,
    attributes: &[f64],
    channels: usize,
) -> Result<EncodeTargets> {
    let lowpass = transform::analyze_lowpass(plan, attributes, channels)?;
    let mut root_bar = vec![0.0; plan.root_count() * channels];
    for (flat, v) in lowpass.unnormalized[0].iter().enumerate() {
        root_bar[flat] = v / plan.gram.g[0][flat / channels].sqrt();
    }
    let mut high_bar = Vec::with_capacity(plan.level_count() - 1);
    for li in 0..plan.level_count() - 1 {
        high_bar.push(transform::project_ortho(
            plan,
            li,
            &lowpass.normalized[li + 1],
            channels,
            params.enc_isqrt(li),
        )?);
    }
    Ok(EncodeTargets { root_bar, high_bar })
}

fn empty_quantized(plan: &TransformPlan, channels: usize) -> QuantizedPyramid {
    QuantizedPyramid {
        channels,
        root: Vec::with_capacity(plan.root_count() * channels),
        high: (0..plan.level_count() - 1)
            .map(|li| Vec::with_capacity(plan.hierarchy.highpass_count(li) * channels))
            .collect(),
    }
}

fn level_counts(plan: &TransformPlan) -> Vec<u64> {
    let mut counts = vec![plan.root_count() as u64];
    for li in 0..plan.level_count() - 1 {
        counts.push(plan.hierarchy.highpass_count(li) as u64);
    }
    counts
}

/// Encodes a cloud's attributes into a bitstream.
pub fn encode_cloud(
    cloud: &VoxelizedCloud,
    params: &ModelParams,
    options: &EncodeOptions,
) -> Result<EncodeResult> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot encode an empty cloud".into()));
    }
    if cloud.depth != params.depth {
        return Err(Error::Parameter(format!(
            "params are laid out for depth {}, cloud has depth {}",
            params.depth, cloud.depth
        )));
    }
    let channels = cloud.channels;
    let mut warnings = Vec::new();
    let kind = options.predictor_override.unwrap_or(params.predictor.kind());
    if options.predictor_override.is_some() && kind != params.predictor.kind() {
        warnings.push(format!(
            "predictor override `{}` replaces params predictor `{}`",
            kind.name(),
            params.predictor.kind().name()
        ));
    }
    let predictor = resolve_predictor(params, kind, &mut warnings);
    let step = options.step_override.unwrap_or(params.quantizer.step);
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Parameter(format!("quantizer step must be positive, got {step}")));
    }
    let scale = &params.quantizer.channel_scale;

    let hierarchy = build_hierarchy(cloud, params.root_level)?;
    let codes = cloud.morton_codes();
    let checksum = geometry_checksum(cloud.depth, &codes);
    let plan = TransformPlan::new(hierarchy, params.analysis.clone())?;
    let targets = analyze_targets(&plan, params, &cloud.attributes, channels)?;

    let mut quantized = empty_quantized(&plan, channels);
    let reconstruction = {
        let mut io = ResidualIo::Encode {
            quantized: &mut quantized,
        };
        transcode(
            &plan,
            params,
            &predictor,
            channels,
            step,
            scale,
            Some(&targets),
            &mut io,
        )?
    };

    let header = StreamHeader {
        depth: cloud.depth,
        root_level: params.root_level,
        predictor: kind,
        channels: channels as u8,
        step,
        channel_scale: scale.clone(),
        geometry_checksum: checksum,
        point_count: cloud.len() as u64,
        level_counts: level_counts(&plan),
    };
    let (bytes, per_level_bits) = bitstream::write_bitstream(&header, &quantized)?;
    let payload_bits: u64 = per_level_bits.iter().sum();
    let stats = EncodeStats {
        point_count: cloud.len(),
        payload_bits,
        per_level_bits,
        bits_per_voxel: payload_bits as f64 / cloud.len() as f64,
    };
    Ok(EncodeResult {
        bytes,
        stats,
        reconstruction,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub cloud: VoxelizedCloud,
    pub header: StreamHeader,
    pub warnings: Vec<String>,
}

/// Decodes a bitstream against its geometry (attribute values of the
/// geometry cloud are ignored).
pub fn decode_bitstream(
    bytes: &[u8],
    geometry: &VoxelizedCloud,
    params: &ModelParams,
) -> Result<DecodeResult> {
    params.validate()?;
    let (header, quantized) = bitstream::read_bitstream(bytes)?;
    if geometry.depth != header.depth {
        return Err(Error::Geometry(format!(
            "stream encoded at depth {}, geometry loaded at {}",
            header.depth, geometry.depth
        )));
    }
    if header.root_level != params.root_level || header.depth != params.depth {
        return Err(Error::Parameter(format!(
            "params are laid out for depth {}/root {}, stream says {}/{}",
            params.depth, params.root_level, header.depth, header.root_level
        )));
    }
    let codes = geometry.morton_codes();
    let checksum = geometry_checksum(geometry.depth, &codes);
    if checksum != header.geometry_checksum {
        return Err(Error::Geometry(format!(
            "geometry checksum {checksum:#018x} does not match stream {:#018x}",
            header.geometry_checksum
        )));
    }
    if header.point_count != geometry.len() as u64 {
        return Err(Error::Geometry(format!(
            "stream has {} points, geometry {}",
            header.point_count,
            geometry.len()
        )));
    }
    let mut warnings = Vec::new();
    let predictor = resolve_predictor(params, header.predictor, &mut warnings);
    let channels = header.channels as usize;

    let hierarchy = build_hierarchy(geometry, header.root_level)?;
    let plan = TransformPlan::new(hierarchy, params.analysis.clone())?;
    if level_counts(&plan) != header.level_counts {
        return Err(Error::Geometry(
            "per-level coefficient counts disagree with the geometry".into(),
        ));
    }

    let mut io = ResidualIo::Decode {
        quantized: &quantized,
    };
    let attributes = transcode(
        &plan,
        params,
        &predictor,
        channels,
        header.step,
        &header.channel_scale,
        None,
        &mut io,
    )?;
    let cloud = geometry.with_attributes(attributes, channels)?;
    Ok(DecodeResult {
        cloud,
        header,
        warnings,
    })
}

/// Lossless pipeline round trip: analysis, prediction, residual transport
/// with no quantization, then synthesis. Returns the reconstruction and the
/// raw residual pyramid. With tied kernels and the exact inverse square
/// root this reproduces the input to machine precision for any predictor.
pub fn lossless_round_trip(
    cloud: &VoxelizedCloud,
    params: &ModelParams,
) -> Result<(Vec<f64>, CoefficientPyramid)> {
    params.validate()?;
    let channels = cloud.channels;
    let hierarchy = build_hierarchy(cloud, params.root_level)?;
    let plan = TransformPlan::new(hierarchy, params.analysis.clone())?;
    let targets = analyze_targets(&plan, params, &cloud.attributes, channels)?;
    let mut raw = CoefficientPyramid {
        channels,
        root: Vec::with_capacity(plan.root_count() * channels),
        high: (0..plan.level_count() - 1)
            .map(|li| Vec::with_capacity(plan.hierarchy.highpass_count(li) * channels))
            .collect(),
    };
    let predictor = params.predictor.clone();
    let reconstruction = {
        let mut io = ResidualIo::EncodeRaw { raw: &mut raw };
        transcode(
            &plan,
            params,
            &predictor,
            channels,
            1.0,
            &params.quantizer.channel_scale,
            Some(&targets),
            &mut io,
        )?
    };
    // Feed the recorded residuals back through the decode path; the result
    // must match the encoder-side reconstruction exactly.
    let mut io = ResidualIo::DecodeRaw { raw: &raw };
    let decoded = transcode(
        &plan,
        params,
        &predictor,
        channels,
        1.0,
        &params.quantizer.channel_scale,
        None,
        &mut io,
    )?;
    debug_assert_eq!(decoded, reconstruction);
    Ok((decoded, raw))
}
