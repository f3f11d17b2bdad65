//! Model parameter set and its versioned JSON serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coding::{LaplaceRateModel, QuantizerConfig};
use crate::error::{Error, Result};
use crate::hierarchy::AKernel;
use crate::linalg;
use crate::predictor::{LinearPredictorParams, PbfParams, PredictorKind};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Predictor selection plus its learned parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorConfig {
    None,
    Linear(LinearPredictorParams),
    Gpcc,
    Pbf(PbfParams),
}

impl PredictorConfig {
    pub fn kind(&self) -> PredictorKind {
        match self {
            PredictorConfig::None => PredictorKind::None,
            PredictorConfig::Linear(_) => PredictorKind::Linear,
            PredictorConfig::Gpcc => PredictorKind::Gpcc,
            PredictorConfig::Pbf(_) => PredictorKind::Pbf,
        }
    }

    /// Default parameters for a predictor kind over `levels` levels.
    pub fn default_for(kind: PredictorKind, levels: usize) -> Self {
        match kind {
            PredictorKind::None => PredictorConfig::None,
            PredictorKind::Linear => {
                PredictorConfig::Linear(LinearPredictorParams::uniform(levels))
            }
            PredictorKind::Gpcc => PredictorConfig::Gpcc,
            PredictorKind::Pbf => PredictorConfig::Pbf(PbfParams::default_with_degree(20)),
        }
    }
}

/// How the per-block `(Psi' Psi)^{-1/2}` operator is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum InvSqrtConfig {
    /// Eigendecomposition, exact; the lossless configuration.
    Exact,
    /// Trainable polynomial evaluation, one coefficient set per level for
    /// the encoder side (orthonormalization and prediction projection) and
    /// one for the decoder side (de-orthonormalization).
    Taylor {
        encoder: Vec<Vec<f64>>,
        decoder: Vec<Vec<f64>>,
    },
}

impl InvSqrtConfig {
    pub fn taylor_default(levels: usize, order: usize) -> Self {
        let coeffs = linalg::taylor_inv_sqrt_coeffs(order);
        InvSqrtConfig::Taylor {
            encoder: vec![coeffs.clone(); levels],
            decoder: vec![coeffs; levels],
        }
    }
}

/// Every tunable of the codec: per-level kernels, predictor parameters,
/// inverse-square-root coefficients, quantizer, and rate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub version: u32,
    /// Octree depth the kernels are laid out for.
    pub depth: u8,
    /// Root level; kernels cover levels `root_level..depth`.
    pub root_level: u8,
    /// When true the synthesis kernels are ignored and analysis kernels are
    /// used in both directions, which makes the transform exactly
    /// invertible.
    pub tied_kernels: bool,
    /// Analysis kernels, one per level transition (coarse to fine).
    pub analysis: Vec<AKernel>,
    /// Synthesis kernels, same layout.
    pub synthesis: Vec<AKernel>,
    pub predictor: PredictorConfig,
    pub inv_sqrt: InvSqrtConfig,
    pub quantizer: QuantizerConfig,
    pub rate_model: LaplaceRateModel,
}

impl ModelParams {
    /// Classical all-ones transform with exact inversion and the given
    /// predictor kind; the starting point for training and the CLI default.
    pub fn defaults(depth: u8, root_level: u8, predictor: PredictorKind) -> Self {
        let levels = (depth - root_level) as usize;
        ModelParams {
            version: PARAMS_FORMAT_VERSION,
            depth,
            root_level,
            tied_kernels: true,
            analysis: vec![AKernel::unit(); levels],
            synthesis: vec![AKernel::unit(); levels],
            predictor: PredictorConfig::default_for(predictor, levels),
            inv_sqrt: InvSqrtConfig::Exact,
            quantizer: QuantizerConfig::new(16.0, 3),
            rate_model: LaplaceRateModel::new(levels + 1),
        }
    }

    /// Level transition count (`depth - root_level`).
    pub fn level_count(&self) -> usize {
        self.analysis.len()
    }

    /// Kernel used for upsampling/synthesis at a level transition.
    pub fn synthesis_kernel(&self, level_index: usize) -> AKernel {
        if self.tied_kernels {
            self.analysis[level_index]
        } else {
            self.synthesis[level_index]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = |field: &str, msg: String| Error::ParamsSchema {
            field: field.into(),
            msg,
        };
        if self.version != PARAMS_FORMAT_VERSION {
            return Err(named(
                "version",
                format!("expected {PARAMS_FORMAT_VERSION}, got {}", self.version),
            ));
        }
        if self.root_level >= self.depth {
            return Err(named(
                "root_level",
                format!("root level {} must be below depth {}", self.root_level, self.depth),
            ));
        }
        let levels = (self.depth - self.root_level) as usize;
        if self.analysis.len() != levels || self.synthesis.len() != levels {
            return Err(named(
                "analysis",
                format!(
                    "expected {levels} kernels, got {} analysis / {} synthesis",
                    self.analysis.len(),
                    self.synthesis.len()
                ),
            ));
        }
        for k in self.analysis.iter().chain(self.synthesis.iter()) {
            k.validate_positive()
                .map_err(|e| named("kernels", e.to_string()))?;
        }
        match &self.predictor {
            PredictorConfig::None | PredictorConfig::Gpcc => {}
            PredictorConfig::Linear(p) => p
                .validate(levels)
                .map_err(|e| named("predictor", e.to_string()))?,
            PredictorConfig::Pbf(p) => p
                .validate()
                .map_err(|e| named("predictor", e.to_string()))?,
        }
        if let InvSqrtConfig::Taylor { encoder, decoder } = &self.inv_sqrt {
            if encoder.len() != levels || decoder.len() != levels {
                return Err(named(
                    "inv_sqrt",
                    format!("expected {levels} coefficient sets per side"),
                ));
            }
            if encoder.iter().chain(decoder.iter()).any(|c| c.is_empty()) {
                return Err(named("inv_sqrt", "empty coefficient set".into()));
            }
        }
        self.quantizer
            .validate()
            .map_err(|e| named("quantizer", e.to_string()))?;
        self.rate_model
            .validate()
            .map_err(|e| named("rate_model", e.to_string()))?;
        if self.rate_model.levels() != levels + 1 {
            return Err(named(
                "rate_model",
                format!("expected {} level entries, got {}", levels + 1, self.rate_model.levels()),
            ));
        }
        Ok(())
    }

    /// Number of scalar parameters the trainer touches.
    pub fn trainable_count(&self) -> usize {
        let levels = self.level_count();
        let kernels = 16 * levels;
        let predictor = match &self.predictor {
            PredictorConfig::None | PredictorConfig::Gpcc => 0,
            PredictorConfig::Linear(p) => 27 * p.weights.len(),
            PredictorConfig::Pbf(p) => 2 + p.r.len(),
        };
        let inv_sqrt = match &self.inv_sqrt {
            InvSqrtConfig::Exact => 0,
            InvSqrtConfig::Taylor { encoder, decoder } => {
                encoder.iter().map(|c| c.len()).sum::<usize>()
                    + decoder.iter().map(|c| c.len()).sum::<usize>()
            }
        };
        kernels + predictor + inv_sqrt + 1 + 2 * self.rate_model.levels()
    }
}

/// Saves parameters as pretty-printed JSON (atomic write). The decimal
/// encoding round-trips every f64 exactly.
pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let path = path.as_ref();
    let tmp = crate::temp_sibling(path);
    let json = serde_json::to_string_pretty(params)
        .map_err(|e| Error::ParamsSchema {
            field: "<serialize>".into(),
            msg: e.to_string(),
        })?;
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let params: ModelParams = serde_json::from_str(&text).map_err(|e| Error::ParamsSchema {
        field: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_round_trip() {
        let params = ModelParams::defaults(6, 2, PredictorKind::Linear);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        save_params(&params, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn full_precision_round_trip() {
        let mut params = ModelParams::defaults(6, 2, PredictorKind::Pbf);
        params.tied_kernels = false;
        for (i, k) in params.analysis.iter_mut().enumerate() {
            for (d, w) in k.0.iter_mut().enumerate() {
                *w = 1.0 + ((i * 8 + d) as f64).sin() * 0.123456789012345;
            }
        }
        params.inv_sqrt = InvSqrtConfig::taylor_default(4, 12);
        params.quantizer.step = std::f64::consts::PI;
        params.rate_model.diversity[0] = 1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        save_params(&params, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, params, "bit-exact f64 round trip");
    }

    #[test]
    fn unknown_predictor_kind_rejected() {
        let text = r#"{"version":1,"depth":4,"root_level":1,"tied_kernels":true,
            "analysis":[],"synthesis":[],"predictor":{"kind":"magic"},
            "inv_sqrt":{"mode":"exact"},
            "quantizer":{"step":1.0,"channel_scale":[1.0]},
            "rate_model":{"location":[],"diversity":[]}}"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, text).unwrap();
        match load_params(&path) {
            Err(Error::ParamsSchema { .. }) => {}
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn paper_scale_parameter_count() {
        // 10-bit octree, root level 4, 50th-order polynomial, degree-20
        // PBF or per-level linear kernels: the trained set is ~900 scalars.
        let mut params = ModelParams::defaults(10, 4, PredictorKind::Linear);
        params.inv_sqrt = InvSqrtConfig::taylor_default(6, 50);
        let n = params.trainable_count();
        assert!((850..=950).contains(&n), "linear config has {n} parameters");
    }
}
