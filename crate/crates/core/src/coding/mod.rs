//! Quantization, the Laplace rate proxy, entropy coding, and serialization.

pub mod bitstream;
pub mod params;
pub mod rlgr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform scalar quantizer: one trainable step plus optional per-channel
/// scaling (all 1 by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub step: f64,
    pub channel_scale: Vec<f64>,
}

impl QuantizerConfig {
    pub fn new(step: f64, channels: usize) -> Self {
        QuantizerConfig {
            step,
            channel_scale: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Parameter(format!(
                "quantizer step must be positive, got {}",
                self.step
            )));
        }
        if self.channel_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Parameter("channel scales must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_step(&self, channel: usize) -> f64 {
        self.step * self.channel_scale.get(channel).copied().unwrap_or(1.0)
    }
}

/// `q = round(c / step)`, half away from zero.
pub fn quantize(coeffs: &[f64], step: f64) -> Vec<i64> {
    coeffs.iter().map(|c| (c / step).round() as i64).collect()
}

/// Midpoint reconstruction `c = q * step`.
pub fn dequantize(symbols: &[i64], step: f64) -> Vec<f64> {
    symbols.iter().map(|q| *q as f64 * step).collect()
}

/// Per-level Laplace model for the rate proxy: index 0 is the root level,
/// then one `(location, diversity)` pair per high-pass level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceRateModel {
    pub location: Vec<f64>,
    pub diversity: Vec<f64>,
}

impl LaplaceRateModel {
    /// Zero locations; a wide root diversity (root coefficients carry
    /// whole-subtree sums) and a moderate one for the detail levels.
    pub fn new(levels: usize) -> Self {
        let mut diversity = vec![8.0; levels];
        if let Some(root) = diversity.first_mut() {
            *root = 256.0;
        }
        LaplaceRateModel {
            location: vec![0.0; levels],
            diversity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.location.len() != self.diversity.len() {
            return Err(Error::Parameter(
                "rate model location/diversity length mismatch".into(),
            ));
        }
        if self.diversity.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Parameter("Laplace diversity must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.location.len()
    }
}

/// Probability floor inside the rate proxy log: 2^-40.
pub const RATE_PROXY_FLOOR: f64 = 9.094947017729282e-13;

/// Probability that a Laplace(location, diversity) variable falls in the
/// width-`step` bin centered on `y`, evaluated in overflow-safe form.
pub fn laplace_bin_probability(y: f64, location: f64, diversity: f64, step: f64) -> f64 {
    let z = (y - location) / diversity;
    let h = 0.5 * step / diversity;
    let p = if z.abs() >= h {
        // bin entirely on one side of the peak
        0.5 * ((h - z.abs()).exp() - (-h - z.abs()).exp())
    } else {
        1.0 - 0.5 * ((z - h).exp() + (-z - h).exp())
    };
    p.max(RATE_PROXY_FLOOR)
}

/// Laplace-CDF rate proxy in bits per point: sums
/// `-log2 P(bin containing y)` over all levels and divides by `n_points`.
/// `levels[0]` is the root coefficient slice.
pub fn rate_proxy(
    levels: &[&[f64]],
    model: &LaplaceRateModel,
    step: f64,
    n_points: usize,
) -> Result<f64> {
    Ok(rate_proxy_per_level(levels, model, step, n_points)?
        .iter()
        .sum())
}

/// Per-level breakdown of [`rate_proxy`], bits per point.
pub fn rate_proxy_per_level(
    levels: &[&[f64]],
    model: &LaplaceRateModel,
    step: f64,
    n_points: usize,
) -> Result<Vec<f64>> {
    model.validate()?;
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {step}")));
    }
    if levels.len() != model.levels() {
        return Err(Error::Shape(format!(
            "rate model has {} levels, got {} coefficient sets",
            model.levels(),
            levels.len()
        )));
    }
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::with_capacity(levels.len());
    for (li, coeffs) in levels.iter().enumerate() {
        let mut bits = 0.0;
        for &y in coeffs.iter() {
            let p = laplace_bin_probability(y, model.location[li], model.diversity[li], step);
            bits -= p.ln() / ln2;
        }
        out.push(bits / n_points as f64);
    }
    Ok(out)
}
