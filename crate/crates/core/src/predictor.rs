//! Upsampling predictors and the constrained-prediction decomposition.
//!
//! A predictor maps the reconstructed low-pass field at level `l` to a
//! guess of the field at level `l+1`. Projecting that guess onto the
//! high-pass basis gives `G'`; only the residual `G'' = G* - G'` is coded.
//! Both encoder and decoder run the predictor on the same reconstructed
//! coefficients, so the loop is drift-free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::AKernel;
use crate::linalg;
use crate::morton;
use crate::transform::TransformPlan;

/// Predictor selection, stored in the bitstream header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    None,
    Linear,
    Gpcc,
    Pbf,
}

impl PredictorKind {
    pub fn id(self) -> u8 {
        match self {
            PredictorKind::None => 0,
            PredictorKind::Linear => 1,
            PredictorKind::Gpcc => 2,
            PredictorKind::Pbf => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => PredictorKind::None,
            1 => PredictorKind::Linear,
            2 => PredictorKind::Gpcc,
            3 => PredictorKind::Pbf,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::None => "none",
            PredictorKind::Linear => "linear",
            PredictorKind::Gpcc => "gpcc",
            PredictorKind::Pbf => "pbf",
        }
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => PredictorKind::None,
            "linear" => PredictorKind::Linear,
            "gpcc" => PredictorKind::Gpcc,
            "pbf" => PredictorKind::Pbf,
            other => return Err(Error::Parameter(format!("unknown predictor `{other}`"))),
        })
    }
}

/// 27-neighborhood weights for the locally linear predictor, either one
/// shared kernel or one per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictorParams {
    /// Each kernel is indexed by `(kx+1)*9 + (ky+1)*3 + (kz+1)` for the
    /// offset `k = n_i - n_j`; entry 13 is the center.
    pub weights: Vec<Vec<f64>>,
}

impl LinearPredictorParams {
    pub fn uniform(per_level: usize) -> Self {
        LinearPredictorParams {
            weights: vec![vec![1.0; 27]; per_level.max(1)],
        }
    }

    pub fn level_weights(&self, level_index: usize) -> &[f64] {
        if self.weights.len() == 1 {
            &self.weights[0]
        } else {
            &self.weights[level_index]
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.weights.is_empty() || (self.weights.len() != 1 && self.weights.len() != levels) {
            return Err(Error::Parameter(format!(
                "linear predictor needs 1 or {levels} weight sets, got {}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| w.len() != 27) {
            return Err(Error::Parameter("linear predictor kernels must have 27 weights".into()));
        }
        Ok(())
    }
}

/// Polynomial-bilateral-filter parameters: spatial and range bandwidths
/// plus the polynomial coefficients `r_0..r_K` (gain then cascade).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbfParams {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub r: Vec<f64>,
}

impl PbfParams {
    pub fn default_with_degree(k: usize) -> Self {
        let mut r = vec![0.0; k + 1];
        r[0] = 1.0;
        if k >= 1 {
            r[1] = 1.0;
        }
        PbfParams {
            sigma_x: 1.0,
            sigma_y: 64.0,
            r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0) || !(self.sigma_y > 0.0) {
            return Err(Error::Parameter(format!(
                "bilateral bandwidths must be positive (sigma_x={}, sigma_y={})",
                self.sigma_x, self.sigma_y
            )));
        }
        if self.r.is_empty() {
            return Err(Error::Parameter("PBF needs at least the gain coefficient r_0".into()));
        }
        Ok(())
    }
}

/// Per-level predicted high-pass coefficients and their residuals.
#[derive(Debug, Clone)]
pub struct PredictionOutputs {
    pub g_prime: Vec<Vec<f64>>,
    pub g_dprime: Vec<Vec<f64>>,
}

/// Occupied 27-neighborhoods of one level, CSR layout. Entry data carries
/// the offset index for weight lookup and the squared spatial distance.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub starts: Vec<usize>,
    pub neighbor: Vec<u32>,
    pub kindex: Vec<u8>,
    pub dist2: Vec<u8>,
}

impl Neighborhood {
    /// Builds the occupied 27-neighborhood table for `nodes` (sorted Morton
    /// codes at a level with `level_bits` bits per axis). Self is included.
    pub fn build(nodes: &[u64], level_bits: u8) -> Self {
        let side = 1i64 << level_bits;
        let mut starts = Vec::with_capacity(nodes.len() + 1);
        let mut neighbor = Vec::new();
        let mut kindex = Vec::new();
        let mut dist2 = Vec::new();
        starts.push(0);
        for &code in nodes {
            let (x, y, z) = morton::decode(code);
            for kx in -1i64..=1 {
                for ky in -1i64..=1 {
                    for kz in -1i64..=1 {
                        // neighbor position n_j = n_i - k so that k = n_i - n_j
                        let nx = x as i64 - kx;
                        let ny = y as i64 - ky;
                        let nz = z as i64 - kz;
                        if nx < 0 || ny < 0 || nz < 0 || nx >= side || ny >= side || nz >= side {
                            continue;
                        }
                        let ncode = morton::encode(nx as u32, ny as u32, nz as u32);
                        if let Ok(j) = nodes.binary_search(&ncode) {
                            neighbor.push(j as u32);
                            kindex.push(((kx + 1) * 9 + (ky + 1) * 3 + (kz + 1)) as u8);
                            dist2.push((kx * kx + ky * ky + kz * kz) as u8);
                        }
                    }
                }
            }
            starts.push(neighbor.len());
        }
        Neighborhood {
            starts,
            neighbor,
            kindex,
            dist2,
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Upsamples a level-`i` field to level `i+1` through the synthesis kernel:
/// every child receives `w(d) * parent`.
pub fn upsample(
    plan: &TransformPlan,
    level_index: usize,
    f_coarse: &[f64],
    synthesis: &AKernel,
    channels: usize,
) -> Result<Vec<f64>> {
    let h = &plan.hierarchy;
    if f_coarse.len() != h.node_count(level_index) * channels {
        return Err(Error::Shape(format!(
            "coarse field has {} entries, expected {}",
            f_coarse.len(),
            h.node_count(level_index) * channels
        )));
    }
    let mut out = vec![0.0; h.node_count(level_index + 1) * channels];
    for block in &h.blocks[level_index] {
        let parent = &f_coarse[block.parent * channels..(block.parent + 1) * channels];
        for j in block.child_start..block.child_end {
            let w = synthesis.0[h.octant_of(level_index + 1, j)];
            for c in 0..channels {
                out[j * channels + c] = w * parent[c];
            }
        }
    }
    Ok(out)
}

/// Locally linear prediction: normalized 27-neighborhood combination of the
/// upsampled field. A node whose masked degree vanishes falls back to its
/// own upsampled value when `fallback` is set, else errors.
pub fn predict_linear(
    upsampled: &[f64],
    neigh: &Neighborhood,
    weights: &[f64],
    channels: usize,
    level: u8,
    fallback: bool,
) -> Result<Vec<f64>> {
    debug_assert_eq!(weights.len(), 27);
    let n = neigh.len();
    if upsampled.len() != n * channels {
        return Err(Error::Shape(format!(
            "upsampled field has {} entries, expected {}",
            upsampled.len(),
            n * channels
        )));
    }
    let mut out = vec![0.0; upsampled.len()];
    for i in 0..n {
        let range = neigh.starts[i]..neigh.starts[i + 1];
        let mut degree = 0.0;
        let mut abs_degree = 0.0;
        for e in range.clone() {
            let w = weights[neigh.kindex[e] as usize];
            degree += w;
            abs_degree += w.abs();
        }
        if degree.abs() <= 1e-12 * abs_degree.max(1e-300) {
            if !fallback {
                return Err(Error::ZeroDegree { level, node: i });
            }
            out[i * channels..(i + 1) * channels]
                .copy_from_slice(&upsampled[i * channels..(i + 1) * channels]);
            continue;
        }
        for c in 0..channels {
            let mut acc = 0.0;
            for e in range.clone() {
                let w = weights[neigh.kindex[e] as usize];
                acc += w * upsampled[neigh.neighbor[e] as usize * channels + c];
            }
            out[i * channels + c] = acc / degree;
        }
    }
    Ok(out)
}

/// Inverse-distance baseline: each level-`(i+1)` node is predicted from the
/// coarser-level nodes whose doubled offset lies in the support
/// `{0,1}^3 + {-1,0,1}^3`, weighted by `1 / ||2n + 1 - (m + 1/2)||`.
/// Returns the prediction and the count of empty-support fallbacks (the
/// node's own parent is always in the support, so the count stays zero for
/// well-formed hierarchies).
pub fn predict_gpcc(
    plan: &TransformPlan,
    level_index: usize,
    f_coarse: &[f64],
    channels: usize,
) -> Result<(Vec<f64>, usize)> {
    let h = &plan.hierarchy;
    if f_coarse.len() != h.node_count(level_index) * channels {
        return Err(Error::Shape(format!(
            "coarse field has {} entries, expected {}",
            f_coarse.len(),
            h.node_count(level_index) * channels
        )));
    }
    let parents = &h.nodes[level_index];
    let children = &h.nodes[level_index + 1];
    let mut out = vec![0.0; children.len() * channels];
    let mut fallbacks = 0usize;
    for (ci, &code) in children.iter().enumerate() {
        let (mx, my, mz) = morton::decode(code);
        let m = [mx as i64, my as i64, mz as i64];
        let mut total_w = 0.0;
        let mut acc = vec![0.0; channels];
        for pick in 0..8u32 {
            let mut n = [0i64; 3];
            let mut ok = true;
            for (axis, nc) in n.iter_mut().enumerate() {
                let base = m[axis] >> 1;
                let alt = if m[axis] & 1 == 1 { base + 1 } else { base - 1 };
                *nc = if pick >> axis & 1 == 0 { base } else { alt };
                if *nc < 0 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let pcode = morton::encode(n[0] as u32, n[1] as u32, n[2] as u32);
            let Ok(pi) = parents.binary_search(&pcode) else {
                continue;
            };
            let mut d2 = 0.0;
            for axis in 0..3 {
                let d = (2 * n[axis] + 1) as f64 - (m[axis] as f64 + 0.5);
                d2 += d * d;
            }
            let w = 1.0 / d2.sqrt();
            total_w += w;
            for c in 0..channels {
                acc[c] += w * f_coarse[pi * channels + c];
            }
        }
        if total_w > 0.0 {
            for c in 0..channels {
                out[ci * channels + c] = acc[c] / total_w;
            }
        } else {
            // copy own parent's value
            fallbacks += 1;
            let pi = parents.binary_search(&(code >> 3)).map_err(|_| {
                Error::Shape("child without parent in hierarchy".into())
            })?;
            for c in 0..channels {
                out[ci * channels + c] = f_coarse[pi * channels + c];
            }
        }
    }
    Ok((out, fallbacks))
}

/// Bilateral weights over an occupied 27-neighborhood: spatial Gaussian
/// times a range Gaussian on the guide signal (one scalar per node).
pub fn bilateral_weights(
    neigh: &Neighborhood,
    guide: &[f64],
    sigma_x: f64,
    sigma_y: f64,
) -> Vec<f64> {
    let inv2sx = 0.5 / (sigma_x * sigma_x);
    let inv2sy = 0.5 / (sigma_y * sigma_y);
    let mut w = Vec::with_capacity(neigh.neighbor.len());
    for i in 0..neigh.len() {
        for e in neigh.starts[i]..neigh.starts[i + 1] {
            let dg = guide[i] - guide[neigh.neighbor[e] as usize];
            let ex = -(neigh.dist2[e] as f64) * inv2sx - dg * dg * inv2sy;
            w.push(ex.exp());
        }
    }
    w
}

/// Polynomial of bilateral filter: `r_0 * prod_k [(1-r_k) I + r_k D^-1 W]`
/// applied to the upsampled field, with the weight graph computed once from
/// the guide and held fixed through the cascade.
pub fn predict_pbf(
    upsampled: &[f64],
    neigh: &Neighborhood,
    weights: &[f64],
    params: &PbfParams,
    channels: usize,
) -> Result<Vec<f64>> {
    params.validate()?;
    let n = neigh.len();
    if upsampled.len() != n * channels {
        return Err(Error::Shape(format!(
            "upsampled field has {} entries, expected {}",
            upsampled.len(),
            n * channels
        )));
    }
    let mut degree = vec![0.0; n];
    for i in 0..n {
        for e in neigh.starts[i]..neigh.starts[i + 1] {
            degree[i] += weights[e];
        }
    }
    let mut x = upsampled.to_vec();
    let mut filtered = vec![0.0; x.len()];
    for &rk in &params.r[1..] {
        if rk == 0.0 {
            continue;
        }
        for i in 0..n {
            let row = &mut filtered[i * channels..(i + 1) * channels];
            row.fill(0.0);
            for e in neigh.starts[i]..neigh.starts[i + 1] {
                let w = weights[e];
                let src = neigh.neighbor[e] as usize * channels;
                for (c, acc) in row.iter_mut().enumerate() {
                    *acc += w * x[src + c];
                }
            }
            for v in row.iter_mut() {
                *v /= degree[i];
            }
        }
        for (xv, fv) in x.iter_mut().zip(filtered.iter()) {
            *xv = (1.0 - rk) * *xv + rk * fv;
        }
    }
    for v in &mut x {
        *v *= params.r[0];
    }
    Ok(x)
}

/// What the input of [`constrained_projection`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    /// Input is a predicted level-`(i+1)` field (or a field difference);
    /// project it directly.
    FromPrediction,
    /// Input is the level-`i` low-pass field; project its kernel upsampling.
    /// Zero for tied kernels, nonzero leakage when synthesis differs.
    FromLowpass,
}

/// Projects a field onto the high-pass basis of one level, yielding the
/// predicted coefficients `G'` (block-major, channel-interleaved):
/// `G' = psi_gram^{-1} zmat^T diag(g) field` per block.
pub fn constrained_projection(
    plan: &TransformPlan,
    level_index: usize,
    input: &[f64],
    mode: ProjectionMode,
    synthesis: &AKernel,
    channels: usize,
) -> Result<Vec<f64>> {
    let field = match mode {
        ProjectionMode::FromPrediction => input.to_vec(),
        ProjectionMode::FromLowpass => upsample(plan, level_index, input, synthesis, channels)?,
    };
    crate::transform::analyze_highpass(plan, level_index, &field, channels)
}

/// `G'' = G* - G'`.
pub fn residual(g_star: &[f64], g_prime: &[f64]) -> Result<Vec<f64>> {
    if g_star.len() != g_prime.len() {
        return Err(Error::Shape(format!(
            "residual length mismatch: {} vs {}",
            g_star.len(),
            g_prime.len()
        )));
    }
    Ok(g_star.iter().zip(g_prime).map(|(a, b)| a - b).collect())
}

/// Open-loop prediction outputs for a whole pyramid (no quantization):
/// `G'` from the exact low-pass levels and the residual against `G*`.
pub fn open_loop_outputs(
    plan: &TransformPlan,
    params: &crate::coding::params::ModelParams,
    attributes: &[f64],
    channels: usize,
) -> Result<PredictionOutputs> {
    let lowpass = crate::transform::analyze_lowpass(plan, attributes, channels)?;
    let mut g_prime = Vec::new();
    let mut g_dprime = Vec::new();
    for i in 0..plan.level_count() - 1 {
        let g_star = crate::transform::analyze_highpass(plan, i, &lowpass.normalized[i + 1], channels)?;
        let predicted = predict_field(
            plan,
            i,
            &lowpass.normalized[i],
            params,
            channels,
        )?;
        let gp = match predicted {
            Some(field) => {
                let delta = field_minus_upsample(plan, i, &field, &lowpass.normalized[i], params, channels)?;
                crate::transform::analyze_highpass(plan, i, &delta, channels)?
            }
            None => vec![0.0; g_star.len()],
        };
        g_dprime.push(residual(&g_star, &gp)?);
        g_prime.push(gp);
    }
    Ok(PredictionOutputs { g_prime, g_dprime })
}

/// Runs the configured predictor for one level, returning the predicted
/// level-`(i+1)` field, or `None` for the trivial predictor.
pub fn predict_field(
    plan: &TransformPlan,
    level_index: usize,
    f_coarse: &[f64],
    params: &crate::coding::params::ModelParams,
    channels: usize,
) -> Result<Option<Vec<f64>>> {
    use crate::coding::params::PredictorConfig;
    let synthesis = params.synthesis_kernel(level_index);
    match &params.predictor {
        PredictorConfig::None => Ok(None),
        PredictorConfig::Linear(p) => {
            let u = upsample(plan, level_index, f_coarse, &synthesis, channels)?;
            let neigh = Neighborhood::build(
                &plan.hierarchy.nodes[level_index + 1],
                plan.hierarchy.root_level + level_index as u8 + 1,
            );
            let w = p.level_weights(level_index);
            predict_linear(
                &u,
                &neigh,
                w,
                channels,
                plan.hierarchy.root_level + level_index as u8 + 1,
                true,
            )
            .map(Some)
        }
        PredictorConfig::Gpcc => {
            let (f, _) = predict_gpcc(plan, level_index, f_coarse, channels)?;
            Ok(Some(f))
        }
        PredictorConfig::Pbf(p) => {
            let u = upsample(plan, level_index, f_coarse, &synthesis, channels)?;
            let neigh = Neighborhood::build(
                &plan.hierarchy.nodes[level_index + 1],
                plan.hierarchy.root_level + level_index as u8 + 1,
            );
            // Range kernel driven by channel 0 of the upsampled field.
            let guide: Vec<f64> = (0..neigh.len()).map(|i| u[i * channels]).collect();
            let w = bilateral_weights(&neigh, &guide, p.sigma_x, p.sigma_y);
            predict_pbf(&u, &neigh, &w, p, channels).map(Some)
        }
    }
}

/// `field - upsample(f_coarse)` when kernels are untied, `field` as-is when
/// tied (the upsampled term projects to zero).
pub fn field_minus_upsample(
    plan: &TransformPlan,
    level_index: usize,
    field: &[f64],
    f_coarse: &[f64],
    params: &crate::coding::params::ModelParams,
    channels: usize,
) -> Result<Vec<f64>> {
    if params.tied_kernels {
        return Ok(field.to_vec());
    }
    let u = upsample(
        plan,
        level_index,
        f_coarse,
        &params.synthesis_kernel(level_index),
        channels,
    )?;
    Ok(field.iter().zip(&u).map(|(f, u)| f - u).collect())
}

/// Norm of high-pass coefficients in the basis metric:
/// `sqrt(sum_blocks v' psi_gram v)` for one channel's coefficients.
pub fn highpass_norm(plan: &TransformPlan, level_index: usize, coeffs: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut offset = 0;
    for basis in plan.bases[level_index].iter().flatten() {
        let cols = basis.coeff_count();
        let v = &coeffs[offset..offset + cols];
        let pv = linalg::mat_vec(&basis.psi_gram, v, cols);
        acc += v.iter().zip(&pv).map(|(a, b)| a * b).sum::<f64>();
        offset += cols;
    }
    acc.sqrt()
}
