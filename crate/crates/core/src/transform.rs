//! Critically sampled per-block analysis and synthesis.
//!
//! For each block with `m >= 2` occupied children the analysis kernel row
//! `a` and child Gram weights `g` determine a high-pass basis of `m - 1`
//! columns, each `e_k - a * (a_k g_k) / g_parent` for a kept child `k`
//! (the first child in Morton order is dropped). The basis is orthogonal
//! to the low-pass direction in the `diag(g)` inner product, and the total
//! coefficient count per channel equals the input point count exactly.

use crate::error::{Error, Result};
use crate::hierarchy::{gram_recursion, AKernel, GramDiagonal, LevelHierarchy};
use crate::linalg::{self, InvSqrtMode};

/// Per-block high-pass basis data. All matrices are row-major.
#[derive(Debug, Clone)]
pub struct BlockBasis {
    /// Occupied child count, `2..=8`.
    pub m: usize,
    /// Child Gram weights at the finer level.
    pub g: Vec<f64>,
    /// Analysis kernel row `a_j = w(d_j)`.
    pub a: Vec<f64>,
    /// `sum_j a_j^2 g_j`, the parent Gram weight.
    pub g_parent: f64,
    /// Index of the dropped child within the block (first in Morton order).
    pub dropped: usize,
    /// `m x (m-1)` high-pass basis `Z^T` restricted to the block.
    pub zmat: Vec<f64>,
    /// `(m-1) x (m-1)` Gram matrix `Z^T' diag(g) Z^T` of the basis.
    pub psi_gram: Vec<f64>,
    /// Exact symmetric inverse square root of `psi_gram`.
    pub psi_isqrt: Vec<f64>,
}

impl BlockBasis {
    /// High-pass coefficient count contributed by this block.
    pub fn coeff_count(&self) -> usize {
        self.m - 1
    }

    /// `t = zmat^T (g .* field)` for one channel of block values.
    pub fn raw_inner(&self, field: &[f64], out: &mut [f64]) {
        debug_assert_eq!(field.len(), self.m);
        debug_assert_eq!(out.len(), self.m - 1);
        for k in 0..self.m - 1 {
            let mut acc = 0.0;
            for j in 0..self.m {
                acc += self.zmat[j * (self.m - 1) + k] * self.g[j] * field[j];
            }
            out[k] = acc;
        }
    }

    /// Inverse square root of `psi_gram` under the requested mode.
    pub fn isqrt(&self, mode: InvSqrtMode) -> Result<std::borrow::Cow<'_, [f64]>> {
        match mode {
            InvSqrtMode::Exact => Ok(std::borrow::Cow::Borrowed(&self.psi_isqrt)),
            taylor => Ok(std::borrow::Cow::Owned(linalg::inv_sqrt_spd(
                &self.psi_gram,
                self.m - 1,
                taylor,
            )?)),
        }
    }
}

/// Builds the high-pass basis of one block from its child Gram weights and
/// analysis kernel row. Blocks with fewer than two children have no basis.
pub fn build_block_basis(g_children: &[f64], a_row: &[f64]) -> Result<BlockBasis> {
    let m = g_children.len();
    if m < 2 {
        return Err(Error::Parameter(format!(
            "block basis requires m >= 2 children, got {m}"
        )));
    }
    if a_row.len() != m {
        return Err(Error::Shape(format!(
            "kernel row has {} entries for {m} children",
            a_row.len()
        )));
    }
    if g_children.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::Parameter("nonpositive child Gram weight".into()));
    }
    let g_parent: f64 = g_children
        .iter()
        .zip(a_row)
        .map(|(g, a)| a * a * g)
        .sum();
    let cols = m - 1;
    let mut zmat = vec![0.0; m * cols];
    for (col, k) in (1..m).enumerate() {
        let scale = a_row[k] * g_children[k] / g_parent;
        for j in 0..m {
            let e = if j == k { 1.0 } else { 0.0 };
            zmat[j * cols + col] = e - a_row[j] * scale;
        }
    }
    let mut psi_gram = vec![0.0; cols * cols];
    for k in 0..cols {
        for k2 in k..cols {
            let mut acc = 0.0;
            for j in 0..m {
                acc += g_children[j] * zmat[j * cols + k] * zmat[j * cols + k2];
            }
            psi_gram[k * cols + k2] = acc;
            psi_gram[k2 * cols + k] = acc;
        }
    }
    let psi_isqrt = linalg::inv_sqrt_spd(&psi_gram, cols, InvSqrtMode::Exact)?;
    Ok(BlockBasis {
        m,
        g: g_children.to_vec(),
        a: a_row.to_vec(),
        g_parent,
        dropped: 0,
        zmat,
        psi_gram,
        psi_isqrt,
    })
}

/// Geometry- and kernel-derived transform state shared by all channels.
#[derive(Debug, Clone)]
pub struct TransformPlan {
    pub hierarchy: LevelHierarchy,
    pub gram: GramDiagonal,
    pub analysis: Vec<AKernel>,
    /// `bases[i][b]` for level index `i`, `None` for single-child blocks.
    pub bases: Vec<Vec<Option<BlockBasis>>>,
}

impl TransformPlan {
    pub fn new(hierarchy: LevelHierarchy, analysis: Vec<AKernel>) -> Result<Self> {
        let gram = gram_recursion(&hierarchy, &analysis)?;
        let mut bases = Vec::with_capacity(hierarchy.level_count() - 1);
        for i in 0..hierarchy.level_count() - 1 {
            let kernel = &analysis[i].0;
            let child_g = &gram.g[i + 1];
            let mut level = Vec::with_capacity(hierarchy.blocks[i].len());
            for (bi, block) in hierarchy.blocks[i].iter().enumerate() {
                if block.len() < 2 {
                    level.push(None);
                    continue;
                }
                let g: Vec<f64> = (block.child_start..block.child_end)
                    .map(|j| child_g[j])
                    .collect();
                let a: Vec<f64> = (block.child_start..block.child_end)
                    .map(|j| kernel[hierarchy.octant_of(i + 1, j)])
                    .collect();
                let basis = build_block_basis(&g, &a).map_err(|e| match e {
                    Error::Conditioning { msg, .. } => Error::Conditioning {
                        level: hierarchy.root_level + i as u8,
                        block: bi,
                        msg,
                    },
                    other => other,
                })?;
                level.push(Some(basis));
            }
            bases.push(level);
        }
        Ok(TransformPlan {
            hierarchy,
            gram,
            analysis,
            bases,
        })
    }

    pub fn level_count(&self) -> usize {
        self.hierarchy.level_count()
    }

    /// Root-level node count.
    pub fn root_count(&self) -> usize {
        self.hierarchy.node_count(0)
    }
}

/// Per-level low-pass coefficients, index 0 = root level.
#[derive(Debug, Clone)]
pub struct LowpassLevels {
    /// `F~_l`: kernel-weighted sums.
    pub unnormalized: Vec<Vec<f64>>,
    /// `F*_l = F~_l / g_l`.
    pub normalized: Vec<Vec<f64>>,
}

/// Runs the low-pass recursion from the leaves to the root for all channels.
/// `attributes` is node-major, channel-interleaved, length `N_L * channels`.
pub fn analyze_lowpass(
    plan: &TransformPlan,
    attributes: &[f64],
    channels: usize,
) -> Result<LowpassLevels> {
    let h = &plan.hierarchy;
    let n_levels = h.level_count();
    if attributes.len() != h.point_count() * channels {
        return Err(Error::Shape(format!(
            "attribute buffer has {} entries, expected {}",
            attributes.len(),
            h.point_count() * channels
        )));
    }
    let mut unnormalized: Vec<Vec<f64>> = vec![Vec::new(); n_levels];
    unnormalized[n_levels - 1] = attributes.to_vec();
    for i in (0..n_levels - 1).rev() {
        let kernel = &plan.analysis[i].0;
        let finer = std::mem::take(&mut unnormalized[i + 1]);
        let mut coarse = vec![0.0; h.node_count(i) * channels];
        for block in &h.blocks[i] {
            let out = &mut coarse[block.parent * channels..(block.parent + 1) * channels];
            for j in block.child_start..block.child_end {
                let w = kernel[h.octant_of(i + 1, j)];
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * finer[j * channels + c];
                }
            }
        }
        unnormalized[i + 1] = finer;
        unnormalized[i] = coarse;
    }
    let normalized = unnormalized
        .iter()
        .enumerate()
        .map(|(i, level)| {
            let g = &plan.gram.g[i];
            level
                .iter()
                .enumerate()
                .map(|(idx, v)| v / g[idx / channels])
                .collect()
        })
        .collect();
    Ok(LowpassLevels {
        unnormalized,
        normalized,
    })
}

/// Projects a level-`(i+1)` field onto the high-pass basis of level index
/// `i`, returning un-normalized `G*` coefficients, block-major and
/// channel-interleaved. This is the normal-equation solve restricted to
/// each block: `G* = psi_gram^{-1} zmat^T diag(g) field`.
pub fn analyze_highpass(
    plan: &TransformPlan,
    level_index: usize,
    field_next: &[f64],
    channels: usize,
) -> Result<Vec<f64>> {
    let h = &plan.hierarchy;
    if field_next.len() != h.node_count(level_index + 1) * channels {
        return Err(Error::Shape(format!(
            "field has {} entries, expected {}",
            field_next.len(),
            h.node_count(level_index + 1) * channels
        )));
    }
    let mut out = vec![0.0; h.highpass_count(level_index) * channels];
    let mut offset = 0;
    let mut t = [0.0f64; 7];
    let mut field = [0.0f64; 8];
    for (block, basis) in h.blocks[level_index].iter().zip(&plan.bases[level_index]) {
        let Some(basis) = basis else { continue };
        let cols = basis.coeff_count();
        for c in 0..channels {
            for (bj, j) in (block.child_start..block.child_end).enumerate() {
                field[bj] = field_next[j * channels + c];
            }
            basis.raw_inner(&field[..basis.m], &mut t[..cols]);
            // psi^{-1} t via the exact inverse square root applied twice.
            let half = linalg::mat_vec(&basis.psi_isqrt, &t[..cols], cols);
            let solved = linalg::mat_vec(&basis.psi_isqrt, &half, cols);
            for k in 0..cols {
                out[(offset + k) * channels + c] = solved[k];
            }
        }
        offset += cols;
    }
    Ok(out)
}

/// Fused projection and orthonormalization of a level-`(i+1)` field:
/// `G-bar = R(psi) zmat^T diag(g) field` per block, where `R` is the inverse
/// square root under `mode`. With the exact mode this equals
/// `psi^{1/2} G*` for the projection `G*` of the field.
pub fn project_ortho(
    plan: &TransformPlan,
    level_index: usize,
    field_next: &[f64],
    channels: usize,
    mode: InvSqrtMode,
) -> Result<Vec<f64>> {
    let h = &plan.hierarchy;
    if field_next.len() != h.node_count(level_index + 1) * channels {
        return Err(Error::Shape(format!(
            "field has {} entries, expected {}",
            field_next.len(),
            h.node_count(level_index + 1) * channels
        )));
    }
    let mut out = vec![0.0; h.highpass_count(level_index) * channels];
    let mut offset = 0;
    let mut t = [0.0f64; 7];
    let mut field = [0.0f64; 8];
    for (block, basis) in h.blocks[level_index].iter().zip(&plan.bases[level_index]) {
        let Some(basis) = basis else { continue };
        let cols = basis.coeff_count();
        let r = basis.isqrt(mode)?;
        for c in 0..channels {
            for (bj, j) in (block.child_start..block.child_end).enumerate() {
                field[bj] = field_next[j * channels + c];
            }
            basis.raw_inner(&field[..basis.m], &mut t[..cols]);
            let bar = linalg::mat_vec(&r, &t[..cols], cols);
            for k in 0..cols {
                out[(offset + k) * channels + c] = bar[k];
            }
        }
        offset += cols;
    }
    Ok(out)
}

/// Applies the per-block inverse square root to a high-pass coefficient
/// vector; with the decoder coefficient set this de-orthonormalizes
/// `G-hat = R(psi) G-bar`.
pub fn apply_block_isqrt(
    plan: &TransformPlan,
    level_index: usize,
    coeffs: &[f64],
    channels: usize,
    mode: InvSqrtMode,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; coeffs.len()];
    let mut offset = 0;
    for basis in plan.bases[level_index].iter().flatten() {
        let cols = basis.coeff_count();
        let r = basis.isqrt(mode)?;
        for c in 0..channels {
            let mut v = [0.0f64; 7];
            for k in 0..cols {
                v[k] = coeffs[(offset + k) * channels + c];
            }
            let dec = linalg::mat_vec(&r, &v[..cols], cols);
            for k in 0..cols {
                out[(offset + k) * channels + c] = dec[k];
            }
        }
        offset += cols;
    }
    Ok(out)
}

/// Orthonormalizes root low-pass coefficients: `F-bar = sqrt(g) .* F*`.
pub fn orthonormalize_root(plan: &TransformPlan, f_root: &[f64], channels: usize) -> Vec<f64> {
    let g = &plan.gram.g[0];
    f_root
        .iter()
        .enumerate()
        .map(|(idx, v)| v * g[idx / channels].sqrt())
        .collect()
}

/// Orthonormalizes high-pass coefficients of one level:
/// `G-bar = psi_gram^{1/2} G*` per block.
pub fn orthonormalize_highpass(
    plan: &TransformPlan,
    level_index: usize,
    g_star: &[f64],
    channels: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; g_star.len()];
    let mut offset = 0;
    for basis in plan.bases[level_index].iter().flatten() {
        let cols = basis.coeff_count();
        // psi^{1/2} = psi_gram * psi^{-1/2}
        let sqrt_psi = linalg::mat_mul(&basis.psi_gram, &basis.psi_isqrt, cols);
        for c in 0..channels {
            let mut v = [0.0f64; 7];
            for k in 0..cols {
                v[k] = g_star[(offset + k) * channels + c];
            }
            let r = linalg::mat_vec(&sqrt_psi, &v[..cols], cols);
            for k in 0..cols {
                out[(offset + k) * channels + c] = r[k];
            }
        }
        offset += cols;
    }
    out
}

/// Reconstructs the level-`(i+1)` field from the coarser field and per-block
/// high-pass coefficients: `F_{l+1} = s .* F_l[parent] + zmat G` per block,
/// with single-child blocks passing the parent through the kernel.
pub fn synthesize_level(
    plan: &TransformPlan,
    level_index: usize,
    f_coarse: &[f64],
    g_coeffs: &[f64],
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
    if g_coeffs.len() != h.highpass_count(level_index) * channels {
        return Err(Error::Shape(format!(
            "high-pass vector has {} entries, expected {}",
            g_coeffs.len(),
            h.highpass_count(level_index) * channels
        )));
    }
    let mut out = vec![0.0; h.node_count(level_index + 1) * channels];
    let mut offset = 0;
    for (block, basis) in h.blocks[level_index].iter().zip(&plan.bases[level_index]) {
        let parent = &f_coarse[block.parent * channels..(block.parent + 1) * channels];
        for (bj, j) in (block.child_start..block.child_end).enumerate() {
            let w = synthesis.0[h.octant_of(level_index + 1, j)];
            let dst = &mut out[j * channels..(j + 1) * channels];
            for c in 0..channels {
                dst[c] = w * parent[c];
            }
            if let Some(basis) = basis {
                let cols = basis.coeff_count();
                for c in 0..channels {
                    let mut acc = 0.0;
                    for k in 0..cols {
                        acc += basis.zmat[bj * cols + k] * g_coeffs[(offset + k) * channels + c];
                    }
                    dst[c] += acc;
                }
            }
        }
        if let Some(basis) = basis {
            offset += basis.coeff_count();
        }
    }
    Ok(out)
}

/// Orthonormalized coefficient pyramid: root low-pass plus one high-pass
/// vector per level. Critically sampled by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPyramid {
    pub channels: usize,
    /// `F-bar` at the root level, node-major, channel-interleaved.
    pub root: Vec<f64>,
    /// `G-bar` per level index (coarse to fine), block-major.
    pub high: Vec<Vec<f64>>,
}

impl CoefficientPyramid {
    /// Total coefficient count per channel.
    pub fn coeff_count(&self) -> usize {
        (self.root.len() + self.high.iter().map(|h| h.len()).sum::<usize>()) / self.channels
    }

    pub fn total_energy(&self) -> f64 {
        let root: f64 = self.root.iter().map(|v| v * v).sum();
        let high: f64 = self
            .high
            .iter()
            .flat_map(|h| h.iter())
            .map(|v| v * v)
            .sum();
        root + high
    }
}

/// Full orthonormalized analysis of an attribute buffer (no prediction):
/// root `F-bar` plus `G-bar` per level.
pub fn analyze(
    plan: &TransformPlan,
    attributes: &[f64],
    channels: usize,
) -> Result<CoefficientPyramid> {
    let lowpass = analyze_lowpass(plan, attributes, channels)?;
    let root = orthonormalize_root(plan, &lowpass.normalized[0], channels);
    let mut high = Vec::with_capacity(plan.level_count() - 1);
    for i in 0..plan.level_count() - 1 {
        let g_star = analyze_highpass(plan, i, &lowpass.normalized[i + 1], channels)?;
        high.push(orthonormalize_highpass(plan, i, &g_star, channels));
    }
    Ok(CoefficientPyramid {
        channels,
        root,
        high,
    })
}
