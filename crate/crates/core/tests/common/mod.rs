//! Shared test support: dense normal-equation oracle, classical
//! Givens-rotation transform reference, and cloud generators.
//!
//! Everything here is built from first principles on explicit matrices,
//! independent of the per-block pipeline it is used to check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcac::cloud_io::VoxelizedCloud;
use pcac::hierarchy::{AKernel, LevelHierarchy};

/// Random cloud with attributes uniform in `[lo, hi]`.
pub fn random_cloud(
    n: usize,
    depth: u8,
    channels: usize,
    seed: u64,
    lo: f64,
    hi: f64,
) -> VoxelizedCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 1u32 << depth;
    let points = (0..n)
        .map(|_| {
            let p = [
                rng.random_range(0..side),
                rng.random_range(0..side),
                rng.random_range(0..side),
            ];
            let attrs = (0..channels).map(|_| rng.random_range(lo..hi)).collect();
            (p, attrs)
        })
        .collect();
    VoxelizedCloud::from_points(depth, points, channels).unwrap()
}

/// Surface-like cloud with piecewise-constant colors and mild noise; the
/// sharp color borders are what a signal-adaptive predictor should exploit.
pub fn edgy_surface_cloud(depth: u8, density: usize, seed: u64) -> VoxelizedCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 1u32 << depth;
    let sidef = side as f64;
    let palette: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            [
                rng.random_range(20.0..235.0),
                rng.random_range(20.0..235.0),
                rng.random_range(20.0..235.0),
            ]
        })
        .collect();
    let fx = rng.random_range(0.5..2.0);
    let fy = rng.random_range(0.5..2.0);
    let cut_x = rng.random_range(0.3..0.7);
    let cut_y = rng.random_range(0.3..0.7);
    let mut points = Vec::new();
    for _ in 0..density {
        let x = rng.random_range(0..side);
        let y = rng.random_range(0..side);
        let u = x as f64 / sidef;
        let v = y as f64 / sidef;
        let zf = 0.5 + 0.25 * (std::f64::consts::TAU * fx * u).sin()
            + 0.2 * (std::f64::consts::TAU * fy * v).cos();
        let z = ((zf * sidef) as i64).clamp(0, side as i64 - 1) as u32;
        let region = (u > cut_x) as usize * 2 + (v > cut_y) as usize;
        let base = palette[region];
        let attrs: Vec<f64> = base
            .iter()
            .map(|c| (c + rng.random_range(-6.0..6.0)).clamp(0.0, 255.0))
            .collect();
        points.push(([x, y, z], attrs));
    }
    VoxelizedCloud::from_points(depth, points, 3).unwrap()
}

/// Explicitly assembled basis matrices for every level, from the definition
/// `Phi_L = I`, `Phi_l = Phi_{l+1} A_l^T` with the sparse kernel matrix `A`.
pub struct DenseOracle {
    /// `a[i]`: the `N_l x N_{l+1}` kernel matrix of level transition `i`.
    pub a: Vec<DMatrix<f64>>,
    /// `phi[i]`: the `N_pts x N_l` basis-sample matrix of level `i`.
    pub phi: Vec<DMatrix<f64>>,
    /// Gram matrices `phi^T phi` per level.
    pub gram: Vec<DMatrix<f64>>,
}

impl DenseOracle {
    pub fn build(h: &LevelHierarchy, kernels: &[AKernel]) -> Self {
        let levels = h.level_count() - 1;
        let n_pts = h.point_count();
        let mut a = Vec::with_capacity(levels);
        for li in 0..levels {
            let mut m = DMatrix::zeros(h.node_count(li), h.node_count(li + 1));
            for block in &h.blocks[li] {
                for j in block.child_start..block.child_end {
                    m[(block.parent, j)] = kernels[li].0[h.octant_of(li + 1, j)];
                }
            }
            a.push(m);
        }
        let mut phi = vec![DMatrix::zeros(0, 0); levels + 1];
        phi[levels] = DMatrix::identity(n_pts, n_pts);
        for li in (0..levels).rev() {
            phi[li] = &phi[li + 1] * a[li].transpose();
        }
        let gram = phi.iter().map(|p| p.transpose() * p).collect();
        DenseOracle { a, phi, gram }
    }

    /// Low-pass coefficients of one channel at every level via the normal
    /// equation `F* = (Phi^T Phi)^{-1} Phi^T y`.
    pub fn lowpass(&self, y: &DVector<f64>) -> Vec<DVector<f64>> {
        self.phi
            .iter()
            .zip(&self.gram)
            .map(|(phi, gram)| {
                gram.clone()
                    .lu()
                    .solve(&(phi.transpose() * y))
                    .expect("gram solvable")
            })
            .collect()
    }

    /// Selection matrix complement basis: keeps all children except the
    /// first of each block.
    pub fn zmat(&self, h: &LevelHierarchy, li: usize) -> DMatrix<f64> {
        let n_next = h.node_count(li + 1);
        let kept: Vec<usize> = h.blocks[li]
            .iter()
            .flat_map(|b| b.child_start + 1..b.child_end)
            .collect();
        let mut selection = DMatrix::zeros(kept.len(), n_next);
        for (row, &col) in kept.iter().enumerate() {
            selection[(row, col)] = 1.0;
        }
        // Z^T = I_b^T - A^T (Phi_l^T Phi_l)^{-1} (Phi_l^T Phi_{l+1} I_b^T)
        let cross = self.phi[li].transpose() * &self.phi[li + 1] * selection.transpose();
        let solved = self.gram[li].clone().lu().solve(&cross).expect("solvable");
        selection.transpose() - self.a[li].transpose() * solved
    }

    pub fn psi(&self, h: &LevelHierarchy, li: usize) -> DMatrix<f64> {
        &self.phi[li + 1] * self.zmat(h, li)
    }

    /// High-pass coefficients via the projection of the residual function
    /// samples: `G* = (Psi^T Psi)^{-1} Psi^T (phi_{l+1} F*_{l+1} - phi_l F*_l)`.
    pub fn highpass_residual_route(
        &self,
        h: &LevelHierarchy,
        li: usize,
        lowpass: &[DVector<f64>],
    ) -> DVector<f64> {
        let psi = self.psi(h, li);
        if psi.ncols() == 0 {
            return DVector::zeros(0);
        }
        let residual_fn = &self.phi[li + 1] * &lowpass[li + 1] - &self.phi[li] * &lowpass[li];
        (psi.transpose() * &psi)
            .lu()
            .solve(&(psi.transpose() * residual_fn))
            .expect("psi gram solvable")
    }

    /// High-pass coefficients via the finer low-pass vector alone:
    /// `G* = (Z Phi^T Phi Z^T)^{-1} Z (Phi^T Phi) F*_{l+1}`.
    pub fn highpass_direct_route(
        &self,
        h: &LevelHierarchy,
        li: usize,
        f_next: &DVector<f64>,
    ) -> DVector<f64> {
        let z = self.zmat(h, li);
        if z.ncols() == 0 {
            return DVector::zeros(0);
        }
        let psi_gram = z.transpose() * &self.gram[li + 1] * &z;
        psi_gram
            .lu()
            .solve(&(z.transpose() * &self.gram[li + 1] * f_next))
            .expect("psi gram solvable")
    }

    /// Symmetric matrix square root via eigendecomposition.
    pub fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
        match m.nrows() {
            0 => m.clone(),
            1 => DMatrix::from_element(1, 1, m[(0, 0)].sqrt()),
            _ => {
                let eig = m.clone().symmetric_eigen();
                let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
            }
        }
    }

    /// Orthonormalized high-pass coefficients `(Psi^T Psi)^{1/2} G*`.
    pub fn orthonormalize_highpass(
        &self,
        h: &LevelHierarchy,
        li: usize,
        g_star: &DVector<f64>,
    ) -> DVector<f64> {
        let psi = self.psi(h, li);
        Self::sqrtm(&(psi.transpose() * psi)) * g_star
    }

    /// Orthonormalized root coefficients `(Phi^T Phi)^{1/2} F*`.
    pub fn orthonormalize_root(&self, f_root: &DVector<f64>) -> DVector<f64> {
        Self::sqrtm(&self.gram[0]) * f_root
    }
}

/// Classical region-adaptive transform reference: per-block Givens
/// rotations merging along z, then y, then x, with weights equal to
/// accumulated point counts. Returns the root (DC) coefficients and the
/// per-block high-pass (AC) energy at every level transition.
pub struct GivensReference {
    pub dc: Vec<f64>,
    /// `block_ac_energy[li][block]`, levels ordered root first.
    pub block_ac_energy: Vec<Vec<f64>>,
}

pub fn givens_reference(h: &LevelHierarchy, attrs: &[f64]) -> GivensReference {
    let levels = h.level_count() - 1;
    let mut weights: Vec<f64> = vec![1.0; h.point_count()];
    let mut coeffs: Vec<f64> = attrs.to_vec();
    let mut block_ac_energy = vec![Vec::new(); levels];
    for li in (0..levels).rev() {
        let mut parent_w = Vec::with_capacity(h.node_count(li));
        let mut parent_c = Vec::with_capacity(h.node_count(li));
        for block in &h.blocks[li] {
            // slot per octant
            let mut slot: [Option<(f64, f64)>; 8] = [None; 8];
            for j in block.child_start..block.child_end {
                slot[h.octant_of(li + 1, j)] = Some((weights[j], coeffs[j]));
            }
            let mut energy = 0.0;
            // merge along z (bit 0), then y (bit 1), then x (bit 2)
            for axis_bit in [1usize, 2, 4] {
                let mut merged: [Option<(f64, f64)>; 8] = [None; 8];
                for d in 0..8 {
                    if d & axis_bit != 0 {
                        continue;
                    }
                    let lo = slot[d];
                    let hi = slot[d | axis_bit];
                    merged[d] = match (lo, hi) {
                        (None, None) => None,
                        (Some(s), None) | (None, Some(s)) => Some(s),
                        (Some((w1, c1)), Some((w2, c2))) => {
                            let w = w1 + w2;
                            let (s1, s2) = (w1.sqrt(), w2.sqrt());
                            let dc = (s1 * c1 + s2 * c2) / w.sqrt();
                            let ac = (-s2 * c1 + s1 * c2) / w.sqrt();
                            energy += ac * ac;
                            Some((w, dc))
                        }
                    };
                }
                slot = merged;
            }
            let (w, c) = slot[0].expect("block reduces to one node");
            parent_w.push(w);
            parent_c.push(c);
            block_ac_energy[li].push(energy);
        }
        weights = parent_w;
        coeffs = parent_c;
    }
    GivensReference {
        dc: coeffs,
        block_ac_energy,
    }
}

/// Per-block sum of squared high-pass coefficients of one channel from a
/// block-major coefficient vector.
pub fn per_block_energy(h: &LevelHierarchy, li: usize, coeffs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.blocks[li].len());
    let mut offset = 0;
    for block in &h.blocks[li] {
        let m = block.len();
        if m < 2 {
            out.push(0.0);
            continue;
        }
        let e: f64 = coeffs[offset..offset + m - 1].iter().map(|v| v * v).sum();
        offset += m - 1;
        out.push(e);
    }
    out
}
