//! Small dense symmetric matrix helpers for per-block bases.
//!
//! Blocks have at most 8 children, so every matrix here is at most 7x7 and
//! stored row-major in a flat slice.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// How `M^{-1/2}` is evaluated for a symmetric positive-definite matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InvSqrtMode<'a> {
    /// Eigendecomposition; exact to machine precision.
    Exact,
    /// Polynomial in `(sM - I)` after Gershgorin scaling, with the given
    /// series coefficients (index = power). Smooth in the matrix entries.
    Taylor { coeffs: &'a [f64] },
}

/// Coefficients of the order-`p` series of `x^{-1/2}` about `x = 1`:
/// `c_k = binom(-1/2, k)`.
pub fn taylor_inv_sqrt_coeffs(order: usize) -> Vec<f64> {
    let mut coeffs = Vec::with_capacity(order + 1);
    let mut c = 1.0;
    coeffs.push(c);
    for k in 1..=order {
        c *= -(2.0 * k as f64 - 1.0) / (2.0 * k as f64);
        coeffs.push(c);
    }
    coeffs
}

/// Gershgorin eigenvalue bounds of a symmetric matrix.
pub fn gershgorin_bounds(m: &[f64], dim: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..dim {
        let mut radius = 0.0;
        for j in 0..dim {
            if i != j {
                radius += m[i * dim + j].abs();
            }
        }
        lo = lo.min(m[i * dim + i] - radius);
        hi = hi.max(m[i * dim + i] + radius);
    }
    (lo, hi)
}

/// Symmetric inverse square root of an SPD matrix (row-major, `dim x dim`).
///
/// Exact mode rejects matrices whose smallest eigenvalue is below
/// `1e-12 x` the largest. Taylor mode scales by `2 / (lo + hi)` from the
/// Gershgorin bounds (the low bound floored at `1e-6 x` the high bound so
/// the polynomial argument stays contractive) and evaluates by Horner.
pub fn inv_sqrt_spd(m: &[f64], dim: usize, mode: InvSqrtMode) -> Result<Vec<f64>> {
    assert_eq!(m.len(), dim * dim);
    match mode {
        InvSqrtMode::Exact => {
            let mat = DMatrix::from_row_slice(dim, dim, m);
            let eig = mat.symmetric_eigen();
            let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
            let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
            if !(max > 0.0) || min <= 1e-12 * max {
                return Err(Error::Conditioning {
                    level: 0,
                    block: 0,
                    msg: format!("not SPD within tolerance (eigenvalues {min:e}..{max:e})"),
                });
            }
            let inv_sqrt_vals = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
            let q = &eig.eigenvectors;
            let r = q * DMatrix::from_diagonal(&inv_sqrt_vals) * q.transpose();
            Ok(r.transpose().as_slice().to_vec()) // row-major
        }
        InvSqrtMode::Taylor { coeffs } => {
            if coeffs.is_empty() {
                return Err(Error::Parameter("empty Taylor coefficient set".into()));
            }
            let (lo, hi) = gershgorin_bounds(m, dim);
            if !(hi > 0.0) {
                return Err(Error::Conditioning {
                    level: 0,
                    block: 0,
                    msg: "nonpositive Gershgorin upper bound".into(),
                });
            }
            let lo = lo.max(1e-6 * hi);
            let scale = 2.0 / (lo + hi);
            // x = s*m - I
            let mut x = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    x[i * dim + j] = scale * m[i * dim + j] - if i == j { 1.0 } else { 0.0 };
                }
            }
            // Horner over powers of x.
            let mut r = vec![0.0; dim * dim];
            for i in 0..dim {
                r[i * dim + i] = coeffs[coeffs.len() - 1];
            }
            for p in (0..coeffs.len() - 1).rev() {
                let mut next = mat_mul(&x, &r, dim);
                for i in 0..dim {
                    next[i * dim + i] += coeffs[p];
                }
                r = next;
            }
            let root_scale = scale.sqrt();
            for v in &mut r {
                *v *= root_scale;
            }
            Ok(r)
        }
    }
}

pub fn mat_mul(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for k in 0..dim {
            let aik = a[i * dim + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..dim {
                out[i * dim + j] += aik * b[k * dim + j];
            }
        }
    }
    out
}

pub fn mat_vec(a: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim {
        let mut acc = 0.0;
        for j in 0..dim {
            acc += a[i * dim + j] * v[j];
        }
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(dim: usize, seed: u64, cond: f64) -> Vec<f64> {
        // Q diag Q^T with Q from QR of a random matrix.
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        let a = DMatrix::from_fn(dim, dim, |_, _| next());
        let q = a.qr().q();
        let eigs: Vec<f64> = (0..dim)
            .map(|i| {
                if dim == 1 {
                    1.0
                } else {
                    cond.powf(i as f64 / (dim - 1) as f64)
                }
            })
            .collect();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs));
        let m = &q * d * q.transpose();
        m.transpose().as_slice().to_vec()
    }

    fn check_rmr(m: &[f64], r: &[f64], dim: usize, tol: f64) {
        let rm = mat_mul(r, m, dim);
        let rmr = mat_mul(&rm, r, dim);
        for i in 0..dim {
            for j in 0..dim {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (rmr[i * dim + j] - expect).abs() < tol,
                    "R M R != I at ({i},{j}): {}",
                    rmr[i * dim + j]
                );
            }
        }
    }

    #[test]
    fn identity_and_scalar() {
        let r = inv_sqrt_spd(&[1.0, 0.0, 0.0, 1.0], 2, InvSqrtMode::Exact).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-14 && r[1].abs() < 1e-14);
        let r = inv_sqrt_spd(&[4.0], 1, InvSqrtMode::Exact).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn exact_random_spd_up_to_7() {
        for dim in 1..=7 {
            for seed in 0..20 {
                let m = random_spd(dim, seed * 31 + dim as u64, 1e6);
                let r = inv_sqrt_spd(&m, dim, InvSqrtMode::Exact).unwrap();
                check_rmr(&m, &r, dim, 1e-9);
                // symmetry
                for i in 0..dim {
                    for j in 0..dim {
                        assert!((r[i * dim + j] - r[j * dim + i]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn taylor_converges_on_well_conditioned() {
        // contraction factor is (cond-1)/(cond+1) per term
        let coeffs = taylor_inv_sqrt_coeffs(50);
        for dim in 1..=7 {
            let m = random_spd(dim, 17 + dim as u64, 4.0);
            let r = inv_sqrt_spd(&m, dim, InvSqrtMode::Taylor { coeffs: &coeffs }).unwrap();
            check_rmr(&m, &r, dim, 1e-8);
        }
        let m = random_spd(5, 99, 10.0);
        let r = inv_sqrt_spd(&m, 5, InvSqrtMode::Taylor { coeffs: &coeffs }).unwrap();
        check_rmr(&m, &r, 5, 1e-3);
    }

    #[test]
    fn non_spd_rejected() {
        let m = [1.0, 0.0, 0.0, -2.0];
        assert!(inv_sqrt_spd(&m, 2, InvSqrtMode::Exact).is_err());
    }
}
