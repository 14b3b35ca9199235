use nalgebra::DMatrix;

use super::all_finite;
use crate::{Error, Result};

/// Singular values below `DEFAULT_PINV_TOL * sigma_max` are treated as zero.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// Thin singular value decomposition `M = U diag(s) V'` of a small dense
/// matrix, by one-sided Jacobi rotations. Singular values are unsorted.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 80;

impl Svd {
    pub fn new(m: &DMatrix<f64>) -> Self {
        if m.nrows() < m.ncols() {
            let t = Self::tall(m.transpose());
            return Svd {
                u: t.v,
                singular_values: t.singular_values,
                v: t.u,
            };
        }
        Self::tall(m.clone())
    }

    fn tall(mut w: DMatrix<f64>) -> Self {
        let n = w.ncols();
        let mut v = DMatrix::identity(n, n);
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut rotated = false;
            for i in 0..n {
                for j in i + 1..n {
                    let alpha = w.column(i).norm_squared();
                    let beta = w.column(j).norm_squared();
                    let gamma = w.column(i).dot(&w.column(j));
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate(&mut w, i, j, c, s);
                    rotate(&mut v, i, j, c, s);
                }
            }
            if !rotated {
                break;
            }
        }
        let singular_values: Vec<f64> = (0..n).map(|k| w.column(k).norm()).collect();
        for (k, &s) in singular_values.iter().enumerate() {
            if s > 0.0 {
                w.column_mut(k).unscale_mut(s);
            }
        }
        Svd {
            u: w,
            singular_values,
            v,
        }
    }

    pub fn max_singular_value(&self) -> f64 {
        self.singular_values.iter().fold(0.0, |a, &b| a.max(b))
    }
}

fn rotate(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (a, b) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * a - s * b;
        m[(r, j)] = s * a + c * b;
    }
}

/// Moore–Penrose pseudoinverse from a thin SVD.
///
/// Singular values smaller than `rel_tol` times the largest one are dropped,
/// so `diag(2, 0)` maps to `diag(0.5, 0)`.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    if !all_finite(m) {
        return Err(Error::invalid("pseudo_inverse: matrix has non-finite entries"));
    }
    if !(rel_tol > 0.0) {
        return Err(Error::invalid("pseudo_inverse: rel_tol must be positive"));
    }
    let (rows, cols) = m.shape();
    let mut out = DMatrix::zeros(cols, rows);
    if rows == 0 || cols == 0 {
        return Ok(out);
    }
    let svd = Svd::new(m);
    let cutoff = rel_tol * svd.max_singular_value();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s == 0.0 || s <= cutoff {
            continue;
        }
        // out += v_k * u_k^T / s
        out += (svd.v.column(k) * svd.u.column(k).transpose()) / s;
    }
    Ok(out)
}

/// Numerical rank: number of singular values above `rel_tol * sigma_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 || !all_finite(m) {
        return 0;
    }
    let svd = Svd::new(m);
    let cutoff = rel_tol * svd.max_singular_value();
    svd.singular_values.iter().filter(|&&s| s > 0.0 && s > cutoff).count()
}
