//! Primal active-set solver for small convex quadratic programs
//!
//! ```text
//!     minimize    u' H u + 2 g' u
//!     subject to  Cu u <= Du
//! ```
//!
//! with `H` symmetric positive semidefinite. When `H` is singular the optimal
//! set can be a whole face; the solver then returns its minimum-norm member.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{all_finite, max_abs, pseudo_inverse};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct PsdQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub cu: DMatrix<f64>,
    pub du: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// One multiplier per row of `Cu`; zero for inactive rows. Satisfies
    /// `2 H u + 2 g + Cu' lambda = 0`.
    pub multipliers: DVector<f64>,
    /// Rows of `Cu` that hold with equality (within tolerance) at `u`.
    pub active: Vec<usize>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn constraint_active(&self) -> bool {
        !self.active.is_empty()
    }
}

impl PsdQp {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.h * u)[(0, 0)] + 2.0 * self.g.dot(u)
    }

    fn validate(&self) -> Result<()> {
        let m = self.h.nrows();
        if self.h.ncols() != m {
            return Err(Error::dims("qp.h", format!("{m}x{m}"), format!("{:?}", self.h.shape())));
        }
        if self.g.len() != m {
            return Err(Error::dims("qp.g", m, self.g.len()));
        }
        if self.cu.ncols() != m && self.cu.nrows() > 0 {
            return Err(Error::dims("qp.cu columns", m, self.cu.ncols()));
        }
        if self.cu.nrows() != self.du.len() {
            return Err(Error::dims("qp.du", self.cu.nrows(), self.du.len()));
        }
        if !all_finite(&self.h)
            || self.g.iter().any(|v| !v.is_finite())
            || !all_finite(&self.cu)
            || self.du.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("qp: non-finite data"));
        }
        let scale = max_abs(&self.h);
        if max_abs(&(&self.h - self.h.transpose())) > 1e-10 * scale {
            return Err(Error::invalid("qp: H is not symmetric"));
        }
        if m > 0 && scale > 0.0 {
            let eig = symmetrize(&self.h).symmetric_eigenvalues();
            let lmax = eig.max();
            let lmin = eig.min();
            if lmin < -1e-10 * lmax.abs().max(scale) {
                return Err(Error::invalid(format!(
                    "qp: H is not positive semidefinite (smallest eigenvalue {lmin:e})"
                )));
            }
        }
        Ok(())
    }
}

fn symmetrize(h: &DMatrix<f64>) -> DMatrix<f64> {
    (h + h.transpose()) * 0.5
}

pub fn solve_psd_qp(qp: &PsdQp, tol: f64) -> Result<QpSolution> {
    solve_psd_qp_with(
        qp,
        &QpOptions {
            tol,
            ..QpOptions::default()
        },
    )
}

pub fn solve_psd_qp_with(qp: &PsdQp, opts: &QpOptions) -> Result<QpSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("qp: tol must be positive"));
    }
    qp.validate()?;
    let m = qp.dim();
    let c = qp.du.len();
    let h = symmetrize(&qp.h);
    let cu = if c == 0 { DMatrix::zeros(0, m) } else { qp.cu.clone() };
    let feas_tol = opts.tol * (1.0 + qp.du.amax());

    let start = feasible_point(&cu, &qp.du, feas_tol).ok_or(Error::Infeasible)?;

    // objective u'Hu + 2g'u  ==  1/2 u'(2H)u + (2g)'u
    let phase1 = ActiveSet {
        g_mat: &h * 2.0,
        lin: &qp.g * 2.0,
        eq: DMatrix::zeros(0, m),
        ineq: &cu,
        b: &qp.du,
        tol: opts.tol,
        max_iter: opts.max_iter,
    }
    .solve(start)?;

    let mut u = phase1.u.clone();
    let mut iterations = phase1.iterations;

    // Flat directions: the optimal face is {Hu = Hu*, g'u = g'u*} within the
    // polytope. Pick its minimum-norm point.
    if m > 0 {
        let eig = SymmetricEigen::new(h.clone());
        let lmax = eig.eigenvalues.amax();
        let keep: Vec<usize> = (0..m)
            .filter(|&i| eig.eigenvalues[i] > 1e-10 * lmax.max(f64::MIN_POSITIVE))
            .collect();
        if keep.len() < m {
            let ur = eig.eigenvectors.select_columns(&keep);
            let mut rows: Vec<DVector<f64>> = ur.column_iter().map(|col| col.into_owned()).collect();
            let g_null = &qp.g - &ur * (ur.transpose() * &qp.g);
            if g_null.norm() > opts.tol * (1.0 + qp.g.norm()) {
                rows.push(g_null.normalize());
            }
            let eq = if rows.is_empty() {
                DMatrix::zeros(0, m)
            } else {
                DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>())
            };
            let phase2 = ActiveSet {
                g_mat: DMatrix::identity(m, m),
                lin: DVector::zeros(m),
                eq,
                ineq: &cu,
                b: &qp.du,
                tol: opts.tol,
                max_iter: opts.max_iter,
            }
            .solve(u.clone())?;
            u = phase2.u;
            iterations += phase2.iterations;
        }
    }

    let residual = &cu * &u - &qp.du;
    let active = (0..c).filter(|&i| residual[i].abs() <= feas_tol).collect();
    Ok(QpSolution {
        u,
        multipliers: phase1.lambda,
        active,
        iterations,
    })
}

/// Finds a point of `{A u <= b}`. The minimum-norm point of a nonempty
/// polyhedron is the minimum-norm solution of some set of at most `m`
/// independent active rows, so enumerating those subsets is exhaustive.
fn feasible_point(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let m = a.ncols();
    let c = a.nrows();
    let feasible = |u: &DVector<f64>| (0..c).all(|i| a.row(i).dot(&u.transpose()) <= b[i] + tol);
    let zero = DVector::zeros(m);
    if feasible(&zero) {
        return Some(zero);
    }
    let mut best: Option<DVector<f64>> = None;
    let mut subset = Vec::new();
    for size in 1..=m.min(c) {
        for_each_subset(c, size, &mut subset, 0, &mut |s| {
            let rows = a.select_rows(s);
            let rhs = DVector::from_iterator(s.len(), s.iter().map(|&i| b[i]));
            let Ok(pinv) = pseudo_inverse(&rows, 1e-12) else {
                return;
            };
            let u = pinv * &rhs;
            if (&rows * &u - &rhs).amax() > tol {
                return;
            }
            if feasible(&u) && best.as_ref().is_none_or(|b| u.norm() < b.norm()) {
                best = Some(u);
            }
        });
    }
    best
}

fn for_each_subset(n: usize, size: usize, cur: &mut Vec<usize>, from: usize, f: &mut dyn FnMut(&[usize])) {
    if cur.len() == size {
        f(cur);
        return;
    }
    for i in from..n {
        if n - i < size - cur.len() {
            break;
        }
        cur.push(i);
        for_each_subset(n, size, cur, i + 1, f);
        cur.pop();
    }
}

/// minimize 1/2 u'Gu + lin'u  s.t.  eq u = eq u0 (kept fixed), ineq u <= b,
/// starting from a feasible `u0`.
struct ActiveSet<'a> {
    g_mat: DMatrix<f64>,
    lin: DVector<f64>,
    eq: DMatrix<f64>,
    ineq: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    tol: f64,
    max_iter: usize,
}

struct ActiveSetResult {
    u: DVector<f64>,
    lambda: DVector<f64>,
    iterations: usize,
}

impl ActiveSet<'_> {
    fn solve(&self, mut u: DVector<f64>) -> Result<ActiveSetResult> {
        let m = u.len();
        let c = self.b.len();
        let scale = 1.0 + max_abs(&self.g_mat) + self.lin.amax();
        let mut working: Vec<usize> = Vec::new();

        for iter in 0..self.max_iter {
            let grad = &self.g_mat * &u + &self.lin;
            let active_rows = self.stack(&working);
            let z = null_space(&active_rows, m)?;

            let mut step = DVector::zeros(m);
            let mut ray = false;
            if z.ncols() > 0 {
                let hr = z.transpose() * &self.g_mat * &z;
                let gr = z.transpose() * &grad;
                let eig = SymmetricEigen::new(symmetrize(&hr));
                let lmax = eig.eigenvalues.amax();
                let mut flat = DVector::zeros(z.ncols());
                for k in 0..z.ncols() {
                    if eig.eigenvalues[k] <= 1e-10 * lmax.max(1e-300) {
                        let v = eig.eigenvectors.column(k);
                        let comp = v.dot(&gr);
                        if comp.abs() > self.tol * scale {
                            flat -= v * comp;
                        }
                    }
                }
                if flat.norm() > 0.0 {
                    // zero curvature, nonzero slope: descend until blocked
                    step = &z * flat;
                    ray = true;
                } else {
                    let hr_pinv = pseudo_inverse(&hr, 1e-10)?;
                    step = -(&z * (hr_pinv * gr));
                }
            }

            if !ray && step.norm() <= self.tol * (1.0 + u.norm()) {
                let lambda_w = self.multipliers(&working, &grad)?;
                let (worst, worst_val) =
                    lambda_w.iter().enumerate().fold(
                        (None, 0.0),
                        |(wi, wv), (k, &l)| {
                            if l < wv {
                                (Some(k), l)
                            } else {
                                (wi, wv)
                            }
                        },
                    );
                match worst {
                    Some(k) if worst_val < -self.tol * scale => {
                        working.remove(k);
                    }
                    _ => {
                        let mut lambda = DVector::zeros(c);
                        for (k, &i) in working.iter().enumerate() {
                            lambda[i] = lambda_w[k].max(0.0);
                        }
                        return Ok(ActiveSetResult {
                            u,
                            lambda,
                            iterations: iter + 1,
                        });
                    }
                }
                continue;
            }

            // ratio test
            let mut t_max = if ray { f64::INFINITY } else { 1.0 };
            let mut blocking = None;
            for i in 0..c {
                if working.contains(&i) {
                    continue;
                }
                let row = self.ineq.row(i);
                let ap = row.dot(&step.transpose());
                if ap <= 1e-14 * step.norm() * row.norm() {
                    continue;
                }
                let slack = (self.b[i] - row.dot(&u.transpose())).max(0.0);
                let t = slack / ap;
                if t < t_max {
                    t_max = t;
                    blocking = Some(i);
                }
            }
            if t_max.is_infinite() {
                return Err(Error::Unbounded);
            }
            u += &step * t_max;
            if let Some(i) = blocking {
                working.push(i);
            }
        }
        Err(Error::NoConvergence(self.max_iter))
    }

    fn stack(&self, working: &[usize]) -> DMatrix<f64> {
        let m = self.g_mat.nrows();
        let rows = self.eq.nrows() + working.len();
        let mut out = DMatrix::zeros(rows, m);
        for r in 0..self.eq.nrows() {
            out.set_row(r, &self.eq.row(r));
        }
        for (k, &i) in working.iter().enumerate() {
            out.set_row(self.eq.nrows() + k, &self.ineq.row(i));
        }
        out
    }

    /// Least-squares multipliers of the working inequalities:
    /// grad + eq' mu + A_W' lambda = 0.
    fn multipliers(&self, working: &[usize], grad: &DVector<f64>) -> Result<DVector<f64>> {
        let rows = self.stack(working);
        if rows.nrows() == 0 {
            return Ok(DVector::zeros(0));
        }
        let all = pseudo_inverse(&rows.transpose(), 1e-12)? * (-grad);
        Ok(all.rows(self.eq.nrows(), working.len()).into_owned())
    }
}

/// Orthonormal basis of the null space of `rows` (m columns), from the
/// eigenvectors of the projector `I - rows^+ rows`.
fn null_space(rows: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    if rows.nrows() == 0 {
        return Ok(DMatrix::identity(m, m));
    }
    let proj = DMatrix::identity(m, m) - pseudo_inverse(rows, 1e-10)? * rows;
    let eig = SymmetricEigen::new(symmetrize(&proj));
    let keep: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    Ok(eig.eigenvectors.select_columns(&keep))
}
