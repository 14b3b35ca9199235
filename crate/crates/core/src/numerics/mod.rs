//! Small dense kernels: Moore–Penrose inverse, PSD quadratic programs and an
//! exact transportation solver.

mod pinv;
mod qp;
mod simplex;

pub use pinv::{pseudo_inverse, rank, Svd, DEFAULT_PINV_TOL};
pub use qp::{solve_psd_qp, solve_psd_qp_with, PsdQp, QpOptions, QpSolution};
pub use simplex::{
    solve_transport_exact, solve_transport_with, Flow, TransportOptions, TransportProblem, TransportSolution,
};

use nalgebra::DMatrix;

pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
