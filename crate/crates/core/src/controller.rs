//! Stage A: predicted change of the local Wasserstein distance and the input
//! minimizing it.
//!
//! For a selection with claimed mass `alpha` and mass center `q`, moving the
//! agent with input `u` changes the squared local distance `P` steps ahead by
//!
//! ```text
//!     dW(u) = u' D1 u + 2 D2 u + D3
//! ```
//!
//! with `G = C A^(P-1) B`, `D1 = alpha G'G`, `D2 = alpha (C A^P x - q)' G` and
//! `D3 = alpha (|C A^P x - q|^2 - |C x - q|^2)`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{InputPolytope, LtiSystem};
use crate::numerics::{pseudo_inverse, rank, solve_psd_qp, PsdQp, DEFAULT_PINV_TOL};
use crate::transport::{select_local_samples, LocalSelection};
use crate::{Error, Point, Result};

pub const DEFAULT_QP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GainTerms {
    /// Symmetric PSD, `m x m`.
    pub d1: DMatrix<f64>,
    /// The row vector `D2`, stored as a column.
    pub d2: DVector<f64>,
    pub d3: f64,
}

impl GainTerms {
    pub fn input_dim(&self) -> usize {
        self.d2.len()
    }

    fn check_input(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.input_dim() {
            return Err(Error::dims("input", self.input_dim(), u.len()));
        }
        Ok(())
    }

    /// `D1^+ D2'`, the negated center of the convergence range.
    fn pinv_d2(&self) -> DVector<f64> {
        match pseudo_inverse(&self.d1, DEFAULT_PINV_TOL) {
            Ok(p) => p * &self.d2,
            Err(_) => DVector::from_element(self.input_dim(), f64::NAN),
        }
    }
}

fn to_vector(q: &Point) -> DVector<f64> {
    DVector::from_column_slice(q.as_slice())
}

/// Builds `D1`, `D2`, `D3` for state `x`, mass center `q_bar` and claimed mass
/// `alpha`.
pub fn gain_terms(sys: &LtiSystem, x: &DVector<f64>, q_bar: &DVector<f64>, alpha: f64) -> Result<GainTerms> {
    if x.len() != sys.state_dim() {
        return Err(Error::dims("state", sys.state_dim(), x.len()));
    }
    if q_bar.len() != sys.output_dim() {
        return Err(Error::dims("mass center", sys.output_dim(), q_bar.len()));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("gain_terms: alpha must be positive"));
    }
    let p = sys.relative_degree();
    let a_pm1 = sys.a_power(p - 1);
    let g = sys.c() * &a_pm1 * sys.b();
    let y_free = sys.c() * (sys.a() * &a_pm1 * x);
    let y_now = sys.c() * x;
    let e_free = &y_free - q_bar;
    let d1 = g.transpose() * &g * alpha;
    let d1 = (&d1 + d1.transpose()) * 0.5;
    let d2 = g.transpose() * &e_free * alpha;
    let d3 = alpha * (e_free.norm_squared() - (&y_now - q_bar).norm_squared());
    Ok(GainTerms { d1, d2, d3 })
}

/// `u' D1 u + 2 D2 u + D3`.
pub fn delta_w(gt: &GainTerms, u: &DVector<f64>) -> Result<f64> {
    gt.check_input(u)?;
    Ok((u.transpose() * &gt.d1 * u)[(0, 0)] + 2.0 * gt.d2.dot(u) + gt.d3)
}

/// Minimum-norm minimizer `-D1^+ D2'`.
pub fn optimal_input_unconstrained(gt: &GainTerms) -> Result<DVector<f64>> {
    Ok(-(pseudo_inverse(&gt.d1, DEFAULT_PINV_TOL)? * &gt.d2))
}

/// Constrained optimal input
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedInput {
    pub u: DVector<f64>,
    /// Some input constraint holds with equality at `u`.
    pub constraint_active: bool,
}

/// Minimizes `dW` over `Cu u <= Du`.
pub fn optimal_input_constrained(gt: &GainTerms, poly: &InputPolytope) -> Result<ConstrainedInput> {
    if poly.input_dim() != gt.input_dim() {
        return Err(Error::dims("input constraints", gt.input_dim(), poly.input_dim()));
    }
    let sol = solve_psd_qp(
        &PsdQp {
            h: gt.d1.clone(),
            g: gt.d2.clone(),
            cu: poly.cu.clone(),
            du: poly.du.clone(),
        },
        DEFAULT_QP_TOL,
    )?;
    Ok(ConstrainedInput {
        constraint_active: sol.constraint_active(),
        u: sol.u,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCheck {
    /// `|u + D1^+ D2'|^2_D1 < D2 D1^+ D2' - D3`.
    pub in_range: bool,
    /// `D2 D1^+ D2' - D3 >= 0`.
    pub range_nonempty: bool,
    /// `D2 D1^+ D2' - D3`.
    pub radius_sq: f64,
}

pub fn convergence_check(gt: &GainTerms, u: &DVector<f64>) -> Result<ConvergenceCheck> {
    gt.check_input(u)?;
    let c = gt.pinv_d2();
    let radius_sq = gt.d2.dot(&c) - gt.d3;
    let shifted = u + &c;
    let lhs = (shifted.transpose() * &gt.d1 * &shifted)[(0, 0)];
    Ok(ConvergenceCheck {
        in_range: lhs < radius_sq,
        range_nonempty: radius_sq >= 0.0,
        radius_sq,
    })
}

/// `n_points` samples of the boundary of the convergence range at parameter
/// angles `2 pi k / n_points`. Needs a two-dimensional input and full-rank
/// `D1`.
pub fn convergence_ellipse(gt: &GainTerms, n_points: usize) -> Result<Vec<Point>> {
    if gt.input_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "convergence ellipse needs a 2-dimensional input, got {}",
            gt.input_dim()
        )));
    }
    if rank(&gt.d1, DEFAULT_PINV_TOL) < 2 {
        return Err(Error::Unsupported(
            "D1 is rank deficient; the convergence range is unbounded".into(),
        ));
    }
    let check = convergence_check(gt, &DVector::zeros(2))?;
    if !check.range_nonempty {
        return Err(Error::Unsupported("convergence range is empty".into()));
    }
    let chol = gt
        .d1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Unsupported("D1 is not positive definite".into()))?;
    let center = -gt.pinv_d2();
    let lt = chol.l().transpose();
    let r = check.radius_sq.sqrt();
    (0..n_points)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n_points as f64;
            let v = DVector::from_vec(vec![t.cos() * r, t.sin() * r]);
            let d = lt
                .solve_upper_triangular(&v)
                .ok_or_else(|| Error::Unsupported("D1 is not positive definite".into()))?;
            Ok(Point::new(center[0] + d[0], center[1] + d[1]))
        })
        .collect()
}

/// Everything Stage A decides for one agent at one step.
#[derive(Debug, Clone)]
pub struct ControlDecision {
    pub selection: LocalSelection,
    pub gains: GainTerms,
    /// Input actually applied.
    pub u: DVector<f64>,
    pub u_unconstrained: DVector<f64>,
    pub delta_w_pred: f64,
    pub delta_w_unconstrained: f64,
    pub in_range: bool,
    pub range_nonempty: bool,
    pub constraint_active: bool,
}

/// Stage A for one agent: local selection around `prev_center`, gain terms
/// at the new mass center, then the (constrained) optimal input.
pub fn stage_a(
    sys: &LtiSystem,
    x: &DVector<f64>,
    weights: &[f64],
    positions: &[Point],
    prev_center: &Point,
    alpha: f64,
    constraints: Option<&InputPolytope>,
) -> Result<ControlDecision> {
    let selection = select_local_samples(weights, positions, prev_center, alpha)?;
    let gains = gain_terms(sys, x, &to_vector(&selection.mass_center), selection.total())?;
    let u_unconstrained = optimal_input_unconstrained(&gains)?;
    let (u, constraint_active) = match constraints {
        Some(poly) => {
            let c = optimal_input_constrained(&gains, poly)?;
            (c.u, c.constraint_active)
        }
        None => (u_unconstrained.clone(), false),
    };
    let check = convergence_check(&gains, &u)?;
    Ok(ControlDecision {
        delta_w_pred: delta_w(&gains, &u)?,
        delta_w_unconstrained: delta_w(&gains, &u_unconstrained)?,
        in_range: check.in_range,
        range_nonempty: check.range_nonempty,
        constraint_active,
        u,
        u_unconstrained,
        gains,
        selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_preset, Preset, QuadrotorParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn first_order() -> LtiSystem {
        make_preset(Preset::FirstOrder, 0.1, &QuadrotorParams::default()).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn example() -> GainTerms {
        gain_terms(&first_order(), &v(&[0.0, 0.0]), &v(&[3.0, 4.0]), 0.2).unwrap()
    }

    #[test]
    fn first_order_gains() {
        let gt = example();
        assert!((&gt.d1 - DMatrix::identity(2, 2) * 0.2).norm() < 1e-15);
        assert!((&gt.d2 - v(&[-0.6, -0.8])).norm() < 1e-15);
        assert!(gt.d3.abs() < 1e-15);
        assert!((delta_w(&gt, &v(&[3.0, 4.0])).unwrap() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn at_target_gains_vanish() {
        let gt = gain_terms(&first_order(), &v(&[2.0, -1.0]), &v(&[2.0, -1.0]), 0.5).unwrap();
        assert_eq!(gt.d2, v(&[0.0, 0.0]));
        assert_eq!(gt.d3, 0.0);
        assert_eq!(delta_w(&gt, &v(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(optimal_input_unconstrained(&gt).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn quadrotor_d1_matches_matrix_chain() {
        let sys = make_preset(Preset::PlanarQuadrotor, 0.1, &QuadrotorParams::default()).unwrap();
        let x = DVector::from_fn(8, |i, _| 0.01 * (i as f64 + 1.0));
        let alpha = 0.125;
        let gt = gain_terms(&sys, &x, &v(&[1.0, 2.0]), alpha).unwrap();
        let (a, b, c) = (sys.a(), sys.b(), sys.c());
        let g = c * a * a * a * b;
        let expect = g.transpose() * &g * alpha;
        assert!((&gt.d1 - &expect).norm() <= 1e-14 * expect.norm());
        // dt^3 g / I on the anti-diagonal
        let k = 0.1f64.powi(3) * 9.81 / 0.1;
        assert!((g[(0, 1)] - k).abs() < 1e-14 && (g[(1, 0)] - k).abs() < 1e-14);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn unconstrained_optimum() {
        let u = optimal_input_unconstrained(&example()).unwrap();
        assert!((u - v(&[3.0, 4.0])).norm() < 1e-12);
        let flat = GainTerms {
            d1: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            d2: v(&[-1.0, 0.0]),
            d3: 0.0,
        };
        let u = optimal_input_unconstrained(&flat).unwrap();
        assert!((u.clone() - v(&[1.0, 0.0])).norm() < 1e-14);
        // every point on the flat line is optimal, (1, 0) is the shortest
        let best = delta_w(&flat, &u).unwrap();
        for k in -100..=100 {
            let w = v(&[1.0, k as f64 * 0.05]);
            assert!((delta_w(&flat, &w).unwrap() - best).abs() < 1e-14);
            assert!(w.norm() >= u.norm());
        }
    }

    #[test]
    fn constrained_optimum() {
        let gt = example();
        let c = optimal_input_constrained(&gt, &InputPolytope::symmetric_box(2, 2.0)).unwrap();
        assert!((c.u.clone() - v(&[2.0, 2.0])).norm() < 1e-8);
        assert!(c.constraint_active);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let w = v(&[-2.0 + i as f64 * 0.01, -2.0 + j as f64 * 0.01]);
                let f = delta_w(&gt, &w).unwrap();
                if f < best.0 {
                    best = (f, w[0], w[1]);
                }
            }
        }
        assert!((best.1 - 2.0).abs() < 1e-9 && (best.2 - 2.0).abs() < 1e-9);
        let wide = optimal_input_constrained(&gt, &InputPolytope::symmetric_box(2, 10.0)).unwrap();
        assert!((wide.u - v(&[3.0, 4.0])).norm() < 1e-8);
        assert!(!wide.constraint_active);
        let free = optimal_input_unconstrained(&gt).unwrap();
        assert!(delta_w(&gt, &c.u).unwrap() >= delta_w(&gt, &free).unwrap());
    }

    #[test]
    fn convergence_range_examples() {
        let gt = example();
        let at_zero = convergence_check(&gt, &v(&[0.0, 0.0])).unwrap();
        assert!(!at_zero.in_range && at_zero.range_nonempty);
        assert!((at_zero.radius_sq - 5.0).abs() < 1e-12);
        assert!(convergence_check(&gt, &v(&[1.0, 1.0])).unwrap().in_range);
        assert!(delta_w(&gt, &v(&[1.0, 1.0])).unwrap() < 0.0);
        assert!(convergence_check(&gt, &v(&[3.0, 4.0])).unwrap().in_range);
        let empty = GainTerms {
            d1: DMatrix::identity(2, 2),
            d2: v(&[0.0, 0.0]),
            d3: 1.0,
        };
        assert!(!convergence_check(&empty, &v(&[0.0, 0.0])).unwrap().range_nonempty);
    }

    #[test]
    fn on_circle_delta_is_zero() {
        let gt = example();
        // |u - (3,4)| = 5 keeps the distance to the mass center unchanged
        for k in 0..12 {
            let t = std::f64::consts::TAU * k as f64 / 12.0;
            let u = v(&[3.0 + 5.0 * t.cos(), 4.0 + 5.0 * t.sin()]);
            assert!(delta_w(&gt, &u).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn ellipse_samples() {
        let gt = example();
        let pts = convergence_ellipse(&gt, 4).unwrap();
        let expect = [(8.0, 4.0), (3.0, 9.0), (-2.0, 4.0), (3.0, -1.0)];
        for (p, e) in pts.iter().zip(expect) {
            assert!((p - Point::new(e.0, e.1)).norm() < 1e-12, "{p:?} vs {e:?}");
        }
        for p in convergence_ellipse(&gt, 64).unwrap() {
            assert!((p - Point::new(3.0, 4.0)).norm() - 5.0 < 1e-12);
        }
        let degenerate = GainTerms {
            d1: DMatrix::identity(2, 2),
            d2: v(&[-1.0, 0.0]),
            d3: 1.0,
        };
        for p in convergence_ellipse(&degenerate, 5).unwrap() {
            assert!((p - Point::new(1.0, 0.0)).norm() < 1e-12);
        }
        let flat = GainTerms {
            d1: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            d2: v(&[-1.0, 0.0]),
            d3: 0.0,
        };
        assert!(matches!(convergence_ellipse(&flat, 8), Err(Error::Unsupported(_))));
    }

    #[test]
    fn anisotropic_ellipse_is_on_boundary() {
        let gt = GainTerms {
            d1: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            d2: v(&[-1.0, 0.3]),
            d3: -0.2,
        };
        for p in convergence_ellipse(&gt, 16).unwrap() {
            assert!(delta_w(&gt, &v(&[p.x, p.y])).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn optimality_against_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let gt = GainTerms {
                d1: g.transpose() * &g,
                d2: g.transpose() * DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0)),
                d3: rng.random_range(-3.0..3.0),
            };
            let u = optimal_input_unconstrained(&gt).unwrap();
            let best = delta_w(&gt, &u).unwrap();
            for _ in 0..50 {
                let d = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                assert!(delta_w(&gt, &(&u + d)).unwrap() >= best - 1e-10);
            }
        }
    }

    #[test]
    fn stage_a_first_order() {
        let sys = first_order();
        let positions = [Point::new(3.0, 4.0)];
        let d = stage_a(&sys, &v(&[0.0, 0.0]), &[1.0], &positions, &Point::zeros(), 0.25, None).unwrap();
        assert!((d.u.clone() - v(&[3.0, 4.0])).norm() < 1e-12);
        assert!((d.delta_w_pred + 0.25 * 25.0).abs() < 1e-12);
        assert!(d.in_range && d.range_nonempty && !d.constraint_active);
        let boxed = InputPolytope::symmetric_box(2, 2.0);
        let d = stage_a(
            &sys,
            &v(&[0.0, 0.0]),
            &[1.0],
            &positions,
            &Point::zeros(),
            0.25,
            Some(&boxed),
        )
        .unwrap();
        assert!((d.u.clone() - v(&[2.0, 2.0])).norm() < 1e-8);
        assert!(d.constraint_active);
        assert!(d.delta_w_pred >= d.delta_w_unconstrained);
    }

    proptest! {
        #[test]
        fn flat_directions_leave_delta_unchanged(
            a in -2.0..2.0f64, b in -2.0..2.0f64, e in -5.0..5.0f64,
            d3 in -3.0..3.0f64, h0 in -10.0..10.0f64, h1 in -10.0..10.0f64,
        ) {
            // rank-one D1 = alpha g g'
            let g = v(&[a, b]);
            prop_assume!(g.norm() > 1e-3);
            let gt = GainTerms { d1: &g * g.transpose(), d2: &g * e, d3 };
            let u = optimal_input_unconstrained(&gt).unwrap();
            let pinv = pseudo_inverse(&gt.d1, DEFAULT_PINV_TOL).unwrap();
            let proj = DMatrix::identity(2, 2) - &pinv * &gt.d1;
            let shifted = &u + proj * v(&[h0, h1]);
            let base = delta_w(&gt, &u).unwrap();
            prop_assert!((delta_w(&gt, &shifted).unwrap() - base).abs() <= 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn range_agrees_with_sign(
            g00 in -2.0..2.0f64, g01 in -2.0..2.0f64, g10 in -2.0..2.0f64, g11 in -2.0..2.0f64,
            e0 in -5.0..5.0f64, e1 in -5.0..5.0f64, d3 in -10.0..10.0f64,
            u0 in -20.0..20.0f64, u1 in -20.0..20.0f64,
        ) {
            let g = DMatrix::from_row_slice(2, 2, &[g00, g01, g10, g11]);
            prop_assume!(g.determinant().abs() > 1e-3);
            let gt = GainTerms { d1: g.transpose() * &g, d2: g.transpose() * v(&[e0, e1]), d3 };
            let u = v(&[u0, u1]);
            let dw = delta_w(&gt, &u).unwrap();
            prop_assume!(dw.abs() > 1e-9);
            prop_assert_eq!(convergence_check(&gt, &u).unwrap().in_range, dw < 0.0);
        }
    }
}
