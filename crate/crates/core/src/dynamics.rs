//! Discrete-time LTI agent models `x' = A x + B u`, `y = C x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::numerics::{all_finite, rank, DEFAULT_PINV_TOL};
use crate::{Error, Point, Result};

pub const DEFAULT_RELDEG_TOL: f64 = 1e-10;

/// Polyhedral input set `Cu u <= Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPolytope {
    pub cu: DMatrix<f64>,
    pub du: DVector<f64>,
}

impl InputPolytope {
    /// `|u_i| <= bound` for every component, stacked as `[I; -I]`.
    pub fn symmetric_box(m: usize, bound: f64) -> Self {
        let mut cu = DMatrix::zeros(2 * m, m);
        for i in 0..m {
            cu[(i, i)] = -1.0;
            cu[(m + i, i)] = 1.0;
        }
        Self {
            cu,
            du: DVector::from_element(2 * m, bound),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.cu.ncols()
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        (&self.cu * u - &self.du).iter().all(|&r| r <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn symmetric(b: f64) -> Self {
        Self { lo: -b, hi: b }
    }
}

#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    dt: f64,
    relative_degree: usize,
    state_bounds: Option<Vec<Interval>>,
    input_bounds: Option<InputPolytope>,
}

/// Result of one propagation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub x: DVector<f64>,
    /// At least one state component was clamped into its bounds.
    pub clamped: bool,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dims("A", "square, nonempty", format!("{:?}", a.shape())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dims("B", format!("{n}xm"), format!("{:?}", b.shape())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dims("C", format!("px{n}"), format!("{:?}", c.shape())));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if !all_finite(&a) || !all_finite(&b) || !all_finite(&c) {
            return Err(Error::invalid("system matrices must be finite"));
        }
        if rank(&b, DEFAULT_PINV_TOL) != b.ncols() {
            return Err(Error::invalid("B must have full column rank"));
        }
        if rank(&c, DEFAULT_PINV_TOL) != c.nrows() {
            return Err(Error::invalid("C must have full row rank"));
        }
        let relative_degree = relative_degree(&a, &b, &c, DEFAULT_RELDEG_TOL)?;
        Ok(Self {
            a,
            b,
            c,
            dt,
            relative_degree,
            state_bounds: None,
            input_bounds: None,
        })
    }

    pub fn with_state_bounds(mut self, bounds: Vec<Interval>) -> Result<Self> {
        if bounds.len() != self.state_dim() {
            return Err(Error::dims("state_bounds", self.state_dim(), bounds.len()));
        }
        if bounds.iter().any(|iv| !(iv.lo <= iv.hi)) {
            return Err(Error::invalid("state bound with lo > hi"));
        }
        self.state_bounds = Some(bounds);
        Ok(self)
    }

    pub fn with_input_bounds(mut self, poly: InputPolytope) -> Result<Self> {
        if poly.input_dim() != self.input_dim() || poly.cu.nrows() != poly.du.len() {
            return Err(Error::dims(
                "input_bounds",
                format!("cx{} with matching du", self.input_dim()),
                format!("{:?} / {}", poly.cu.shape(), poly.du.len()),
            ));
        }
        self.input_bounds = Some(poly);
        Ok(self)
    }

    pub fn without_state_bounds(mut self) -> Self {
        self.state_bounds = None;
        self
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn relative_degree(&self) -> usize {
        self.relative_degree
    }
    pub fn state_bounds(&self) -> Option<&[Interval]> {
        self.state_bounds.as_deref()
    }
    pub fn input_bounds(&self) -> Option<&InputPolytope> {
        self.input_bounds.as_ref()
    }
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// `A x + B u`, clamped into the state bounds when present.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Propagated> {
        if x.len() != self.state_dim() {
            return Err(Error::dims("state", self.state_dim(), x.len()));
        }
        if u.len() != self.input_dim() {
            return Err(Error::dims("input", self.input_dim(), u.len()));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input has non-finite entries"));
        }
        let mut next = &self.a * x + &self.b * u;
        let mut clamped = false;
        if let Some(bounds) = &self.state_bounds {
            for (xi, iv) in next.iter_mut().zip(bounds) {
                let c = xi.clamp(iv.lo, iv.hi);
                if c != *xi {
                    clamped = true;
                    *xi = c;
                }
            }
        }
        Ok(Propagated { x: next, clamped })
    }

    pub fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::dims("state", self.state_dim(), x.len()));
        }
        Ok(&self.c * x)
    }

    /// Planar output; requires `p = 2`.
    pub fn position(&self, x: &DVector<f64>) -> Result<Point> {
        let y = self.output(x)?;
        if y.len() != 2 {
            return Err(Error::dims("output (planar)", 2, y.len()));
        }
        Ok(Point::new(y[0], y[1]))
    }

    /// `A^k` by repeated multiplication.
    pub fn a_power(&self, k: usize) -> DMatrix<f64> {
        let n = self.state_dim();
        (0..k).fold(DMatrix::identity(n, n), |acc, _| &acc * &self.a)
    }

    /// `C A^(P-1) B`, the first nonvanishing Markov parameter.
    pub fn markov_gain(&self) -> DMatrix<f64> {
        &self.c * self.a_power(self.relative_degree - 1) * &self.b
    }
}

/// Smallest `P >= 1` with `C A^(P-1) B` nonzero, searched up to `P = n`.
///
/// "Nonzero" is relative: `|C A^i B|_F > tol |C|_F |A|_F^i |B|_F`.
pub fn relative_degree(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, tol: f64) -> Result<usize> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(Error::dims(
            "relative_degree",
            "A n x n, B n x m, C p x n",
            format!("{:?} {:?} {:?}", a.shape(), b.shape(), c.shape()),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("relative_degree: tol must be positive"));
    }
    let (na, nb, nc) = (a.norm(), b.norm(), c.norm());
    let mut ai_b = b.clone();
    for i in 0..n {
        let prod = c * &ai_b;
        let scale = nc * na.powi(i as i32) * nb;
        if prod.norm() > tol * scale {
            return Ok(i + 1);
        }
        ai_b = a * ai_b;
    }
    Err(Error::Unreachable(n))
}

/// Physical parameters of the planar quadrotor preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    pub gravity: f64,
    pub ixx: f64,
    pub iyy: f64,
    pub max_angle: f64,
    pub max_rate: f64,
    pub max_speed: f64,
    pub max_torque: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            ixx: 0.1,
            iyy: 0.1,
            max_angle: 0.52,
            max_rate: 10.47,
            max_speed: 5.0,
            max_torque: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    FirstOrder,
    PlanarQuadrotor,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_order" => Ok(Preset::FirstOrder),
            "planar_quadrotor" => Ok(Preset::PlanarQuadrotor),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

/// Builds one of the scenario models.
///
/// `first_order` is the planar single integrator `A = B = C = I2`.
///
/// `planar_quadrotor` is the 8-state chain with state
/// `(phi, theta, dphi, dtheta, dpx, dpy, px, py)` and torque input
/// `(tau_x, tau_y)`:
///
/// ```text
/// dphi'   = dphi + dt/Ixx tau_x        phi'   = phi + dt dphi
/// dtheta' = dtheta + dt/Iyy tau_y      theta' = theta + dt dtheta
/// dpx'    = dpx + g dt theta           px'    = px + dpx
/// dpy'    = dpy + g dt phi             py'    = py + dpy
/// ```
///
/// `dpx`, `dpy` are per-step displacements, so the speed bound is scaled by
/// `dt`. The torque box is attached as input bounds.
pub fn make_preset(preset: Preset, dt: f64, params: &QuadrotorParams) -> Result<LtiSystem> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    match preset {
        Preset::FirstOrder => {
            let i2 = DMatrix::identity(2, 2);
            LtiSystem::new(i2.clone(), i2.clone(), i2, dt)
        }
        Preset::PlanarQuadrotor => {
            let p = params;
            if !(p.ixx > 0.0 && p.iyy > 0.0) {
                return Err(Error::invalid("quadrotor inertias must be positive"));
            }
            const PHI: usize = 0;
            const THETA: usize = 1;
            const DPHI: usize = 2;
            const DTHETA: usize = 3;
            const DPX: usize = 4;
            const DPY: usize = 5;
            const PX: usize = 6;
            const PY: usize = 7;
            let mut a = DMatrix::identity(8, 8);
            a[(PHI, DPHI)] = dt;
            a[(THETA, DTHETA)] = dt;
            a[(DPX, THETA)] = p.gravity * dt;
            a[(DPY, PHI)] = p.gravity * dt;
            a[(PX, DPX)] = 1.0;
            a[(PY, DPY)] = 1.0;
            let mut b = DMatrix::zeros(8, 2);
            b[(DPHI, 0)] = dt / p.ixx;
            b[(DTHETA, 1)] = dt / p.iyy;
            let mut c = DMatrix::zeros(2, 8);
            c[(0, PX)] = 1.0;
            c[(1, PY)] = 1.0;
            let step = p.max_speed * dt;
            let bounds = vec![
                Interval::symmetric(p.max_angle),
                Interval::symmetric(p.max_angle),
                Interval::symmetric(p.max_rate),
                Interval::symmetric(p.max_rate),
                Interval::symmetric(step),
                Interval::symmetric(step),
                Interval {
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                },
                Interval {
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                },
            ];
            LtiSystem::new(a, b, c, dt)?
                .with_state_bounds(bounds)?
                .with_input_bounds(InputPolytope::symmetric_box(2, p.max_torque))
        }
    }
}

/// Initial quadrotor state hovering at `(px, py)`.
pub fn quadrotor_hover(px: f64, py: f64) -> DVector<f64> {
    let mut x = DVector::zeros(8);
    x[6] = px;
    x[7] = py;
    x
}
