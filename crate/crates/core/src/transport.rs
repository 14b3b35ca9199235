//! Optimal-transport primitives used inside the control loop.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distribution::Weights;
use crate::numerics::{solve_transport_with, TransportOptions, TransportProblem};
use crate::{Error, Point, Result};

/// Local sample-points claimed by one agent for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSelection {
    pub indices: Vec<usize>,
    pub points: Vec<Point>,
    /// Mass claimed from each selected point, aligned with `indices`.
    pub taken: Vec<f64>,
    pub mass_center: Point,
    /// Fewer than `alpha` units of mass were left to claim.
    pub exhausted: bool,
}

impl LocalSelection {
    pub fn total(&self) -> f64 {
        self.taken.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `sum_j taken_j |y - q_j|^2`.
    pub fn squared_cost(&self, y: &Point) -> f64 {
        self.points
            .iter()
            .zip(&self.taken)
            .map(|(q, b)| b * (y - q).norm_squared())
            .sum()
    }
}

fn by_key_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Claims `demand` units of mass from the points in ascending key order, the
/// last one partially. Only the prefix that is actually needed gets sorted.
/// Returns `(index, amount)` pairs and the unmet demand.
fn greedy_fill(mut ranked: Vec<(f64, usize)>, weights: &[f64], demand: f64) -> (Vec<(usize, f64)>, f64) {
    let mut k = ranked.len().min(32);
    loop {
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, by_key_then_index);
        }
        ranked[..k].sort_unstable_by(by_key_then_index);
        let mut out = Vec::new();
        let mut remaining = demand;
        for &(_, j) in &ranked[..k] {
            let b = weights[j];
            if b >= remaining {
                out.push((j, remaining));
                return (out, 0.0);
            }
            out.push((j, b));
            remaining -= b;
        }
        if k == ranked.len() {
            return (out, remaining);
        }
        k = (2 * k).min(ranked.len());
    }
}

/// Greedy local sample-point selection.
///
/// Points with positive weight are ranked by `|q_j - prev_center| / beta_j`
/// (ties by index) and claimed in that order, the last one partially, until
/// `alpha` units of mass are claimed or the weights run out.
pub fn select_local_samples(
    weights: &[f64],
    positions: &[Point],
    prev_center: &Point,
    alpha: f64,
) -> Result<LocalSelection> {
    if weights.len() != positions.len() {
        return Err(Error::dims("selection weights", positions.len(), weights.len()));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("selection: alpha must be positive"));
    }
    let ranked: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &b)| b > 0.0)
        .map(|(j, &b)| ((positions[j] - prev_center).norm() / b, j))
        .collect();
    if ranked.is_empty() {
        return Err(Error::Exhausted);
    }
    let (claims, remaining) = greedy_fill(ranked, weights, alpha);
    let (indices, taken): (Vec<usize>, Vec<f64>) = claims.into_iter().unzip();
    let points: Vec<Point> = indices.iter().map(|&j| positions[j]).collect();
    let center = weighted_mean(&points, &taken)?;
    Ok(LocalSelection {
        indices,
        points,
        taken,
        mass_center: center,
        exhausted: remaining > 0.0,
    })
}

/// Claimed-mass-weighted mean of the selected points.
pub fn mass_center(selection: &LocalSelection) -> Result<Point> {
    weighted_mean(&selection.points, &selection.taken)
}

fn weighted_mean(points: &[Point], masses: &[f64]) -> Result<Point> {
    let total: f64 = masses.iter().sum();
    if points.is_empty() || !(total > 0.0) {
        return Err(Error::invalid("mass center of an empty selection"));
    }
    let sum = points
        .iter()
        .zip(masses)
        .fold(Point::zeros(), |acc, (q, &b)| acc + q * b);
    Ok(sum / total)
}

/// Local 2-Wasserstein distance between the selection and one agent-point.
pub fn local_wasserstein(selection: &LocalSelection, agent_pos: &Point) -> f64 {
    selection.squared_cost(agent_pos).sqrt()
}

/// Stage B transport plan: mass taken from each sample-point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransportPlan {
    /// `(sample index, gamma)` with `gamma > 0`, in fill order.
    pub entries: Vec<(usize, f64)>,
}

impl TransportPlan {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(j, g) in &self.entries {
            out[j] += g;
        }
        out
    }

    pub fn cost(&self, positions: &[Point], agent_pos: &Point) -> f64 {
        self.entries
            .iter()
            .map(|&(j, g)| g * (agent_pos - positions[j]).norm_squared())
            .sum()
    }

    /// Subtracts the plan from the agent's weights.
    pub fn apply(&self, weights: &mut Weights) {
        for &(j, g) in &self.entries {
            weights.take(j, g);
        }
    }
}

/// Cheapest way to move `alpha_next` units of remaining reference mass onto
/// the agent-point at `agent_pos` under squared-distance cost: fill from the
/// nearest sample-point outward.
pub fn weight_update(
    positions: &[Point],
    weights: &[f64],
    agent_pos: &Point,
    alpha_next: f64,
) -> Result<TransportPlan> {
    if weights.len() != positions.len() {
        return Err(Error::dims("weight_update weights", positions.len(), weights.len()));
    }
    if !(alpha_next >= 0.0) {
        return Err(Error::invalid("weight_update: negative demand"));
    }
    if alpha_next == 0.0 {
        return Ok(TransportPlan::default());
    }
    let available: f64 = weights.iter().sum();
    if alpha_next > available + 1e-12 {
        return Err(Error::Exhausted);
    }
    let ranked: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &b)| b > 0.0)
        .map(|(j, _)| ((positions[j] - agent_pos).norm_squared(), j))
        .collect();
    let (entries, _) = greedy_fill(ranked, weights, alpha_next);
    Ok(TransportPlan { entries })
}

/// Weighted planar point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCloud {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl WeightedCloud {
    pub fn uniform(points: Vec<Point>) -> Self {
        let n = points.len();
        Self {
            points,
            weights: vec![1.0; n],
        }
    }

    /// Drops zero-mass points and rescales to unit mass.
    fn normalized(&self) -> Result<Self> {
        if self.points.len() != self.weights.len() {
            return Err(Error::dims("cloud weights", self.points.len(), self.weights.len()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("cloud weights must be finite and nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if self.points.is_empty() || !(total > 0.0) {
            return Err(Error::invalid("global_wasserstein: empty cloud"));
        }
        let (points, weights) = self
            .points
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(p, &w)| (*p, w / total))
            .unzip();
        Ok(Self { points, weights })
    }

    /// Systematic sampling of `cap` equal-mass draws along the cumulative
    /// weight axis; repeated picks of one point are merged.
    fn subsample(&self, cap: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset: f64 = rng.random();
        let share = 1.0 / cap as f64;
        let mut out = Self {
            points: Vec::new(),
            weights: Vec::new(),
        };
        let mut cum = 0.0;
        let mut j = 0;
        let last = self.points.len() - 1;
        let mut last_pick = None;
        for k in 0..cap {
            let t = (offset + k as f64) * share;
            while j < last && cum + self.weights[j] <= t {
                cum += self.weights[j];
                j += 1;
            }
            if last_pick == Some(j) {
                *out.weights.last_mut().unwrap() += share;
            } else {
                out.points.push(self.points[j]);
                out.weights.push(share);
                last_pick = Some(j);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalW {
    pub w2: f64,
    /// At least one side exceeded `cap` and was subsampled.
    pub subsampled: bool,
}

/// Exact 2-Wasserstein distance between two clouds, each renormalized to unit
/// mass. Clouds larger than `cap` are deterministically subsampled with
/// `seed`.
pub fn global_wasserstein(traj: &WeightedCloud, reference: &WeightedCloud, cap: usize, seed: u64) -> Result<GlobalW> {
    if cap == 0 {
        return Err(Error::invalid("global_wasserstein: cap must be >= 1"));
    }
    let mut a = traj.normalized()?;
    let mut b = reference.normalized()?;
    let mut subsampled = false;
    if a.points.len() > cap {
        a = a.subsample(cap, seed);
        subsampled = true;
    }
    if b.points.len() > cap {
        b = b.subsample(cap, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        subsampled = true;
    }
    let cost = DMatrix::from_fn(a.points.len(), b.points.len(), |i, j| {
        (a.points[i] - b.points[j]).norm_squared()
    });
    let defaults = TransportOptions::default();
    let sol = solve_transport_with(
        &TransportProblem {
            supply: a.weights,
            demand: b.weights,
            cost,
        },
        &TransportOptions {
            max_side: cap.max(defaults.max_side),
            ..defaults
        },
    )?;
    Ok(GlobalW {
        w2: sol.cost.max(0.0).sqrt(),
        subsampled,
    })
}
