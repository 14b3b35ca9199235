//! Reference sample-point clouds and per-agent weight bookkeeping.

use std::path::Path;

use nalgebra::Matrix2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Point, Result};

/// Weights below this are stored as exactly zero.
pub const WEIGHT_SNAP: f64 = 1e-12;

/// Reference distribution: sample-point positions and their initial weights
/// (summing to one).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    positions: Vec<Point>,
    weights: Vec<f64>,
}

impl SampleCloud {
    /// Normalizes `weights` to unit total.
    pub fn new(positions: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("sample cloud is empty"));
        }
        if positions.len() != weights.len() {
            return Err(Error::dims("sample weights", positions.len(), weights.len()));
        }
        if positions.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid("sample positions must be finite"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("sample weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("sample weights sum to zero"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { positions, weights })
    }

    pub fn uniform(positions: Vec<Point>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, vec![1.0; n])
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Fresh copy of the reference weights for one agent.
    pub fn agent_weights(&self) -> Weights {
        Weights::new(self.weights.clone())
    }
}

/// One agent's view of the remaining reference mass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(mut w: Vec<f64>) -> Self {
        w.iter_mut().for_each(snap);
        Weights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Removes `amount` from point `j`, never going below zero.
    pub fn take(&mut self, j: usize, amount: f64) {
        let w = &mut self.0[j];
        *w = (*w - amount).max(0.0);
        snap(w);
    }

    /// Elementwise minimum with `other`.
    pub fn min_with(&mut self, other: &[f64]) {
        for (a, &b) in self.0.iter_mut().zip(other) {
            if b < *a {
                *a = b;
            }
        }
    }
}

fn snap(w: &mut f64) {
    if *w < WEIGHT_SNAP {
        *w = 0.0;
    }
}

/// `1 / sum(M_r)`: the common mass of every agent-point.
pub fn agent_alpha(budgets: &[usize]) -> Result<f64> {
    if budgets.is_empty() {
        return Err(Error::invalid("agent_alpha: no agents"));
    }
    if budgets.contains(&0) {
        return Err(Error::invalid("agent_alpha: every budget must be >= 1"));
    }
    Ok(1.0 / budgets.iter().sum::<usize>() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub mean: [f64; 2],
    /// Row-major 2x2 covariance.
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Domain {
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x[0] && p.x <= self.x[1] && p.y >= self.y[0] && p.y <= self.y[1]
    }

    pub fn square(side: f64) -> Self {
        Domain {
            x: [0.0, side],
            y: [0.0, side],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<GaussianComponent>,
    pub n_samples: usize,
    pub seed: u64,
    pub domain: Domain,
}

const MAX_REJECTIONS_PER_SAMPLE: usize = 10_000;

/// Draws `n_samples` points from the mixture, redrawing any that land outside
/// the domain. Deterministic in `seed`; every point gets weight `1/N`.
pub fn sample_mixture(spec: &MixtureSpec) -> Result<SampleCloud> {
    if spec.n_samples == 0 {
        return Err(Error::invalid("mixture: n_samples must be >= 1"));
    }
    if spec.components.is_empty() {
        return Err(Error::invalid("mixture: no components"));
    }
    let d = &spec.domain;
    if !(d.x[0] < d.x[1] && d.y[0] < d.y[1]) {
        return Err(Error::invalid("mixture: empty domain"));
    }
    let wsum: f64 = spec.components.iter().map(|c| c.weight).sum();
    if spec.components.iter().any(|c| !(c.weight >= 0.0)) || (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("mixture: weights must be nonnegative and sum to 1"));
    }
    let factors = spec
        .components
        .iter()
        .map(|c| {
            let cov = Matrix2::new(c.cov[0][0], c.cov[0][1], c.cov[1][0], c.cov[1][1]);
            if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 * cov.amax() {
                return Err(Error::invalid("mixture: covariance is not symmetric"));
            }
            cov.cholesky()
                .map(|ch| ch.l())
                .ok_or_else(|| Error::invalid("mixture: covariance is not positive definite"))
        })
        .collect::<Result<Vec<_>>>()?;
    let picker = WeightedIndex::new(spec.components.iter().map(|c| c.weight))
        .map_err(|e| Error::invalid(format!("mixture: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let mut tries = 0;
        let p = loop {
            let k = picker.sample(&mut rng);
            let z = nalgebra::Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            let m = &spec.components[k].mean;
            let p = Point::new(m[0], m[1]) + factors[k] * z;
            if d.contains(&p) {
                break p;
            }
            tries += 1;
            if tries >= MAX_REJECTIONS_PER_SAMPLE {
                return Err(Error::invalid("mixture: domain captures almost no mass"));
            }
        };
        positions.push(p);
    }
    SampleCloud::uniform(positions)
}

/// Reads `x,y[,weight]` rows. A first row that does not parse as numbers is
/// taken as a header. Missing weights mean uniform.
pub fn load_points(path: &Path) -> Result<SampleCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_points(file)
}

pub fn read_points<R: std::io::Read>(reader: R) -> Result<SampleCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    let mut any_weight = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(Error::invalid(format!("points row {}: not numeric", line + 1)));
            }
        };
        if !(vals.len() == 2 || vals.len() == 3) {
            return Err(Error::invalid(format!(
                "points row {}: expected 2 or 3 fields, got {}",
                line + 1,
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("points row {}: non-finite value", line + 1)));
        }
        let has_w = vals.len() == 3;
        if *any_weight.get_or_insert(has_w) != has_w {
            return Err(Error::invalid("points: weight column present on some rows only"));
        }
        if has_w && vals[2] < 0.0 {
            return Err(Error::invalid(format!("points row {}: negative weight", line + 1)));
        }
        positions.push(Point::new(vals[0], vals[1]));
        weights.push(if has_w { vals[2] } else { 1.0 });
    }
    if positions.is_empty() {
        return Err(Error::invalid("points file is empty"));
    }
    SampleCloud::new(positions, weights)
}
