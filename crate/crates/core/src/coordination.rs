//! Stage C: agents within communication range merge their weight vectors by
//! elementwise minimum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::Weights;
use crate::{Error, Point, Result};

/// Simulated per-exchange latency, uniform in `mean_ms +- jitter_ms` and
/// floored at zero. Only feeds the reported overhead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub mean_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_ms >= 0.0 && self.jitter_ms >= 0.0) || !self.mean_ms.is_finite() || !self.jitter_ms.is_finite() {
            return Err(Error::invalid("latency must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Total simulated delay for `exchanges` pairwise messages.
    pub fn overhead_ms<R: Rng>(&self, exchanges: usize, rng: &mut R) -> f64 {
        (0..exchanges)
            .map(|_| {
                let j = if self.jitter_ms > 0.0 {
                    rng.random_range(-self.jitter_ms..=self.jitter_ms)
                } else {
                    0.0
                };
                (self.mean_ms + j).max(0.0)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommConfig {
    /// Communication range in meters; `None` means unlimited.
    #[serde(default)]
    pub d_comm: Option<f64>,
    #[serde(default)]
    pub latency: Option<LatencyModel>,
}

impl CommConfig {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.d_comm {
            if !(d > 0.0) {
                return Err(Error::invalid(format!("d_comm must be positive, got {d}")));
            }
        }
        if let Some(l) = &self.latency {
            l.validate()?;
        }
        Ok(())
    }

    pub fn in_range(&self, a: &Point, b: &Point) -> bool {
        self.d_comm.is_none_or(|d| (a - b).norm() <= d)
    }
}

/// Elementwise minimum of two weight vectors, returned for both agents.
pub fn share_weights(r: &[f64], s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if r.len() != s.len() {
        return Err(Error::dims("share_weights", r.len(), s.len()));
    }
    let m: Vec<f64> = r.iter().zip(s).map(|(a, b)| a.min(*b)).collect();
    Ok((m.clone(), m))
}

fn share_in_place(weights: &mut [Weights], r: usize, s: usize) {
    let (lo, hi) = weights.split_at_mut(s);
    let (a, b) = (&mut lo[r], &mut hi[0]);
    a.min_with(b.as_slice());
    b.min_with(a.as_slice());
}

/// Pairs `(r, s)`, `r < s`, within communication range, in ascending order.
pub fn communicating_pairs(positions: &[Point], cfg: &CommConfig) -> Vec<(usize, usize)> {
    let l = positions.len();
    let mut pairs = Vec::with_capacity(l * l.saturating_sub(1) / 2);
    for r in 0..l {
        for s in r + 1..l {
            if cfg.in_range(&positions[r], &positions[s]) {
                pairs.push((r, s));
            }
        }
    }
    pairs
}

/// One synchronization round over all agents; returns the number of pairwise
/// exchanges.
pub fn sync_round(weights: &mut [Weights], positions: &[Point], cfg: &CommConfig) -> Result<usize> {
    if weights.len() != positions.len() {
        return Err(Error::dims("sync_round positions", weights.len(), positions.len()));
    }
    if let Some(first) = weights.first() {
        if let Some(w) = weights.iter().find(|w| w.len() != first.len()) {
            return Err(Error::dims("sync_round weights", first.len(), w.len()));
        }
    }
    let pairs = communicating_pairs(positions, cfg);
    for &(r, s) in &pairs {
        share_in_place(weights, r, s);
    }
    Ok(pairs.len())
}
