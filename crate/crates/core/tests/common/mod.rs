//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use dpc::dynamics::LtiSystem;
use dpc::Point;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random system with planar output and relative degree `p`.
///
/// The state is `p` stacked 2-vectors. `A` is block upper Hessenberg, so an
/// input entering the last block needs `p - 1` steps to reach the first one,
/// which is the output. Inputs beyond the second also drive one decoupled
/// integrator each, which keeps `B` full column rank.
pub fn random_chain_system<R: Rng>(rng: &mut R, p: usize, inputs: usize) -> LtiSystem {
    let chain = 2 * p;
    let extra = inputs.saturating_sub(2);
    let n = chain + extra;
    let mut a = DMatrix::identity(n, n);
    for bi in 0..p {
        for bj in 0..p {
            if bj > bi + 1 {
                continue;
            }
            for r in 0..2 {
                for c in 0..2 {
                    let v = if bj == bi {
                        (r == c) as u8 as f64 + rng.random_range(-0.1..0.1)
                    } else if bj == bi + 1 {
                        (r == c) as u8 as f64 * 0.5 + rng.random_range(-0.3..0.3)
                    } else {
                        rng.random_range(-0.1..0.1)
                    };
                    a[(2 * bi + r, 2 * bj + c)] = v;
                }
            }
        }
    }
    let mut b = DMatrix::zeros(n, inputs);
    for r in 0..2 {
        for c in 0..inputs {
            b[(chain - 2 + r, c)] = rng.random_range(-1.0..1.0);
        }
    }
    for e in 0..extra {
        b[(chain + e, 2 + e)] = 1.0;
    }
    let mut c = DMatrix::zeros(2, n);
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    LtiSystem::new(a, b, c, 0.1).expect("random chain system")
}

pub fn random_state<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..scale), rng.random_range(0.0..scale)))
        .collect()
}

/// Random positive weights summing to one.
pub fn random_masses<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Minimum of `sum t_j c_j` over `0 <= t_j <= cap_j`, `sum t_j = demand`, by
/// enumerating every basic solution: each point is empty or full except at
/// most one.
pub fn capped_fill_by_vertices(costs: &[f64], caps: &[f64], demand: f64) -> Option<f64> {
    let n = costs.len();
    assert!(n <= 16);
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << n) {
        let full: f64 = (0..n).filter(|j| mask >> j & 1 == 1).map(|j| caps[j]).sum();
        let base: f64 = (0..n).filter(|j| mask >> j & 1 == 1).map(|j| caps[j] * costs[j]).sum();
        let mut consider = |v: f64| {
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        };
        let rest = demand - full;
        if rest.abs() <= 1e-14 {
            consider(base);
        }
        for f in (0..n).filter(|j| mask >> j & 1 == 0) {
            if rest >= 0.0 && rest <= caps[f] {
                consider(base + rest * costs[f]);
            }
        }
    }
    best
}

/// Dense two-phase tableau simplex with Bland's rule for
/// `min c'x  s.t.  A x = b, x >= 0`. Returns the optimal value.
pub fn lp_min(c: &[f64], a: &DMatrix<f64>, b: &[f64]) -> Option<f64> {
    let (m, n) = a.shape();
    assert_eq!(b.len(), m);
    assert_eq!(c.len(), n);
    // columns: n structural, m artificial, then rhs
    let width = n + m + 1;
    let mut t = DMatrix::zeros(m, width);
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = sign * a[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, width - 1)] = sign * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    const EPS: f64 = 1e-12;

    let run = |t: &mut DMatrix<f64>, basis: &mut Vec<usize>, cost: &[f64], allowed: usize| -> bool {
        for _ in 0..100_000 {
            let reduced = |j: usize, t: &DMatrix<f64>, basis: &[usize]| {
                cost[j] - (0..m).map(|i| cost[basis[i]] * t[(i, j)]).sum::<f64>()
            };
            let Some(enter) = (0..allowed).find(|&j| !basis.contains(&j) && reduced(j, t, basis) < -1e-11) else {
                return true;
            };
            let mut leave: Option<(f64, usize, usize)> = None;
            for i in 0..m {
                let piv = t[(i, enter)];
                if piv > EPS {
                    let ratio = t[(i, width - 1)] / piv;
                    let better = match leave {
                        None => true,
                        Some((r, _, bi)) => ratio < r - 1e-14 || (ratio <= r + 1e-14 && basis[i] < bi),
                    };
                    if better {
                        leave = Some((ratio, i, basis[i]));
                    }
                }
            }
            let Some((_, row, _)) = leave else {
                return false;
            };
            pivot(t, row, enter);
            basis[row] = enter;
        }
        panic!("lp_min: iteration limit");
    };

    let mut phase1 = vec![0.0; n + m];
    for v in &mut phase1[n..] {
        *v = 1.0;
    }
    run(&mut t, &mut basis, &phase1, n + m);
    let infeas: f64 = (0..m).filter(|&i| basis[i] >= n).map(|i| t[(i, width - 1)]).sum();
    if infeas > 1e-9 {
        return None;
    }
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[(i, j)].abs() > 1e-9 && !basis.contains(&j)) {
                pivot(&mut t, i, j);
                basis[i] = j;
            }
        }
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, m));
    if !run(&mut t, &mut basis, &phase2, n) {
        return None;
    }
    Some(
        (0..m)
            .filter(|&i| basis[i] < n)
            .map(|i| c[basis[i]] * t[(i, width - 1)])
            .sum(),
    )
}

fn pivot(t: &mut DMatrix<f64>, row: usize, col: usize) {
    let p = t[(row, col)];
    let width = t.ncols();
    for j in 0..width {
        t[(row, j)] /= p;
    }
    for i in 0..t.nrows() {
        if i != row {
            let f = t[(i, col)];
            if f != 0.0 {
                for j in 0..width {
                    t[(i, j)] -= f * t[(row, j)];
                }
            }
        }
    }
}

/// Optimal transport cost between `supply` and `demand` as a plain LP.
pub fn transport_by_lp(supply: &[f64], demand: &[f64], cost: &DMatrix<f64>) -> f64 {
    let (r, c) = (supply.len(), demand.len());
    let mut a = DMatrix::zeros(r + c, r * c);
    for i in 0..r {
        for j in 0..c {
            a[(i, i * c + j)] = 1.0;
            a[(r + j, i * c + j)] = 1.0;
        }
    }
    let b: Vec<f64> = supply.iter().chain(demand).copied().collect();
    let cvec: Vec<f64> = (0..r * c).map(|k| cost[(k / c, k % c)]).collect();
    lp_min(&cvec, &a, &b).expect("balanced transport is feasible")
}

/// Squared-distance cost matrix between two clouds.
pub fn sq_cost(a: &[Point], b: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| (a[i] - b[j]).norm_squared())
}
