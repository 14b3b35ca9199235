//! Exact solver for the balanced transportation problem.
//!
//! Transportation simplex on the bipartite spanning-tree basis. Pricing uses
//! a block search (most negative reduced cost within a rotating window);
//! after a run of degenerate pivots it falls back to Bland's rule until the
//! objective strictly improves again, which rules out cycling.

use nalgebra::DMatrix;

use super::all_finite;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    /// `supply.len() x demand.len()` unit costs.
    pub cost: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TransportOptions {
    /// Largest accepted side length; bigger problems must be subsampled.
    pub max_side: usize,
    pub balance_tol: f64,
    pub max_iter: usize,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self {
            max_side: 500,
            balance_tol: 1e-9,
            max_iter: 5_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow {
    pub from: usize,
    pub to: usize,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// Nonzero entries of the optimal plan, ordered by (from, to).
    pub flows: Vec<Flow>,
    pub cost: f64,
    pub pivots: usize,
}

impl TransportSolution {
    pub fn dense(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows, cols);
        for f in &self.flows {
            out[(f.from, f.to)] += f.mass;
        }
        out
    }
}

pub fn solve_transport_exact(tp: &TransportProblem) -> Result<TransportSolution> {
    solve_transport_with(tp, &TransportOptions::default())
}

pub fn solve_transport_with(tp: &TransportProblem, opts: &TransportOptions) -> Result<TransportSolution> {
    let m = tp.supply.len();
    let n = tp.demand.len();
    if m == 0 || n == 0 {
        return Err(Error::invalid("transport: empty supply or demand"));
    }
    if tp.cost.shape() != (m, n) {
        return Err(Error::dims(
            "transport cost",
            format!("{m}x{n}"),
            format!("{:?}", tp.cost.shape()),
        ));
    }
    if m > opts.max_side || n > opts.max_side {
        return Err(Error::SizeExceeded {
            rows: m,
            cols: n,
            cap: opts.max_side,
        });
    }
    let masses_ok = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
    if !masses_ok(&tp.supply) || !masses_ok(&tp.demand) {
        return Err(Error::invalid("transport: masses must be finite and nonnegative"));
    }
    if !all_finite(&tp.cost) {
        return Err(Error::invalid("transport: non-finite cost"));
    }
    let s_sum: f64 = tp.supply.iter().sum();
    let d_sum: f64 = tp.demand.iter().sum();
    if (s_sum - d_sum).abs() > opts.balance_tol {
        return Err(Error::invalid(format!(
            "transport: unbalanced masses (supply {s_sum}, demand {d_sum})"
        )));
    }

    let mut tree = Basis::northwest(&tp.supply, &tp.demand);
    let pivots = tree.optimize(&tp.cost, opts.max_iter)?;

    let mut flows: Vec<Flow> = tree
        .cells
        .iter()
        .filter(|c| c.flow > 0.0)
        .map(|c| Flow {
            from: c.i,
            to: c.j,
            mass: c.flow,
        })
        .collect();
    flows.sort_by_key(|f| (f.from, f.to));
    let cost = flows.iter().map(|f| f.mass * tp.cost[(f.from, f.to)]).sum();
    Ok(TransportSolution { flows, cost, pivots })
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    i: usize,
    j: usize,
    flow: f64,
}

/// Spanning tree over `m` row nodes and `n` column nodes (ids `m..m+n`).
struct Basis {
    m: usize,
    n: usize,
    cells: Vec<Cell>,
    /// node -> indices into `cells`
    adj: Vec<Vec<usize>>,
}

const NONE: usize = usize::MAX;

impl Basis {
    fn northwest(supply: &[f64], demand: &[f64]) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let mut cells = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = s[i].min(d[j]);
            cells.push(Cell { i, j, flow: x });
            s[i] -= x;
            d[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && s[i] <= d[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(cells.len(), m + n - 1);
        let mut adj = vec![Vec::new(); m + n];
        for (k, c) in cells.iter().enumerate() {
            adj[c.i].push(k);
            adj[m + c.j].push(k);
        }
        Basis { m, n, cells, adj }
    }

    fn other_end(&self, cell: usize, node: usize) -> usize {
        let c = &self.cells[cell];
        if node == c.i {
            self.m + c.j
        } else {
            c.i
        }
    }

    fn potentials(&self, cost: &DMatrix<f64>, u: &mut [f64], v: &mut [f64], stack: &mut Vec<usize>) {
        let m = self.m;
        let mut seen = vec![false; m + self.n];
        u[0] = 0.0;
        seen[0] = true;
        stack.clear();
        stack.push(0);
        while let Some(node) = stack.pop() {
            for &k in &self.adj[node] {
                let next = self.other_end(k, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let c = self.cells[k];
                let cij = cost[(c.i, c.j)];
                if next >= m {
                    v[next - m] = cij - u[c.i];
                } else {
                    u[next] = cij - v[c.j];
                }
                stack.push(next);
            }
        }
    }

    /// Tree path from column node of `j` to row node `i`, as cell indices in
    /// walk order starting next to the column.
    fn path(&self, i: usize, j: usize, prev: &mut [usize], stack: &mut Vec<usize>) -> Vec<usize> {
        let target = self.m + j;
        prev.iter_mut().for_each(|p| *p = NONE);
        let mut seen = vec![false; self.m + self.n];
        seen[i] = true;
        stack.clear();
        stack.push(i);
        'search: while let Some(node) = stack.pop() {
            for &k in &self.adj[node] {
                let next = self.other_end(k, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                prev[next] = k;
                if next == target {
                    break 'search;
                }
                stack.push(next);
            }
        }
        let mut out = Vec::new();
        let mut node = target;
        while node != i {
            let k = prev[node];
            debug_assert_ne!(k, NONE, "basis is not a spanning tree");
            out.push(k);
            node = self.other_end(k, node);
        }
        out
    }

    fn optimize(&mut self, cost: &DMatrix<f64>, max_iter: usize) -> Result<usize> {
        let (m, n) = (self.m, self.n);
        let total = m * n;
        let cmax = cost.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
        let eps = 1e-12 * cmax.max(1.0);
        let block = ((total as f64).sqrt().ceil() as usize).clamp(16, total.max(16));
        let degenerate_limit = m + n;

        let mut u = vec![0.0; m];
        let mut v = vec![0.0; n];
        let mut prev = vec![NONE; m + n];
        let mut stack = Vec::with_capacity(m + n);
        let mut cursor = 0usize;
        let mut degenerate_run = 0usize;

        for iter in 0..max_iter {
            self.potentials(cost, &mut u, &mut v, &mut stack);
            let bland = degenerate_run > degenerate_limit;

            let entering = if bland {
                (0..total).find(|&idx| {
                    let (i, j) = (idx / n, idx % n);
                    cost[(i, j)] - u[i] - v[j] < -eps
                })
            } else {
                let mut best = None;
                let mut best_r = -eps;
                let mut scanned = 0;
                while scanned < total {
                    let end = (scanned + block).min(total);
                    for _ in scanned..end {
                        let (i, j) = (cursor / n, cursor % n);
                        let r = cost[(i, j)] - u[i] - v[j];
                        if r < best_r {
                            best_r = r;
                            best = Some(cursor);
                        }
                        cursor += 1;
                        if cursor == total {
                            cursor = 0;
                        }
                    }
                    scanned = end;
                    if best.is_some() {
                        break;
                    }
                }
                best
            };
            let Some(idx) = entering else {
                return Ok(iter);
            };
            let (ei, ej) = (idx / n, idx % n);

            let path = self.path(ei, ej, &mut prev, &mut stack);
            // odd positions along the walk from the column lose mass
            let mut theta = f64::INFINITY;
            let mut leave = NONE;
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 != 0 {
                    continue;
                }
                let c = self.cells[k];
                let better = c.flow < theta
                    || (bland
                        && c.flow == theta
                        && (c.i * n + c.j) < {
                            let l = self.cells[leave];
                            l.i * n + l.j
                        });
                if better {
                    theta = c.flow;
                    leave = k;
                }
            }
            debug_assert_ne!(leave, NONE);

            for (pos, &k) in path.iter().enumerate() {
                if k == leave {
                    continue;
                }
                let cell = &mut self.cells[k];
                if pos % 2 == 0 {
                    cell.flow = (cell.flow - theta).max(0.0);
                } else {
                    cell.flow += theta;
                }
            }
            if theta > 0.0 {
                degenerate_run = 0;
            } else {
                degenerate_run += 1;
            }

            // swap the leaving cell for the entering one in place
            let old = self.cells[leave];
            self.adj[old.i].retain(|&k| k != leave);
            self.adj[m + old.j].retain(|&k| k != leave);
            self.cells[leave] = Cell {
                i: ei,
                j: ej,
                flow: theta,
            };
            self.adj[ei].push(leave);
            self.adj[m + ej].push(leave);
        }
        Err(Error::NoConvergence(max_iter))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_cost(xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), ys.len(), |i, j| (xs[i] - ys[j]).powi(2))
    }

    #[test]
    fn single_pair() {
        let tp = TransportProblem {
            supply: vec![1.0],
            demand: vec![1.0],
            cost: DMatrix::from_element(1, 1, 25.0),
        };
        let sol = solve_transport_exact(&tp).unwrap();
        assert_eq!(
            sol.flows,
            vec![Flow {
                from: 0,
                to: 0,
                mass: 1.0
            }]
        );
        assert_eq!(sol.cost, 25.0);
        assert_eq!(sol.cost.sqrt(), 5.0);
    }

    #[test]
    fn identical_clouds_cost_zero() {
        let xs = [0.0, 1.0, 3.0, 7.0];
        let w = vec![0.1, 0.2, 0.3, 0.4];
        let tp = TransportProblem {
            supply: w.clone(),
            demand: w,
            cost: line_cost(&xs, &xs),
        };
        assert!(solve_transport_exact(&tp).unwrap().cost.abs() < 1e-15);
    }

    #[test]
    fn shifted_pair_matches_brute_force() {
        let tp = TransportProblem {
            supply: vec![0.5, 0.5],
            demand: vec![0.5, 0.5],
            cost: line_cost(&[0.0, 1.0], &[1.0, 2.0]),
        };
        // feasible plans: [[t, .5-t], [.5-t, t]], t in [0, .5]
        let brute = (0..=5000)
            .map(|k| {
                let t = 0.5 * k as f64 / 5000.0;
                let p = [[t, 0.5 - t], [0.5 - t, t]];
                (0..2)
                    .flat_map(|i| (0..2).map(move |j| (i, j)))
                    .map(|(i, j)| p[i][j] * tp.cost[(i, j)])
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((brute - 1.0).abs() < 1e-12);
        let sol = solve_transport_exact(&tp).unwrap();
        assert!((sol.cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plan_is_feasible_with_zero_masses() {
        let tp = TransportProblem {
            supply: vec![0.0, 0.6, 0.4, 0.0],
            demand: vec![0.3, 0.0, 0.7],
            cost: DMatrix::from_fn(4, 3, |i, j| ((i * 7 + j * 3) % 5) as f64),
        };
        let sol = solve_transport_exact(&tp).unwrap();
        let p = sol.dense(4, 3);
        for i in 0..4 {
            assert!((p.row(i).sum() - tp.supply[i]).abs() < 1e-12);
        }
        for j in 0..3 {
            assert!((p.column(j).sum() - tp.demand[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_unbalanced_and_oversized() {
        let tp = TransportProblem {
            supply: vec![1.0],
            demand: vec![0.5],
            cost: DMatrix::zeros(1, 1),
        };
        assert!(matches!(solve_transport_exact(&tp), Err(Error::InvalidInput(_))));
        let tp = TransportProblem {
            supply: vec![1.0 / 501.0; 501],
            demand: vec![1.0],
            cost: DMatrix::zeros(501, 1),
        };
        assert!(matches!(
            solve_transport_exact(&tp),
            Err(Error::SizeExceeded { cap: 500, .. })
        ));
    }

    #[test]
    fn sorted_line_matching_is_monotone() {
        // on a line with squared cost the optimum is the quantile coupling
        let xs: Vec<f64> = (0..40).map(|k| ((k * 37) % 40) as f64 * 0.5).collect();
        let ys: Vec<f64> = (0..40).map(|k| ((k * 13) % 40) as f64 * 0.7 + 1.0).collect();
        let w = vec![1.0 / 40.0; 40];
        let tp = TransportProblem {
            supply: w.clone(),
            demand: w,
            cost: line_cost(&xs, &ys),
        };
        let mut a = xs.clone();
        let mut b = ys.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2) / 40.0).sum();
        let sol = solve_transport_exact(&tp).unwrap();
        assert!((sol.cost - expect).abs() < 1e-10);
    }
}
