//! The simulation loop: Stage A, the move, Stage B for every agent, then one
//! Stage C round, repeated until budgets or reference mass run out.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controller::stage_a;
use crate::coordination::sync_round;
use crate::distribution::{agent_alpha, Weights};
use crate::scenario::{AgentSpec, Scenario};
use crate::transport::{global_wasserstein, weight_update, WeightedCloud};
use crate::{Error, Point, Result};

/// Remaining reference mass below which the run stops.
pub const MASS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Run Stages A and B for all agents on the rayon pool.
    pub parallel: bool,
    /// Record per-stage wall times.
    pub timings: bool,
    /// Overrides the scenario's global-W interval.
    pub k_interval: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub stage_a_ms: f64,
    pub stage_b_ms: f64,
    /// Stage C wall time for the whole round plus simulated latency.
    pub stage_c_ms: f64,
}

/// One agent at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Step index, starting at 1.
    pub k: usize,
    pub agent: usize,
    /// Output after this step's move.
    pub y: Point,
    pub u: Vec<f64>,
    pub u_unconstrained: Vec<f64>,
    /// Predicted change of the squared local distance at `u`.
    pub delta_w: f64,
    pub delta_w_unconstrained: f64,
    /// Local distance from the output before the move to this step's
    /// selection.
    pub local_w: f64,
    /// Realized local distance to the same selection `P` moves later.
    pub local_w_ahead: Option<f64>,
    pub in_range: bool,
    pub range_nonempty: bool,
    pub comm_events: usize,
    pub timings: Option<StageTimes>,
    /// State clamped during this step's move.
    pub bound_violation: bool,
    /// State clamped during any of the `P` moves ending at `local_w_ahead`.
    pub window_violation: bool,
    pub constraint_active: bool,
    /// Less than a full agent-point of mass was left.
    pub exhausted: bool,
    /// Row-major `D1`.
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalWRecord {
    pub k: usize,
    pub w2: f64,
    pub subsampled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Remaining mass fell below one agent-point; the agent stops.
    Exhausted,
    /// Nothing left to claim at the start of a step.
    Depleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub k: usize,
    pub agent: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub alpha: f64,
    /// Per agent: agent-points `y^1, y^2, ...` and the mass each received.
    pub trajectories: Vec<Vec<(Point, f64)>>,
    pub initial_positions: Vec<Point>,
    /// Ordered by `(k, agent)`.
    pub records: Vec<StepRecord>,
    pub global_w: Vec<GlobalWRecord>,
    pub events: Vec<Event>,
    pub final_weights: Vec<Weights>,
    pub steps: usize,
}

struct Pending {
    record: usize,
    due: usize,
    points: Vec<Point>,
    taken: Vec<f64>,
    clamped: bool,
}

struct AgentCtx<'a> {
    id: usize,
    spec: &'a AgentSpec,
    x: DVector<f64>,
    y: Point,
    prev_center: Point,
    weights: Weights,
    active: bool,
    points: Vec<(Point, f64)>,
    records: Vec<StepRecord>,
    pending: VecDeque<Pending>,
    events: Vec<Event>,
}

impl AgentCtx<'_> {
    fn advance(&mut self, k: usize, alpha: f64, positions: &[Point], timings: bool) -> Result<()> {
        if !self.active {
            return Ok(());
        }
        if k > self.spec.budget {
            self.active = false;
            return Ok(());
        }
        let available = self.weights.total();
        if available <= 0.0 {
            self.active = false;
            self.events.push(Event {
                k,
                agent: self.id,
                kind: EventKind::Depleted,
            });
            return Ok(());
        }
        let short = available + 1e-12 < alpha;
        let demand = if short { available } else { alpha };
        let sys = &self.spec.system;

        let t0 = Instant::now();
        let dec = stage_a(
            sys,
            &self.x,
            self.weights.as_slice(),
            positions,
            &self.prev_center,
            demand,
            self.spec.constraints.as_ref(),
        )?;
        let local_w = dec.selection.squared_cost(&self.y).sqrt();
        let prop = sys.step(&self.x, &dec.u)?;
        let t1 = Instant::now();

        self.x = prop.x;
        self.y = sys.position(&self.x)?;
        let demand_b = alpha.min(self.weights.total());
        let plan = weight_update(positions, self.weights.as_slice(), &self.y, demand_b)?;
        plan.apply(&mut self.weights);
        let t2 = Instant::now();

        self.prev_center = dec.selection.mass_center;
        self.points.push((self.y, plan.total()));

        let exhausted = short || dec.selection.exhausted;
        let m = dec.gains.input_dim();
        self.records.push(StepRecord {
            k,
            agent: self.id,
            y: self.y,
            u: dec.u.iter().copied().collect(),
            u_unconstrained: dec.u_unconstrained.iter().copied().collect(),
            delta_w: dec.delta_w_pred,
            delta_w_unconstrained: dec.delta_w_unconstrained,
            local_w,
            local_w_ahead: None,
            in_range: dec.in_range,
            range_nonempty: dec.range_nonempty,
            comm_events: 0,
            timings: timings.then(|| StageTimes {
                stage_a_ms: (t1 - t0).as_secs_f64() * 1e3,
                stage_b_ms: (t2 - t1).as_secs_f64() * 1e3,
                stage_c_ms: 0.0,
            }),
            bound_violation: prop.clamped,
            window_violation: false,
            constraint_active: dec.constraint_active,
            exhausted,
            d1: (0..m * m).map(|i| dec.gains.d1[(i / m, i % m)]).collect(),
            d2: dec.gains.d2.iter().copied().collect(),
            d3: dec.gains.d3,
        });
        self.pending.push_back(Pending {
            record: self.records.len() - 1,
            due: k + sys.relative_degree() - 1,
            points: dec.selection.points,
            taken: dec.selection.taken,
            clamped: false,
        });
        for p in self.pending.iter_mut() {
            p.clamped |= prop.clamped;
        }
        while self.pending.front().is_some_and(|p| p.due == k) {
            let p = self.pending.pop_front().unwrap();
            let cost: f64 = p
                .points
                .iter()
                .zip(&p.taken)
                .map(|(q, b)| b * (self.y - q).norm_squared())
                .sum();
            let rec = &mut self.records[p.record];
            rec.local_w_ahead = Some(cost.sqrt());
            rec.window_violation = p.clamped;
        }

        if exhausted {
            self.active = false;
            self.events.push(Event {
                k,
                agent: self.id,
                kind: EventKind::Exhausted,
            });
        }
        Ok(())
    }
}

fn subsample_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn global_w_at(
    ctxs: &[AgentCtx<'_>],
    reference: &WeightedCloud,
    cap: usize,
    seed: u64,
    k: usize,
) -> Result<Option<GlobalWRecord>> {
    let (points, weights): (Vec<Point>, Vec<f64>) = ctxs
        .iter()
        .flat_map(|c| c.points.iter().copied())
        .filter(|(_, m)| *m > 0.0)
        .unzip();
    if points.is_empty() {
        return Ok(None);
    }
    let g = global_wasserstein(
        &WeightedCloud { points, weights },
        reference,
        cap,
        subsample_seed(seed, k),
    )?;
    Ok(Some(GlobalWRecord {
        k,
        w2: g.w2,
        subsampled: g.subsampled,
    }))
}

/// Runs the scenario to completion.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunResult> {
    scenario.validate()?;
    let interval = opts.k_interval.unwrap_or(scenario.global_w.interval);
    if interval == 0 {
        return Err(Error::invalid("global-W interval must be >= 1"));
    }
    let alpha = agent_alpha(&scenario.budgets())?;
    let positions = scenario.reference.positions();
    let reference = WeightedCloud {
        points: positions.to_vec(),
        weights: scenario.reference.weights().to_vec(),
    };
    let mut ctxs = scenario
        .agents
        .iter()
        .enumerate()
        .map(|(id, spec)| {
            let y = spec.system.position(&spec.initial_state)?;
            Ok(AgentCtx {
                id,
                spec,
                x: spec.initial_state.clone(),
                y,
                prev_center: y,
                weights: scenario.reference.agent_weights(),
                active: true,
                points: Vec::new(),
                records: Vec::new(),
                pending: VecDeque::new(),
                events: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let initial_positions = ctxs.iter().map(|c| c.y).collect();
    let max_budget = scenario.budgets().into_iter().max().unwrap_or(0);
    let mut latency_rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5eed_1a7e);
    let mut global_w = Vec::new();
    let mut last_k = 0;

    for k in 1..=max_budget {
        if ctxs.iter().all(|c| !c.active) || ctxs.iter().map(|c| c.weights.total()).fold(0.0, f64::max) < MASS_EPS {
            break;
        }
        if opts.parallel {
            ctxs.par_iter_mut()
                .try_for_each(|c| c.advance(k, alpha, positions, opts.timings))?;
        } else {
            for c in ctxs.iter_mut() {
                c.advance(k, alpha, positions, opts.timings)?;
            }
        }
        last_k = k;

        let t0 = Instant::now();
        let outputs: Vec<Point> = ctxs.iter().map(|c| c.y).collect();
        let mut weights: Vec<Weights> = ctxs.iter_mut().map(|c| std::mem::take(&mut c.weights)).collect();
        let exchanges = sync_round(&mut weights, &outputs, &scenario.comm)?;
        for (c, w) in ctxs.iter_mut().zip(weights) {
            c.weights = w;
        }
        let mut stage_c_ms = (Instant::now() - t0).as_secs_f64() * 1e3;
        if let Some(lat) = &scenario.comm.latency {
            stage_c_ms += lat.overhead_ms(exchanges, &mut latency_rng);
        }
        for c in ctxs.iter_mut() {
            if let Some(rec) = c.records.last_mut().filter(|r| r.k == k) {
                rec.comm_events = exchanges;
                if let Some(t) = rec.timings.as_mut() {
                    t.stage_c_ms = stage_c_ms;
                }
            }
        }

        if k == 1 || k % interval == 0 {
            if let Some(g) = global_w_at(&ctxs, &reference, scenario.global_w.cap, scenario.seed, k)? {
                global_w.push(g);
            }
        }
    }
    if last_k > 0 && global_w.last().is_none_or(|g| g.k != last_k) {
        if let Some(g) = global_w_at(&ctxs, &reference, scenario.global_w.cap, scenario.seed, last_k)? {
            global_w.push(g);
        }
    }

    let mut records: Vec<StepRecord> = Vec::new();
    let mut events = Vec::new();
    let mut trajectories = Vec::new();
    let mut final_weights = Vec::new();
    for c in ctxs {
        records.extend(c.records);
        events.extend(c.events);
        trajectories.push(c.points);
        final_weights.push(c.weights);
    }
    records.sort_by_key(|r| (r.k, r.agent));
    events.sort_by_key(|e| (e.k, e.agent));
    Ok(RunResult {
        alpha,
        trajectories,
        initial_positions,
        records,
        global_w,
        events,
        final_weights,
        steps: last_k,
    })
}

/// Aggregate statistics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub records: usize,
    /// Share of records with `delta_w < 0`.
    pub frac_negative_dw: f64,
    /// Share of records (with a realized look-ahead) where the local distance
    /// decreased over the `P`-step window.
    pub frac_window_decrease: Option<f64>,
    /// Share of consecutive global-W pairs that do not increase.
    pub global_w_monotone: Option<f64>,
    pub initial_global_w: Option<f64>,
    pub final_global_w: Option<f64>,
    pub bound_violations: usize,
    pub mean_stage_a_ms: Option<f64>,
    pub mean_stage_b_ms: Option<f64>,
    pub mean_stage_c_ms: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Summarizes step records and the global-W series.
pub fn replay_metrics(records: &[StepRecord], global_w: &[GlobalWRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::invalid("replay_metrics: no records"));
    }
    let n = records.len() as f64;
    let negative = records.iter().filter(|r| r.delta_w < 0.0).count();
    let windows: Vec<bool> = records
        .iter()
        .filter_map(|r| r.local_w_ahead.map(|a| a < r.local_w))
        .collect();
    let times: Vec<StageTimes> = records.iter().filter_map(|r| r.timings).collect();
    let monotone = (global_w.len() >= 2).then(|| {
        let ok = global_w.windows(2).filter(|w| w[1].w2 <= w[0].w2).count();
        ok as f64 / (global_w.len() - 1) as f64
    });
    Ok(Summary {
        records: records.len(),
        frac_negative_dw: negative as f64 / n,
        frac_window_decrease: (!windows.is_empty())
            .then(|| windows.iter().filter(|&&d| d).count() as f64 / windows.len() as f64),
        global_w_monotone: monotone,
        initial_global_w: global_w.first().map(|g| g.w2),
        final_global_w: global_w.last().map(|g| g.w2),
        bound_violations: records.iter().filter(|r| r.bound_violation).count(),
        mean_stage_a_ms: mean(times.iter().map(|t| t.stage_a_ms)),
        mean_stage_b_ms: mean(times.iter().map(|t| t.stage_b_ms)),
        mean_stage_c_ms: mean(times.iter().map(|t| t.stage_c_ms)),
    })
}

/// Trailing moving average with the given window length.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    xs.windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordination::CommConfig;
    use crate::distribution::SampleCloud;
    use crate::dynamics::{make_preset, InputPolytope, Preset, QuadrotorParams};
    use crate::scenario::GlobalWConfig;

    fn first_order_agent(x: f64, y: f64, budget: usize, constraints: Option<InputPolytope>) -> AgentSpec {
        AgentSpec {
            system: make_preset(Preset::FirstOrder, 0.1, &QuadrotorParams::default()).unwrap(),
            initial_state: DVector::from_vec(vec![x, y]),
            budget,
            constraints,
        }
    }

    fn grid_cloud(n: usize, side: f64) -> SampleCloud {
        let pts = (0..n * n)
            .map(|i| Point::new((i % n) as f64 * side / n as f64, (i / n) as f64 * side / n as f64))
            .collect();
        SampleCloud::uniform(pts).unwrap()
    }

    #[test]
    fn one_step_hand_trace() {
        let q = Point::new(4.0, -2.0);
        let scenario = Scenario {
            agents: vec![first_order_agent(1.0, 1.0, 1, None)],
            reference: SampleCloud::uniform(vec![q]).unwrap(),
            comm: CommConfig::unlimited(),
            global_w: GlobalWConfig::default(),
            seed: 0,
        };
        let out = run(&scenario, &RunOptions::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert!((r.u[0] - 3.0).abs() < 1e-12 && (r.u[1] + 3.0).abs() < 1e-12);
        assert!((r.y - q).norm() < 1e-12);
        assert!(r.delta_w <= 0.0);
        assert!((r.delta_w + 18.0).abs() < 1e-10);
        assert_eq!(out.final_weights[0].total(), 0.0);
        assert_eq!(out.global_w.len(), 1);
        assert!(out.global_w[0].w2.abs() < 1e-12);
        assert_eq!(r.local_w_ahead, Some(0.0));
    }

    #[test]
    fn single_agent_mass_ledger() {
        let scenario = Scenario {
            agents: vec![first_order_agent(0.0, 0.0, 40, None)],
            reference: grid_cloud(7, 10.0),
            comm: CommConfig::unlimited(),
            global_w: GlobalWConfig { interval: 10, cap: 500 },
            seed: 4,
        };
        // replay the loop step by step through a shortened budget series
        for steps in [1usize, 7, 23, 40] {
            let mut s = scenario.clone();
            s.agents[0].budget = steps;
            let out = run(&s, &RunOptions::default()).unwrap();
            let alpha = 1.0 / steps as f64;
            let remaining = out.final_weights[0].total();
            assert!((remaining + out.records.len() as f64 * alpha - 1.0).abs() < 1e-9);
        }
        let out = run(&scenario, &RunOptions::default()).unwrap();
        assert!(out.records.iter().all(|r| r.delta_w < 0.0 || r.local_w == 0.0));
    }

    #[test]
    fn unconstrained_first_order_always_decreases() {
        let scenario = Scenario {
            agents: vec![
                first_order_agent(1.05, 1.3, 60, None),
                first_order_agent(8.7, 9.2, 60, None),
            ],
            reference: grid_cloud(10, 10.0),
            comm: CommConfig::unlimited(),
            global_w: GlobalWConfig { interval: 20, cap: 500 },
            seed: 1,
        };
        let out = run(&scenario, &RunOptions::default()).unwrap();
        assert_eq!(out.records.len(), 120);
        assert!(out.records.iter().all(|r| r.delta_w < 0.0));
        assert!(out.records.iter().all(|r| r.comm_events == 1));
        let s = replay_metrics(&out.records, &out.global_w).unwrap();
        assert_eq!(s.frac_negative_dw, 1.0);
        assert_eq!(out.global_w.first().unwrap().k, 1);
        assert_eq!(out.global_w.last().unwrap().k, 60);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let scenario = Scenario {
            agents: (0..4)
                .map(|r| first_order_agent(r as f64, 2.0 * r as f64, 30, Some(InputPolytope::symmetric_box(2, 1.5))))
                .collect(),
            reference: grid_cloud(9, 12.0),
            comm: CommConfig {
                d_comm: Some(6.0),
                latency: None,
            },
            global_w: GlobalWConfig { interval: 10, cap: 50 },
            seed: 8,
        };
        let a = run(&scenario, &RunOptions::default()).unwrap();
        let b = run(
            &scenario,
            &RunOptions {
                parallel: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.global_w, b.global_w);
        assert!(a.global_w.iter().any(|g| g.subsampled));
    }

    #[test]
    fn exhaustion_stops_agents() {
        // budgets promise more mass than a single point holds per step
        let scenario = Scenario {
            agents: vec![
                first_order_agent(0.0, 0.0, 3, None),
                first_order_agent(5.0, 0.0, 1, None),
            ],
            reference: SampleCloud::uniform(vec![Point::new(1.0, 0.0), Point::new(4.0, 0.0), Point::new(2.0, 2.0)])
                .unwrap(),
            comm: CommConfig::unlimited(),
            global_w: GlobalWConfig::default(),
            seed: 0,
        };
        let out = run(&scenario, &RunOptions::default()).unwrap();
        for w in &out.final_weights {
            assert!(w.total() < 1e-9);
        }
        assert!(out.records.len() <= 4);
    }

    #[test]
    fn replay_examples() {
        let rec = |dw: f64| StepRecord {
            k: 1,
            agent: 0,
            y: Point::zeros(),
            u: vec![0.0, 0.0],
            u_unconstrained: vec![0.0, 0.0],
            delta_w: dw,
            delta_w_unconstrained: dw,
            local_w: 1.0,
            local_w_ahead: Some(0.5),
            in_range: dw < 0.0,
            range_nonempty: true,
            comm_events: 0,
            timings: None,
            bound_violation: false,
            window_violation: false,
            constraint_active: false,
            exhausted: false,
            d1: vec![1.0, 0.0, 0.0, 1.0],
            d2: vec![0.0, 0.0],
            d3: 0.0,
        };
        let all: Vec<_> = (0..5).map(|_| rec(-1.0)).collect();
        assert_eq!(replay_metrics(&all, &[]).unwrap().frac_negative_dw, 1.0);
        let mixed = vec![rec(-1.0), rec(-2.0), rec(0.5), rec(-0.1)];
        assert_eq!(replay_metrics(&mixed, &[]).unwrap().frac_negative_dw, 0.75);
        let gw: Vec<GlobalWRecord> = [5.0, 4.0, 3.0, 1.0]
            .iter()
            .enumerate()
            .map(|(k, &w2)| GlobalWRecord {
                k,
                w2,
                subsampled: false,
            })
            .collect();
        assert_eq!(replay_metrics(&all, &gw).unwrap().global_w_monotone, Some(1.0));
        assert!(replay_metrics(&[], &gw).is_err());
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
    }
}
