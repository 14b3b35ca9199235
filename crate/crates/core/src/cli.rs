//! The `dpc` command line: `run`, `plot` and `validate`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::engine::{replay_metrics, run, RunOptions, Summary};
use crate::output;
use crate::plot::{plot_deltaw, plot_ellipses, plot_global_w, plot_trajectories, PlotKind, Window};
use crate::scenario::{Scenario, ScenarioFile};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dpc", version, about = "Predictive multi-agent coverage simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write CSV outputs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run Stages A and B of all agents in parallel.
        #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
        parallel: bool,
        /// Overrides the global-W evaluation interval.
        #[arg(long = "k-interval")]
        k_interval: Option<usize>,
        /// Record per-stage wall times in metrics.csv (not reproducible).
        #[arg(long)]
        timings: bool,
    },
    /// Render an SVG figure from the CSVs in an output directory.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// trajectories, deltaw, ellipses or globalw.
        #[arg(long)]
        kind: PlotKind,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        window: Option<Vec<usize>>,
        /// Agent index (from 0) for deltaw and ellipses.
        #[arg(long, default_value_t = 0)]
        agent: usize,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn base_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut file = ScenarioFile::read(path)?;
    if let Some(s) = seed {
        file.seed = s;
    }
    file.resolve(base_dir(path))
}

/// Runs a scenario and writes `trajectories.csv`, `metrics.csv`,
/// `global_w.csv` and `reference.csv` into `out_dir`. Nothing is written if
/// the scenario or the run fails.
pub fn cmd_run(scenario_path: &Path, out_dir: &Path, seed: Option<u64>, opts: &RunOptions) -> Result<Summary> {
    let scenario = load(scenario_path, seed)?;
    let result = run(&scenario, opts)?;
    let summary = replay_metrics(&result.records, &result.global_w)?;
    output::write_run(out_dir, &result, &scenario.reference)?;
    Ok(summary)
}

/// Renders one figure into `out_dir/<kind>.svg` and returns its path.
pub fn cmd_plot(out_dir: &Path, kind: PlotKind, window: Option<Window>, agent: usize) -> Result<PathBuf> {
    let svg = match kind {
        PlotKind::Trajectories => plot_trajectories(
            &output::read_reference(&out_dir.join(output::REFERENCE))?,
            &output::read_trajectories(&out_dir.join(output::TRAJECTORIES))?,
            window,
        )?,
        PlotKind::DeltaW => {
            let records = output::read_metrics(&out_dir.join(output::METRICS))?;
            let p = infer_relative_degree(&records, agent);
            plot_deltaw(&records, agent, p, window)?
        }
        PlotKind::Ellipses => plot_ellipses(&output::read_metrics(&out_dir.join(output::METRICS))?, agent, window)?,
        PlotKind::GlobalW => plot_global_w(&output::read_global_w(&out_dir.join(output::GLOBAL_W))?, window)?,
    };
    let path = out_dir.join(kind.file_name());
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Smallest look-ahead consistent with the realized-distance column: the
/// last `P - 1` records of an agent never get one.
fn infer_relative_degree(records: &[crate::engine::StepRecord], agent: usize) -> usize {
    let mine: Vec<_> = records.iter().filter(|r| r.agent == agent).collect();
    let missing = mine.iter().rev().take_while(|r| r.local_w_ahead.is_none()).count();
    missing + 1
}

/// Checks schema, dimensions and constraint feasibility.
pub fn cmd_validate(scenario_path: &Path) -> Result<String> {
    let s = load(scenario_path, None)?;
    let p: Vec<String> = s
        .agents
        .iter()
        .map(|a| a.system.relative_degree().to_string())
        .collect();
    Ok(format!(
        "{}: valid ({} agents, {} sample-points, relative degree {})",
        scenario_path.display(),
        s.agents.len(),
        s.reference.len(),
        p.join("/")
    ))
}

fn describe(s: &Summary) -> String {
    let mut out = format!(
        "{} agent-steps, dW<0 in {:.1}% of steps",
        s.records,
        100.0 * s.frac_negative_dw
    );
    if let Some(f) = s.frac_window_decrease {
        out += &format!(", look-ahead decrease in {:.1}%", 100.0 * f);
    }
    if let (Some(a), Some(b)) = (s.initial_global_w, s.final_global_w) {
        out += &format!(", global W2 {a:.4} -> {b:.4}");
    }
    if s.bound_violations > 0 {
        out += &format!(", {} state-bound clamps", s.bound_violations);
    }
    out
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let res = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            parallel,
            k_interval,
            timings,
        } => cmd_run(
            &scenario,
            &out,
            seed,
            &RunOptions {
                parallel,
                timings,
                k_interval,
            },
        )
        .map(|s| describe(&s)),
        Command::Plot {
            out,
            kind,
            window,
            agent,
        } => window
            .map(|w| Window::new(w[0], w[1]))
            .transpose()
            .and_then(|w| cmd_plot(&out, kind, w, agent))
            .map(|p| format!("wrote {}", p.display())),
        Command::Validate { scenario } => cmd_validate(&scenario),
    };
    match res {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
