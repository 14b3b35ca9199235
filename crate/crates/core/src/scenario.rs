//! Scenario files (JSON) and their validated in-memory form.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coordination::CommConfig;
use crate::distribution::{load_points, sample_mixture, Domain, GaussianComponent, MixtureSpec, SampleCloud};
use crate::dynamics::{make_preset, InputPolytope, Interval, LtiSystem, Preset, QuadrotorParams};
use crate::numerics::{solve_psd_qp, PsdQp};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    /// Default model for agents that do not name their own.
    #[serde(default)]
    pub system: Option<SystemSpec>,
    pub agents: Vec<AgentEntry>,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub comm: CommConfig,
    #[serde(default)]
    pub input_constraints: ConstraintSpec,
    #[serde(default)]
    pub global_w: GlobalWConfig,
    #[serde(default = "yes")]
    pub enforce_state_bounds: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub initial_state: Vec<f64>,
    pub budget: usize,
    #[serde(default)]
    pub system: Option<SystemSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Preset {
        name: Preset,
        dt: f64,
        #[serde(default)]
        params: QuadrotorParams,
    },
    Matrices {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        dt: f64,
        /// `[lo, hi]` per state; `null` leaves that side open.
        #[serde(default)]
        state_bounds: Option<Vec<[Option<f64>; 2]>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Mixture(MixtureSection),
    /// CSV of `x,y[,weight]`, relative to the scenario file.
    File(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub components: Vec<GaussianComponent>,
    pub n_samples: usize,
    /// Defaults to the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub domain: Domain,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    #[default]
    Unconstrained,
    /// `|u_i| <= u_max`.
    Box {
        u_max: f64,
    },
    Polytope {
        cu: Vec<Vec<f64>>,
        du: Vec<f64>,
    },
    /// The input bounds attached to the model preset.
    Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalWConfig {
    /// Evaluate every `interval` steps (plus the first and last step).
    pub interval: usize,
    /// Per-side point cap for the exact solver.
    pub cap: usize,
}

impl Default for GlobalWConfig {
    fn default() -> Self {
        Self { interval: 50, cap: 500 }
    }
}

/// One agent, fully resolved.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub system: LtiSystem,
    pub initial_state: DVector<f64>,
    pub budget: usize,
    pub constraints: Option<InputPolytope>,
}

/// Validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub agents: Vec<AgentSpec>,
    pub reference: SampleCloud,
    pub comm: CommConfig,
    pub global_w: GlobalWConfig,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::scenario("agents", "at least one agent is required"));
        }
        let m = self.agents[0].system.input_dim();
        for (r, a) in self.agents.iter().enumerate() {
            let field = |f: &str| format!("agents[{r}].{f}");
            if a.budget == 0 {
                return Err(Error::scenario(field("budget"), "must be >= 1"));
            }
            if a.system.output_dim() != 2 {
                return Err(Error::scenario(field("system"), "output must be planar (p = 2)"));
            }
            if a.system.input_dim() != m {
                return Err(Error::scenario(
                    field("system"),
                    "all agents must share the input dimension",
                ));
            }
            if a.initial_state.len() != a.system.state_dim() {
                return Err(Error::scenario(
                    field("initial_state"),
                    format!(
                        "expected {} entries, got {}",
                        a.system.state_dim(),
                        a.initial_state.len()
                    ),
                ));
            }
            if a.initial_state.iter().any(|v| !v.is_finite()) {
                return Err(Error::scenario(field("initial_state"), "must be finite"));
            }
            if let Some(poly) = &a.constraints {
                check_polytope(poly, a.system.input_dim(), &format!("agents[{r}] input constraints"))?;
            }
        }
        self.comm
            .validate()
            .map_err(|e| Error::scenario("comm", e.to_string()))?;
        if self.global_w.interval == 0 {
            return Err(Error::scenario("global_w.interval", "must be >= 1"));
        }
        if self.global_w.cap == 0 {
            return Err(Error::scenario("global_w.cap", "must be >= 1"));
        }
        Ok(())
    }

    pub fn budgets(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.budget).collect()
    }
}

fn check_polytope(poly: &InputPolytope, m: usize, field: &str) -> Result<()> {
    if poly.cu.ncols() != m {
        return Err(Error::scenario(
            format!("{field}.cu"),
            format!("expected {m} columns, got {}", poly.cu.ncols()),
        ));
    }
    if poly.du.len() != poly.cu.nrows() {
        return Err(Error::scenario(
            format!("{field}.du"),
            format!(
                "expected {} entries to match cu rows, got {}",
                poly.cu.nrows(),
                poly.du.len()
            ),
        ));
    }
    let probe = PsdQp {
        h: DMatrix::zeros(m, m),
        g: DVector::zeros(m),
        cu: poly.cu.clone(),
        du: poly.du.clone(),
    };
    match solve_psd_qp(&probe, 1e-8) {
        Ok(_) => Ok(()),
        Err(Error::Infeasible) => Err(Error::scenario(field.to_string(), "constraints are infeasible")),
        Err(e) => Err(Error::scenario(field.to_string(), e.to_string())),
    }
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::scenario(field.to_string(), "matrix is empty"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::scenario(field.to_string(), "rows have different lengths"));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

impl SystemSpec {
    pub fn build(&self, field: &str) -> Result<LtiSystem> {
        let wrap = |e: Error| Error::scenario(field.to_string(), e.to_string());
        match self {
            SystemSpec::Preset { name, dt, params } => make_preset(*name, *dt, params).map_err(wrap),
            SystemSpec::Matrices {
                a,
                b,
                c,
                dt,
                state_bounds,
            } => {
                let sys = LtiSystem::new(
                    matrix(a, &format!("{field}.a"))?,
                    matrix(b, &format!("{field}.b"))?,
                    matrix(c, &format!("{field}.c"))?,
                    *dt,
                )
                .map_err(wrap)?;
                match state_bounds {
                    None => Ok(sys),
                    Some(bounds) => {
                        let ivs = bounds
                            .iter()
                            .map(|[lo, hi]| Interval {
                                lo: lo.unwrap_or(f64::NEG_INFINITY),
                                hi: hi.unwrap_or(f64::INFINITY),
                            })
                            .collect();
                        sys.with_state_bounds(ivs).map_err(wrap)
                    }
                }
            }
        }
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::scenario(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", file.schema_version),
            ));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds and validates the scenario. Relative reference paths resolve
    /// against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Scenario> {
        if self.agents.is_empty() {
            return Err(Error::scenario("agents", "at least one agent is required"));
        }
        let mut agents = Vec::with_capacity(self.agents.len());
        for (r, entry) in self.agents.iter().enumerate() {
            let (spec, field) = match (&entry.system, &self.system) {
                (Some(s), _) => (s, format!("agents[{r}].system")),
                (None, Some(s)) => (s, "system".to_string()),
                (None, None) => {
                    return Err(Error::scenario(
                        format!("agents[{r}].system"),
                        "no system given and no default `system`",
                    ))
                }
            };
            let mut system = spec.build(&field)?;
            let constraints = match &self.input_constraints {
                ConstraintSpec::Unconstrained => None,
                ConstraintSpec::Box { u_max } => {
                    if !(*u_max >= 0.0) || !u_max.is_finite() {
                        return Err(Error::scenario("input_constraints.u_max", "must be finite and >= 0"));
                    }
                    Some(InputPolytope::symmetric_box(system.input_dim(), *u_max))
                }
                ConstraintSpec::Polytope { cu, du } => {
                    let cu = matrix(cu, "input_constraints.cu")?;
                    Some(InputPolytope {
                        cu,
                        du: DVector::from_column_slice(du),
                    })
                }
                ConstraintSpec::Preset => Some(system.input_bounds().cloned().ok_or_else(|| {
                    Error::scenario("input_constraints", format!("{field} has no preset input bounds"))
                })?),
            };
            if !self.enforce_state_bounds {
                system = system.without_state_bounds();
            }
            agents.push(AgentSpec {
                system,
                initial_state: DVector::from_column_slice(&entry.initial_state),
                budget: entry.budget,
                constraints,
            });
        }
        let reference = match &self.reference {
            ReferenceSpec::Mixture(m) => sample_mixture(&MixtureSpec {
                components: m.components.clone(),
                n_samples: m.n_samples,
                seed: m.seed.unwrap_or(self.seed),
                domain: m.domain,
            }),
            ReferenceSpec::File(p) => load_points(&base_dir.join(p)),
        }
        .map_err(|e| Error::scenario("reference", e.to_string()))?;
        let scenario = Scenario {
            agents,
            reference,
            comm: self.comm,
            global_w: self.global_w,
            seed: self.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Reads, parses and resolves a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let file = ScenarioFile::read(path)?;
    file.resolve(path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "seed": 3,
            "system": {"preset": {"name": "first_order", "dt": 0.1}},
            "agents": [{"initial_state": [1.0, 2.0], "budget": 5}],
            "reference": {"mixture": {
                "components": [{"mean": [5.0, 5.0], "cov": [[1.0, 0.0], [0.0, 1.0]], "weight": 1.0}],
                "n_samples": 20,
                "domain": {"x": [0.0, 10.0], "y": [0.0, 10.0]}
            }},
            "input_constraints": {"kind": "box", "u_max": 5.0}
        })
    }

    fn resolve(v: serde_json::Value) -> Result<Scenario> {
        ScenarioFile::parse(&v.to_string())?.resolve(Path::new("."))
    }

    #[test]
    fn resolves_defaults() {
        let s = resolve(base()).unwrap();
        assert_eq!(s.agents.len(), 1);
        assert_eq!(s.reference.len(), 20);
        assert_eq!(s.global_w, GlobalWConfig::default());
        assert_eq!(s.comm.d_comm, None);
        assert_eq!(s.agents[0].constraints.as_ref().unwrap().du.len(), 4);
    }

    #[test]
    fn missing_budget_is_rejected() {
        let mut v = base();
        v["agents"][0].as_object_mut().unwrap().remove("budget");
        let err = resolve(v).unwrap_err().to_string();
        assert!(err.contains("budget"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = base();
        v["colour"] = serde_json::json!("red");
        assert!(resolve(v).is_err());
        let mut v = base();
        v["agents"][0]["speed"] = serde_json::json!(1);
        assert!(resolve(v).is_err());
    }

    #[test]
    fn polytope_dimension_mismatch_names_field() {
        let mut v = base();
        v["input_constraints"] = serde_json::json!({"kind": "polytope", "cu": [[1.0, 0.0], [0.0, 1.0]], "du": [1.0]});
        let err = resolve(v).unwrap_err().to_string();
        assert!(err.contains("du"), "{err}");
        let mut v = base();
        v["input_constraints"] = serde_json::json!({"kind": "polytope", "cu": [[1.0, 0.0, 0.0]], "du": [1.0]});
        let err = resolve(v).unwrap_err().to_string();
        assert!(err.contains("cu"), "{err}");
    }

    #[test]
    fn infeasible_constraints() {
        let mut v = base();
        v["input_constraints"] =
            serde_json::json!({"kind": "polytope", "cu": [[1.0, 0.0], [-1.0, 0.0]], "du": [-1.0, -1.0]});
        let err = resolve(v).unwrap_err().to_string();
        assert!(err.contains("infeasible"), "{err}");
    }

    #[test]
    fn nonpositive_dt() {
        let mut v = base();
        v["system"] = serde_json::json!({"preset": {"name": "planar_quadrotor", "dt": 0.0}});
        v["agents"][0]["initial_state"] = serde_json::json!([0, 0, 0, 0, 0, 0, 1, 1]);
        assert!(resolve(v).unwrap_err().to_string().contains("dt"));
    }

    #[test]
    fn wrong_state_length_and_schema() {
        let mut v = base();
        v["agents"][0]["initial_state"] = serde_json::json!([1.0]);
        assert!(resolve(v).unwrap_err().to_string().contains("initial_state"));
        let mut v = base();
        v["schema_version"] = serde_json::json!(2);
        assert!(resolve(v).unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn explicit_matrices_and_preset_bounds() {
        let mut v = base();
        v["system"] = serde_json::json!({"matrices": {
            "a": [[1.0, 0.0], [0.0, 1.0]], "b": [[1.0, 0.0], [0.0, 1.0]],
            "c": [[1.0, 0.0], [0.0, 1.0]], "dt": 0.5, "state_bounds": [[null, 4.0], [-1.0, null]]
        }});
        let s = resolve(v).unwrap();
        assert_eq!(s.agents[0].system.state_bounds().unwrap()[0].hi, 4.0);

        let mut v = base();
        v["system"] = serde_json::json!({"preset": {"name": "planar_quadrotor", "dt": 0.1}});
        v["agents"][0]["initial_state"] = serde_json::json!([0, 0, 0, 0, 0, 0, 1, 1]);
        v["input_constraints"] = serde_json::json!({"kind": "preset"});
        let s = resolve(v).unwrap();
        assert_eq!(s.agents[0].constraints.as_ref().unwrap().du[0], 100.0);
        assert_eq!(s.agents[0].system.relative_degree(), 4);

        let mut v = base();
        v["input_constraints"] = serde_json::json!({"kind": "preset"});
        assert!(resolve(v).is_err());
    }

    #[test]
    fn state_bounds_can_be_disabled() {
        let mut v = base();
        v["system"] = serde_json::json!({"preset": {"name": "planar_quadrotor", "dt": 0.1}});
        v["agents"][0]["initial_state"] = serde_json::json!([0, 0, 0, 0, 0, 0, 1, 1]);
        v["enforce_state_bounds"] = serde_json::json!(false);
        assert!(resolve(v).unwrap().agents[0].system.state_bounds().is_none());
    }
}
