//! Run configuration read by the command-line tool.
//!
//! JSON; unknown keys are rejected everywhere. The seed is mandatory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{self, Scenario};
use crate::error::{Error, Result};
use crate::fbsde::{InitialLaw, SolverParams};
use crate::grid::TimeGrid;
use crate::rng::NoiseMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Horizon {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Default for Horizon {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t_end: 1.0,
            steps: 64,
        }
    }
}

/// Finite-difference steps of the residual evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stencils {
    pub h_t: f64,
    pub h_x: f64,
    pub h_mu: f64,
}

impl Default for Stencils {
    fn default() -> Self {
        Self {
            h_t: 1e-3,
            h_x: 1e-3,
            h_mu: 1e-4,
        }
    }
}

impl From<Stencils> for crate::lions::ItoSteps {
    fn from(s: Stencils) -> Self {
        Self {
            h_t: s.h_t,
            h_x: s.h_x,
            h_mu: s.h_mu,
        }
    }
}

/// Query block: where the `master`, `evaluate` and `lions` subcommands look.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    /// Times of the residual sweep; each is snapped to the nearest grid node.
    pub times: Vec<f64>,
    /// Points of the residual sweep and of `evaluate` (each of length `d`).
    pub points: Vec<Vec<f64>>,
    /// Atoms kept from the field's snapshot for the measure argument of the residual sweep.
    pub measure_atoms: usize,
    pub stencils: Stencils,
    /// Start time of `evaluate`; the solve is re-run on `[t, T]` from the initial law.
    pub evaluate_time: f64,
    /// Functional of the `lions` subcommand: `mean`, `second_moment`, `l2_norm` or `squared_mean`.
    pub functional: String,
    /// Step of the `lions` subcommand; defaults to `10⁻⁴` times the ensemble standard deviation.
    pub lions_step: Option<f64>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            times: vec![0.25, 0.5, 0.75],
            points: vec![vec![-1.0], vec![0.0], vec![1.0]],
            measure_atoms: 64,
            stencils: Stencils::default(),
            evaluate_time: 0.0,
            functional: "second_moment".into(),
            lions_step: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// `dX = dW`.
    Brownian,
    /// `dX = −X dt + dW`.
    OrnsteinUhlenbeck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainRuleCheck {
    pub flow: FlowKind,
    /// Increment post-processing; `orthogonal` removes the empirical martingale term.
    pub noise: NoiseMode,
    pub particles: usize,
    pub steps: usize,
    pub tol: f64,
}

impl Default for ChainRuleCheck {
    fn default() -> Self {
        Self {
            flow: FlowKind::Brownian,
            noise: NoiseMode::Orthogonal,
            particles: 4096,
            steps: 64,
            tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterCheck {
    pub points: usize,
    /// Bound on the solver field's residual.
    pub tol: f64,
    /// Bound on the oracle field's residual (linear-quadratic scenarios).
    pub oracle_tol: f64,
}

impl Default for MasterCheck {
    fn default() -> Self {
        Self {
            points: 100,
            tol: 5e-2,
            oracle_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationCheck {
    pub points: usize,
    pub atoms: usize,
    pub tol_mfg: f64,
    pub tol_mkv: f64,
}

impl Default for IdentificationCheck {
    fn default() -> Self {
        Self {
            points: 50,
            atoms: 32,
            tol_mfg: 1e-2,
            tol_mkv: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypothesesCheck {
    pub samples: usize,
    pub pairs: usize,
    pub atoms: usize,
    /// Allowed negative slack of the Lasry–Lions pairing.
    pub monotonicity_tol: f64,
}

impl Default for HypothesesCheck {
    fn default() -> Self {
        Self {
            samples: 256,
            pairs: 32,
            atoms: 16,
            monotonicity_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceCheck {
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConsistencyCheck {
    /// Restart node; defaults to the midpoint.
    pub node: Option<usize>,
    pub tol: f64,
}

impl Default for FlowConsistencyCheck {
    fn default() -> Self {
        Self {
            node: None,
            tol: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakLipschitzCheck {
    /// Mean shifts of the paired Gaussian laws.
    pub shifts: Vec<f64>,
    /// Allowed excess over `|η_{t0}| + |χ_{t0}|` (linear-quadratic scenarios).
    pub factor: f64,
}

impl Default for WeakLipschitzCheck {
    fn default() -> Self {
        Self {
            shifts: vec![0.25, -0.5],
            factor: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    pub chain_rule: ChainRuleCheck,
    pub master_residual: MasterCheck,
    pub identification: IdentificationCheck,
    pub hypotheses: HypothesesCheck,
    pub lq_validate: ToleranceCheck,
    pub flow_consistency: FlowConsistencyCheck,
    pub weak_lipschitz: WeakLipschitzCheck,
}

impl Default for ToleranceCheck {
    fn default() -> Self {
        Self { tol: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    #[serde(default = "default_law")]
    pub initial_law: InitialLaw,
    #[serde(default)]
    pub horizon: Horizon,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub query: QueryConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub output: Option<String>,
}

fn default_law() -> InitialLaw {
    InitialLaw::gaussian(0.0, 1.0)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.grid()?;
        self.solver.validate().map_err(wrap)?;
        self.initial_law.validate().map_err(wrap)?;
        let s = self.scenario()?;
        if s.dims().0 != self.initial_law.dim() {
            return Err(Error::Config(format!(
                "initial law has dimension {} but scenario {} has state dimension {}",
                self.initial_law.dim(),
                s.name,
                s.dims().0
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon.t0, self.horizon.t_end, self.horizon.steps)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn scenario(&self) -> Result<Scenario> {
        catalog::build(&self.scenario.name, &self.scenario.params).map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(format!("scenario {}: {other}", self.scenario.name)),
        })
    }

    /// Solver parameters carrying the run seed.
    pub fn solver_params(&self) -> SolverParams {
        self.solver.clone().with_seed(self.seed)
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_missing_seed_are_rejected() {
        let ok = r#"{"seed": 1, "scenario": {"name": "trivial_constant"}}"#;
        assert!(RunConfig::from_json(ok).is_ok());
        let extra = r#"{"seed": 1, "scenario": {"name": "trivial_constant"}, "colour": 3}"#;
        assert!(matches!(RunConfig::from_json(extra), Err(Error::Config(_))));
        let nested =
            r#"{"seed": 1, "scenario": {"name": "trivial_constant"}, "solver": {"partcles": 3}}"#;
        assert!(RunConfig::from_json(nested).is_err());
        let no_seed = r#"{"scenario": {"name": "trivial_constant"}}"#;
        assert!(RunConfig::from_json(no_seed).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_json(r#"{"seed": 1, "scenario": {"name": "trivial_constant"}}"#)
            .unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
