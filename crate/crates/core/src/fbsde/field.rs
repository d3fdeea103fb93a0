use std::io::Write;

use serde::Serialize;

use super::basis::Basis;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::TimeGrid;
use crate::measure::{format_float, EmpiricalMeasure};

/// Diagnostics recorded while fitting a decoupling field.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FieldDiagnostics {
    /// Per node, ensemble RMS of (regression target − fitted value), without the control variate.
    pub fit_rms: Vec<f64>,
    /// Per node, ensemble RMS of `Z_regressed − ∂_xU σ`.
    pub z_consistency: Vec<f64>,
    /// Law-flow gaps of the Picard iterations (all blocks and sweeps, in order).
    pub picard_gaps: Vec<f64>,
    /// Node ranges `[from, to]` of the blocks used.
    pub blocks: Vec<(usize, usize)>,
    /// Block length (in steps) that succeeded.
    pub block_steps: usize,
    /// Gaps between successive global sweeps of the block recursion.
    pub sweep_gaps: Vec<f64>,
}

impl FieldDiagnostics {
    pub fn max_fit_rms(&self) -> f64 {
        self.fit_rms.iter().copied().fold(0.0, f64::max)
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.sweep_gaps.last().or(self.picard_gaps.last()).copied()
    }
}

/// Regression representation `U(t_k, x, μ) = Σ_f c_{k,f} φ_f(x, μ)` on a time grid, linear in
/// `t` between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField {
    pub(crate) grid: TimeGrid,
    pub(crate) basis: Basis,
    pub(crate) value_dim: usize,
    /// Per node, `len(basis) × m` coefficients, feature-major.
    pub(crate) coefficients: Vec<Vec<f64>>,
    /// Per node, the `X`-marginal the node was fitted on (first ensemble of the family).
    pub(crate) snapshots: Vec<EmpiricalMeasure>,
    pub(crate) diagnostics: FieldDiagnostics,
    pub(crate) seed: u64,
}

impl DecouplingField {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn diagnostics(&self) -> &FieldDiagnostics {
        &self.diagnostics
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn coefficients(&self, k: usize) -> &[f64] {
        &self.coefficients[k]
    }

    pub fn snapshot(&self, k: usize) -> &EmpiricalMeasure {
        &self.snapshots[k]
    }

    pub(crate) fn node_value_into(
        &self,
        k: usize,
        x: &[f64],
        mean: &[f64],
        feat: &mut [f64],
        out: &mut [f64],
    ) {
        self.basis.eval_into(x, mean, feat);
        let m = self.value_dim;
        let c = &self.coefficients[k];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (f, phi) in feat.iter().enumerate() {
            for r in 0..m {
                out[r] += c[f * m + r] * phi;
            }
        }
    }

    /// `U(t_k, x, μ)`.
    pub fn node_value(&self, k: usize, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut feat = vec![0.0; self.basis.len()];
        let mut out = vec![0.0; self.value_dim];
        self.node_value_into(k, x, mu.mean(), &mut feat, &mut out);
        out
    }

    /// `∂_xU(t_k, x)` as an `m × d` row-major block, written to `out`.
    pub(crate) fn node_jacobian_into(
        &self,
        k: usize,
        x: &[f64],
        grad: &mut [f64],
        out: &mut [f64],
    ) {
        let d = self.basis.dim();
        let m = self.value_dim;
        self.basis.gradient_into(x, grad);
        let c = &self.coefficients[k];
        out.iter_mut().for_each(|v| *v = 0.0);
        for f in 0..self.basis.monomials() {
            for r in 0..m {
                let cf = c[f * m + r];
                if cf == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[r * d + j] += cf * grad[f * d + j];
                }
            }
        }
    }

    pub fn node_jacobian(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let d = self.basis.dim();
        let mut grad = vec![0.0; self.basis.len() * d];
        let mut out = vec![0.0; self.value_dim * d];
        self.node_jacobian_into(k, x, &mut grad, &mut out);
        out
    }

    /// `∂²_{xx}U_r(t_k, x)` for every component `r`, as `m` blocks of `d × d`.
    pub fn node_hessians(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let d = self.basis.dim();
        let m = self.value_dim;
        let mut h = vec![0.0; self.basis.len() * d * d];
        self.basis.hessian_into(x, &mut h);
        let c = &self.coefficients[k];
        let mut out = vec![0.0; m * d * d];
        for f in 0..self.basis.monomials() {
            for r in 0..m {
                for e in 0..d * d {
                    out[r * d * d + e] += c[f * m + r] * h[f * d * d + e];
                }
            }
        }
        out
    }

    /// `∂_xU(t, x)` with the same time interpolation as [`Field::eval`].
    pub fn space_gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (k, s) = self.grid.locate(t);
        let a = self.node_jacobian(k, x);
        let b = self.node_jacobian(k + 1, x);
        a.iter()
            .zip(&b)
            .map(|(p, q)| (1.0 - s) * p + s * q)
            .collect()
    }

    /// One row per node: `t` followed by the coefficients, columns `y{r}:{feature}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let labels = self.basis.labels();
        let m = self.value_dim;
        let mut header = vec!["t".to_string()];
        for l in &labels {
            for r in 1..=m {
                header.push(format!("y{r}:{l}"));
            }
        }
        w.write_record(&header)?;
        for k in 0..=self.grid.steps() {
            let mut rec = vec![format_float(self.grid.time(k))];
            rec.extend(self.coefficients[k].iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Basis, dimensions, seed and diagnostics as JSON.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "basis": self.basis,
            "features": self.basis.labels(),
            "state_dim": self.basis.dim(),
            "value_dim": self.value_dim,
            "grid": self.grid,
            "seed": self.seed,
            "diagnostics": self.diagnostics,
        })
    }

    /// Nodes `from..=to` as a field on the corresponding sub-grid.
    pub fn restrict(&self, from: usize, to: usize) -> Result<Self> {
        let grid = self.grid.slice(from, to)?;
        Ok(Self {
            grid,
            basis: self.basis.clone(),
            value_dim: self.value_dim,
            coefficients: self.coefficients[from..=to].to_vec(),
            snapshots: self.snapshots[from..=to].to_vec(),
            diagnostics: FieldDiagnostics {
                fit_rms: self.diagnostics.fit_rms[from..=to].to_vec(),
                z_consistency: self.diagnostics.z_consistency[from..=to].to_vec(),
                ..Default::default()
            },
            seed: self.seed,
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.basis != other.basis || self.value_dim != other.value_dim {
            return Err(Error::invalid("fields use different bases"));
        }
        Ok(())
    }
}

impl Field for DecouplingField {
    fn state_dim(&self) -> usize {
        self.basis.dim()
    }
    fn value_dim(&self) -> usize {
        self.value_dim
    }
    fn time_domain(&self) -> (f64, f64) {
        (self.grid.t0(), self.grid.t_end())
    }
    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let (k, s) = self.grid.locate(t);
        let a = self.node_value(k, x, mu);
        if s == 0.0 {
            return a;
        }
        let b = self.node_value(k + 1, x, mu);
        a.iter()
            .zip(&b)
            .map(|(p, q)| (1.0 - s) * p + s * q)
            .collect()
    }
}
