//! Pointwise residual of the master equation satisfied by a decoupling field:
//!
//! ```text
//! ∂_tU + ∂_xU b + ½Tr(∂²_xxU σσ†) + f + ∫ ∂_μU(v) b(v) dμ(v) + ½∫ Tr(∂_v∂_μU(v) σσ†(v)) dμ(v) = 0
//! ```
//!
//! with every coefficient evaluated at `(x, U(t,x,μ), ∂_xU σ, ν)` and `ν` the law of
//! `(ξ, U(t, ξ, μ))` for `ξ ∼ μ`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{self, Field};
use crate::lions::{self, ItoSteps};
use crate::measure::EmpiricalMeasure;
use crate::scenario::Coefficients;

/// `μ` together with its lift `ν = (1/N) Σ δ_{(x^i, U(t, x^i, μ))}`.
#[derive(Debug, Clone)]
pub struct MeasureLift {
    pub base: EmpiricalMeasure,
    pub lifted: EmpiricalMeasure,
}

impl MeasureLift {
    pub fn new<F: Field + ?Sized>(u: &F, t: f64, mu: &EmpiricalMeasure) -> Result<Self> {
        let values: Vec<f64> = mu.atoms().flat_map(|a| u.eval(t, a, mu)).collect();
        let y = EmpiricalMeasure::from_flat(u.value_dim(), values)?;
        Ok(Self {
            base: mu.clone(),
            lifted: EmpiricalMeasure::joint(mu, &y)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MasterResidualBreakdown {
    pub t: f64,
    pub x: Vec<f64>,
    pub dt_term: Vec<f64>,
    pub drift_term: Vec<f64>,
    pub trace_term: Vec<f64>,
    pub driver_term: Vec<f64>,
    pub measure_drift_term: Vec<f64>,
    pub measure_trace_term: Vec<f64>,
    /// Sum of the six components, in the order listed.
    pub total: Vec<f64>,
    pub h_t: f64,
    pub h_x: f64,
    pub h_mu: f64,
}

impl MasterResidualBreakdown {
    /// Largest absolute component of `total`.
    pub fn max_abs(&self) -> f64 {
        self.total.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `∂_xU σ` at `(t, z)` as an `m × d` row-major block, with the matching `σ`.
fn z_of<F: Field + ?Sized>(
    u: &F,
    c: &dyn Coefficients,
    nu: &EmpiricalMeasure,
    t: f64,
    z: &[f64],
    y: &[f64],
    mu: &EmpiricalMeasure,
    h: f64,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let d = z.len();
    let jac = field::space_jacobian(u, t, z, mu, h);
    let sigma = DMatrix::from_row_slice(d, d, &c.sigma(z, y, nu));
    let zz = &jac * &sigma;
    let flat: Vec<f64> = (0..zz.nrows())
        .flat_map(|r| (0..d).map(move |j| (r, j)))
        .map(|(r, j)| zz[(r, j)])
        .collect();
    (jac, sigma, flat)
}

struct Terms {
    dt: Vec<f64>,
    drift: Vec<f64>,
    trace: Vec<f64>,
    driver: Vec<f64>,
    measure_drift: Vec<f64>,
    measure_trace: Vec<f64>,
}

fn terms<F: Field + ?Sized>(
    u: &F,
    c: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    steps: ItoSteps,
) -> Result<Terms> {
    let (d, m) = c.dims();
    if u.state_dim() != d || u.value_dim() != m || x.len() != d || mu.dim() != d {
        return Err(Error::invalid(
            "master residual: field, coefficients and query dimensions differ",
        ));
    }
    if mu.is_empty() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "master residual needs a finite point and a nonempty measure",
        ));
    }
    let (lo, hi) = u.time_domain();
    if t < lo || t > hi {
        return Err(Error::invalid(format!(
            "t = {t} outside the field's domain [{lo}, {hi}]"
        )));
    }
    let lift = MeasureLift::new(u, t, mu)?;
    let nu = &lift.lifted;
    let y = u.eval(t, x, mu);
    let (jac, sigma, zflat) = z_of(u, c, nu, t, x, &y, mu, steps.h_x);
    let b = c.drift(x, &y, &zflat, nu);
    let f = c.driver(x, &y, &zflat, nu);
    let a = &sigma * sigma.transpose();
    let hess = field::space_hessians(u, t, x, mu, &y, steps.h_x);
    let dt = field::time_derivative(u, t, x, mu, steps.h_t);
    let drift: Vec<f64> = (0..m)
        .map(|r| (0..d).map(|j| jac[(r, j)] * b[j]).sum())
        .collect();
    let trace: Vec<f64> = (0..m).map(|r| 0.5 * (&hess[r] * &a).trace()).collect();

    let mut drifts = Vec::with_capacity(mu.len());
    let mut covs = Vec::with_capacity(mu.len());
    for (i, v) in mu.atoms().enumerate() {
        let yv = &nu.atom(i)[d..];
        let (_, sv, zv) = z_of(u, c, nu, t, v, yv, mu, steps.h_x);
        drifts.push(c.drift(v, yv, &zv, nu));
        covs.push(&sv * sv.transpose());
    }
    let mut measure_drift = Vec::with_capacity(m);
    let mut measure_trace = Vec::with_capacity(m);
    for r in 0..m {
        let (p, q) = lions::measure_terms(u, r, t, x, mu, &drifts, &covs, steps.h_mu)?;
        measure_drift.push(p);
        measure_trace.push(q);
    }
    Ok(Terms {
        dt,
        drift,
        trace,
        driver: f,
        measure_drift,
        measure_trace,
    })
}

/// Master-equation residual of `u` at `(t, x, μ)` with central-difference stencils (one-sided in
/// time at the ends of the field's domain).
pub fn master_residual<F: Field + ?Sized>(
    u: &F,
    c: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    steps: ItoSteps,
) -> Result<MasterResidualBreakdown> {
    let tm = terms(u, c, t, x, mu, steps)?;
    let m = tm.dt.len();
    let total: Vec<f64> = (0..m)
        .map(|r| {
            tm.dt[r]
                + tm.drift[r]
                + tm.trace[r]
                + tm.driver[r]
                + tm.measure_drift[r]
                + tm.measure_trace[r]
        })
        .collect();
    if total.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("master_residual", None));
    }
    Ok(MasterResidualBreakdown {
        t,
        x: x.to_vec(),
        dt_term: tm.dt,
        drift_term: tm.drift,
        trace_term: tm.trace,
        driver_term: tm.driver,
        measure_drift_term: tm.measure_drift,
        measure_trace_term: tm.measure_trace,
        total,
        h_t: steps.h_t,
        h_x: steps.h_x,
        h_mu: steps.h_mu,
    })
}

/// `u(t, ·, ·) = U(T − t, ·, ·)` for a field `U` on `[t0, T]`.
pub struct TimeReversed<'a, F: ?Sized> {
    inner: &'a F,
    horizon: f64,
}

impl<'a, F: Field + ?Sized> TimeReversed<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            horizon: inner.time_domain().1,
            inner,
        }
    }
}

impl<F: Field + ?Sized> Field for TimeReversed<'_, F> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn value_dim(&self) -> usize {
        self.inner.value_dim()
    }
    fn time_domain(&self) -> (f64, f64) {
        let (a, b) = self.inner.time_domain();
        (self.horizon - b, self.horizon - a)
    }
    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        self.inner.eval(self.horizon - t, x, mu)
    }
}

/// Forward form `∂_tu − Au − f − ∫Cu dμ` of the master equation for a forward-time field `u`.
/// For `u = U(T − ·)` it equals minus [`master_residual`] of `U` at `T − t`.
pub fn forward_form_residual<F: Field + ?Sized>(
    u: &F,
    c: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    steps: ItoSteps,
) -> Result<Vec<f64>> {
    let tm = terms(u, c, t, x, mu, steps)?;
    let out: Vec<f64> = (0..tm.dt.len())
        .map(|r| {
            tm.dt[r]
                - (tm.drift[r]
                    + tm.trace[r]
                    + tm.driver[r]
                    + tm.measure_drift[r]
                    + tm.measure_trace[r])
        })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("forward_form_residual", None));
    }
    Ok(out)
}
