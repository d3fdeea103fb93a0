//! Mean-field games and McKean–Vlasov control problems turned into forward–backward systems by
//! the stochastic Pontryagin principle.
//!
//! Model: `dX = (b₁X + b̄₁m + b₂α) dt + σ dW` with `m` the population mean, running cost
//! `F₀(x, μ) + F₁(x, α)` and terminal cost `G(x, μ)`. The adjoint `Y` has `m = d` components and
//! solves `dY = −∂_xH dt + Z dW` with `H = y†b + F`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{self, Field};
use crate::grid::TimeGrid;
use crate::lions::{self, FnFunctional};
use crate::lq_oracle::LqSpec;
use crate::measure::EmpiricalMeasure;
use crate::rng::{match_moments, Domain, NoiseMode, StreamKey};
use crate::scenario::{
    check_convexity, convexity_samples, Coefficients, FrozenStep, FrozenTerminal, SeededSampler,
};

type ValueFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;
type ControlFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type ControlGradFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type AveragedFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;
type PointwiseFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &[f64]) -> Vec<f64> + Send + Sync>;

/// Step of the central differences used for missing gradients.
const FD_STEP: f64 = 1e-5;
pub const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX: usize = 100;

fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = FD_STEP * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            let up = f(&xp);
            xp[j] = x[j] - h;
            let um = f(&xp);
            xp[j] = x[j];
            (up - um) / (2.0 * h)
        })
        .collect()
}

/// A cost `(x, μ) ↦ F(x, μ)` with an optional analytic `∂_x`.
#[derive(Clone)]
pub struct StateCost {
    label: String,
    value: ValueFn,
    grad: Option<GradFn>,
    constant: bool,
}

impl std::fmt::Debug for StateCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StateCost({})", self.label)
    }
}

impl StateCost {
    pub fn new(
        label: impl Into<String>,
        value: impl Fn(&[f64], &EmpiricalMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            value: Arc::new(value),
            grad: None,
            constant: false,
        }
    }

    pub fn with_gradient(
        mut self,
        grad: impl Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        let mut s = Self::new(format!("constant({c})"), move |_, _| c)
            .with_gradient(|x, _| vec![0.0; x.len()]);
        s.constant = true;
        s
    }

    /// `½(x − ρm)†Q(x − ρm)`.
    pub fn quadratic_tracking(q: DMatrix<f64>, rho: f64) -> Self {
        let qv = q.clone();
        let gap = move |x: &[f64], mu: &EmpiricalMeasure| -> DVector<f64> {
            DVector::from_iterator(x.len(), x.iter().zip(mu.mean()).map(|(a, m)| a - rho * m))
        };
        let g2 = gap;
        Self::new(format!("quadratic_tracking(rho={rho})"), move |x, mu| {
            let e = gap(x, mu);
            0.5 * e.dot(&(&qv * &e))
        })
        .with_gradient(move |x, mu| (&q * g2(x, mu)).iter().copied().collect())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    /// Multiplies the cost by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let v = self.value.clone();
        let mut out = Self::new(format!("{c}*{}", self.label), move |x, mu| c * v(x, mu));
        if let Some(g) = self.grad.clone() {
            out = out.with_gradient(move |x, mu| g(x, mu).into_iter().map(|v| c * v).collect());
        }
        out.constant = self.constant;
        out
    }

    pub fn value(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        (self.value)(x, mu)
    }

    /// `∂_x`, analytic when supplied, otherwise by central differences.
    pub fn gradient(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        match &self.grad {
            Some(g) => g(x, mu),
            None => central_gradient(|p| (self.value)(p, mu), x),
        }
    }
}

/// Control part `F₁(x, α)` of the running cost.
#[derive(Clone)]
pub enum ControlCost {
    /// `½α†Rα`; the minimizer has a closed form.
    Quadratic(DMatrix<f64>),
    /// Strictly convex in `α`; minimized by damped Newton. `grad` is `∂_α` when supplied.
    General {
        label: String,
        value: ControlFn,
        grad: Option<ControlGradFn>,
    },
}

impl std::fmt::Debug for ControlCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlCost::Quadratic(r) => write!(f, "Quadratic({r:?})"),
            ControlCost::General { label, .. } => write!(f, "General({label})"),
        }
    }
}

impl ControlCost {
    pub fn general(
        label: impl Into<String>,
        value: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ControlCost::General {
            label: label.into(),
            value: Arc::new(value),
            grad: None,
        }
    }

    pub fn with_gradient(
        self,
        g: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        match self {
            ControlCost::General { label, value, .. } => ControlCost::General {
                label,
                value,
                grad: Some(Arc::new(g)),
            },
            q => q,
        }
    }

    pub fn value(&self, x: &[f64], alpha: &[f64]) -> f64 {
        match self {
            ControlCost::Quadratic(r) => {
                let a = DVector::from_column_slice(alpha);
                0.5 * a.dot(&(r * &a))
            }
            ControlCost::General { value, .. } => value(x, alpha),
        }
    }

    pub fn grad_alpha(&self, x: &[f64], alpha: &[f64]) -> Vec<f64> {
        match self {
            ControlCost::Quadratic(r) => (r * DVector::from_column_slice(alpha))
                .iter()
                .copied()
                .collect(),
            ControlCost::General { grad: Some(g), .. } => g(x, alpha),
            ControlCost::General { value, .. } => central_gradient(|a| value(x, a), alpha),
        }
    }

    /// `∂_xF₁`; zero for the quadratic form.
    pub fn grad_x(&self, x: &[f64], alpha: &[f64]) -> Option<Vec<f64>> {
        match self {
            ControlCost::Quadratic(_) => None,
            ControlCost::General { value, .. } => Some(central_gradient(|p| value(p, alpha), x)),
        }
    }

    fn scaled(&self, c: f64) -> Self {
        match self {
            ControlCost::Quadratic(r) => ControlCost::Quadratic(r * c),
            ControlCost::General { label, value, grad } => {
                let v = value.clone();
                let g = grad.clone();
                ControlCost::General {
                    label: format!("{c}*{label}"),
                    value: Arc::new(move |x, a| c * v(x, a)),
                    grad: g.map(|g| -> ControlGradFn {
                        Arc::new(move |x, a| g(x, a).into_iter().map(|v| c * v).collect())
                    }),
                }
            }
        }
    }
}

/// Mean-field game: the representative player's cost is `F₀ + F₁` and `G`; the population enters
/// through `μ` only.
#[derive(Debug, Clone)]
pub struct MfgSpec {
    pub b1: DMatrix<f64>,
    /// Mean coupling of the drift; zero in the plain game.
    pub b1_bar: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub f0: StateCost,
    pub f1: ControlCost,
    pub g: StateCost,
    /// Declared convexity constant of `F` in `α`.
    pub lambda: f64,
}

impl MfgSpec {
    /// State dimension `d` and control dimension `k`.
    pub fn dims(&self) -> (usize, usize) {
        (self.b2.nrows(), self.b2.ncols())
    }

    /// The linear-quadratic game of `spec`.
    pub fn from_lq(spec: &LqSpec) -> Result<Self> {
        spec.validate()?;
        let lambda = spec.r.clone().symmetric_eigen().eigenvalues.min() * 0.5;
        Ok(Self {
            b1: spec.b1.clone(),
            b1_bar: spec.b1_bar.clone(),
            b2: spec.b2.clone(),
            sigma: spec.sigma.clone(),
            f0: StateCost::quadratic_tracking(spec.q.clone(), spec.rho),
            f1: ControlCost::Quadratic(spec.r.clone()),
            g: StateCost::quadratic_tracking(spec.q_g.clone(), spec.rho_g()),
            lambda,
        })
    }

    /// Multiplies every cost by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            f0: self.f0.scaled(c),
            f1: self.f1.scaled(c),
            g: self.g.scaled(c),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, _) = self.dims();
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if d == 0 || self.b2.ncols() == 0 {
            return bad("empty drift matrix b2");
        }
        if self.b1.shape() != (d, d)
            || self.b1_bar.shape() != (d, d)
            || self.sigma.shape() != (d, d)
        {
            return bad("b1, b1_bar and sigma must be d × d");
        }
        let all_finite = [&self.b1, &self.b1_bar, &self.b2, &self.sigma]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !all_finite {
            return bad("non-finite matrix entry");
        }
        Ok(())
    }

    fn drift_into(&self, x: &[f64], mean: &[f64], alpha: &[f64], out: &mut [f64]) {
        let d = x.len();
        for r in 0..d {
            let mut v = 0.0;
            for j in 0..d {
                v += self.b1[(r, j)] * x[j] + self.b1_bar[(r, j)] * mean[j];
            }
            for (a, al) in alpha.iter().enumerate() {
                v += self.b2[(r, a)] * al;
            }
            out[r] = v;
        }
    }
}

/// Averaged measure derivative `x ↦ ∫ ∂_μΦ(x′, μ)(x) dμ(x′)` of a state cost `Φ`.
#[derive(Clone, Default)]
pub enum MeasureDerivative {
    #[default]
    Zero,
    /// The average itself, as a function of `(x, μ)`.
    Averaged(AveragedFn),
    /// `(x′, μ, x) ↦ ∂_μΦ(x′, μ)(x)`, averaged over the atoms at every query (`O(N)` per call).
    Pointwise(PointwiseFn),
    /// Lions estimate of `μ ↦ ∫Φ(x′, μ) dμ(x′)` at the atoms, minus `∂_xΦ`. Only defined on the
    /// support of the frozen measure.
    Estimated,
}

impl std::fmt::Debug for MeasureDerivative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeasureDerivative::Zero => "Zero",
            MeasureDerivative::Averaged(_) => "Averaged",
            MeasureDerivative::Pointwise(_) => "Pointwise",
            MeasureDerivative::Estimated => "Estimated",
        })
    }
}

impl MeasureDerivative {
    pub fn averaged(
        f: impl Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        MeasureDerivative::Averaged(Arc::new(f))
    }

    pub fn pointwise(
        f: impl Fn(&[f64], &EmpiricalMeasure, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        MeasureDerivative::Pointwise(Arc::new(f))
    }

    /// Analytic derivative of `½(x′ − ρm)†Q(x′ − ρm)`: `∂_μ(x′, μ)(x) = −ρQ(x′ − ρm)`.
    pub fn quadratic_tracking(q: DMatrix<f64>, rho: f64) -> Self {
        Self::pointwise(move |xp, mu, _x| {
            let e = DVector::from_iterator(
                xp.len(),
                xp.iter().zip(mu.mean()).map(|(a, m)| a - rho * m),
            );
            (&q * e).iter().map(|v| -rho * v).collect()
        })
    }

    /// Closed-form average of [`MeasureDerivative::quadratic_tracking`]: `−ρ(1−ρ)Qm`.
    pub fn quadratic_tracking_averaged(q: DMatrix<f64>, rho: f64) -> Self {
        Self::averaged(move |_x, mu| {
            let m = DVector::from_column_slice(mu.mean());
            (&q * m).iter().map(|v| -rho * (1.0 - rho) * v).collect()
        })
    }
}

/// McKean–Vlasov control problem: the game's data plus the measure derivatives of the costs.
#[derive(Debug, Clone)]
pub struct MkvControlSpec {
    pub base: MfgSpec,
    pub dmu_f: MeasureDerivative,
    pub dmu_g: MeasureDerivative,
}

impl MkvControlSpec {
    pub fn from_lq(spec: &LqSpec) -> Result<Self> {
        Ok(Self {
            base: MfgSpec::from_lq(spec)?,
            dmu_f: MeasureDerivative::quadratic_tracking_averaged(spec.q.clone(), spec.rho),
            dmu_g: MeasureDerivative::quadratic_tracking_averaged(spec.q_g.clone(), spec.rho_g()),
        })
    }
}

/// `H = y†(b₁x + b̄₁m + b₂α) + F₀(x, μ) + F₁(x, α)`.
pub fn hamiltonian(
    spec: &MfgSpec,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y: &[f64],
    alpha: &[f64],
) -> f64 {
    let mut b = vec![0.0; x.len()];
    spec.drift_into(x, mu.mean(), alpha, &mut b);
    b.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()
        + spec.f0.value(x, mu)
        + spec.f1.value(x, alpha)
}

/// `α̂` solving `b₂†y + ∂_αF₁(x, α̂) = 0`.
pub fn minimize_hamiltonian(
    spec: &MfgSpec,
    x: &[f64],
    _mu: &EmpiricalMeasure,
    y: &[f64],
) -> Result<Vec<f64>> {
    let (_, k) = spec.dims();
    let b2ty: Vec<f64> = (0..k)
        .map(|a| (0..y.len()).map(|r| spec.b2[(r, a)] * y[r]).sum())
        .collect();
    match &spec.f1 {
        ControlCost::Quadratic(r) => {
            let chol = r
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidSpec("R is not positive definite".into()))?;
            Ok(chol
                .solve(&DVector::from_vec(b2ty))
                .iter()
                .map(|v| -v)
                .collect())
        }
        general => newton(general, x, &b2ty),
    }
}

fn newton(f1: &ControlCost, x: &[f64], b2ty: &[f64]) -> Result<Vec<f64>> {
    let k = b2ty.len();
    let foc = |a: &[f64]| -> Vec<f64> {
        f1.grad_alpha(x, a)
            .iter()
            .zip(b2ty)
            .map(|(g, b)| g + b)
            .collect()
    };
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mut alpha = vec![0.0; k];
    let mut g = foc(&alpha);
    let mut gaps = Vec::new();
    for _ in 0..NEWTON_MAX {
        let gn = norm(&g);
        gaps.push(gn);
        if gn < NEWTON_TOL {
            return Ok(alpha);
        }
        let mut jac = DMatrix::zeros(k, k);
        let mut ap = alpha.clone();
        for j in 0..k {
            let h = FD_STEP * (1.0 + alpha[j].abs());
            ap[j] = alpha[j] + h;
            let up = foc(&ap);
            ap[j] = alpha[j] - h;
            let um = foc(&ap);
            ap[j] = alpha[j];
            for r in 0..k {
                jac[(r, j)] = (up[r] - um[r]) / (2.0 * h);
            }
        }
        let step = jac
            .lu()
            .solve(&DVector::from_iterator(k, g.iter().map(|v| -v)))
            .ok_or_else(|| Error::InvalidSpec("singular Hessian of F1 in alpha".into()))?;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = alpha
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a + t * s)
                .collect();
            let gt = foc(&trial);
            if norm(&gt) < gn || t < 1e-8 {
                alpha = trial;
                g = gt;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::ConvergenceFailure {
        context: "Newton solve of the Hamiltonian first-order condition".into(),
        last_gaps: gaps[gaps.len().saturating_sub(2)..].to_vec(),
    })
}

/// Sampled convexity constant of `α ↦ F₁(x, α)`.
pub fn sampled_control_convexity(spec: &MfgSpec, count: usize, seed: u64) -> Result<f64> {
    let (d, k) = spec.dims();
    let sampler = SeededSampler::new(seed);
    let mut samples = convexity_samples(d, k, d, count, &sampler)?;
    for s in &mut samples {
        s.x2 = s.x.clone();
    }
    let f1 = &spec.f1;
    check_convexity(
        &|x: &[f64], _: &EmpiricalMeasure, _: &[f64], _: &[f64], a: &[f64]| f1.value(x, a),
        &samples,
        1e-4,
    )
}

struct MkvExtras {
    dmu_f: MeasureDerivative,
    dmu_g: MeasureDerivative,
}

/// Pontryagin coefficients of a game or control problem. State and adjoint both live in `R^d`.
pub struct Pontryagin {
    spec: MfgSpec,
    /// `R⁻¹b₂†` for the quadratic control cost.
    feedback: Option<DMatrix<f64>>,
    mkv: Option<MkvExtras>,
    label: String,
}

fn check_spec(spec: &MfgSpec) -> Result<Option<DMatrix<f64>>> {
    spec.validate()?;
    match &spec.f1 {
        ControlCost::Quadratic(r) => {
            let (_, k) = spec.dims();
            if r.shape() != (k, k) || (r - r.transpose()).amax() > 1e-12 * (1.0 + r.amax()) {
                return Err(Error::InvalidSpec(
                    "R must be a symmetric k × k matrix".into(),
                ));
            }
            let chol = r
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidSpec("R is not positive definite".into()))?;
            Ok(Some(chol.solve(&spec.b2.transpose())))
        }
        ControlCost::General { .. } => {
            let lambda = sampled_control_convexity(spec, 64, 0)?;
            if !(lambda > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "F1 is not strictly convex in alpha (sampled λ = {lambda})"
                )));
            }
            Ok(None)
        }
    }
}

/// Forward drift `b(x, α̂(x, y))`, driver `∂_xH(x, μ, y, α̂)`, terminal `∂_xG`.
pub fn build_pontryagin_mfg(spec: MfgSpec) -> Result<Pontryagin> {
    let feedback = check_spec(&spec)?;
    Ok(Pontryagin {
        label: "pontryagin_mfg".into(),
        spec,
        feedback,
        mkv: None,
    })
}

/// As [`build_pontryagin_mfg`], with the driver gaining `b̄₁†ȳ + ∫∂_μF₀(x′,μ)(x) dμ(x′)` and the
/// terminal `∫∂_μG(x′,μ)(x) dμ(x′)`. Terms that vanish identically are not evaluated, so zero
/// measure derivatives and `b̄₁ = 0` reproduce the game bitwise.
pub fn build_pontryagin_mkv(spec: MkvControlSpec) -> Result<Pontryagin> {
    let feedback = check_spec(&spec.base)?;
    Ok(Pontryagin {
        label: "pontryagin_mkv".into(),
        spec: spec.base,
        feedback,
        mkv: Some(MkvExtras {
            dmu_f: spec.dmu_f,
            dmu_g: spec.dmu_g,
        }),
    })
}

impl Pontryagin {
    pub fn spec(&self) -> &MfgSpec {
        &self.spec
    }

    pub fn is_mkv(&self) -> bool {
        self.mkv.is_some()
    }

    /// `α̂(x, y)`; `NaN` entries signal a failed Newton solve.
    pub fn control(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match &self.feedback {
            Some(kmat) => (0..kmat.nrows())
                .map(|a| -(0..y.len()).map(|r| kmat[(a, r)] * y[r]).sum::<f64>())
                .collect(),
            None => {
                let (_, k) = self.spec.dims();
                let b2ty: Vec<f64> = (0..k)
                    .map(|a| (0..y.len()).map(|r| self.spec.b2[(r, a)] * y[r]).sum())
                    .collect();
                newton(&self.spec.f1, x, &b2ty).unwrap_or_else(|_| vec![f64::NAN; k])
            }
        }
    }
}

/// Averaged derivative prepared for one frozen measure.
enum PreparedDmu<'a> {
    Averaged(&'a AveragedFn),
    Pointwise(&'a PointwiseFn),
    Table(HashMap<Vec<u64>, Vec<f64>>),
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn prepare_dmu<'a>(
    dmu: &'a MeasureDerivative,
    cost: &StateCost,
    mu: &EmpiricalMeasure,
) -> Option<PreparedDmu<'a>> {
    match dmu {
        MeasureDerivative::Zero => None,
        MeasureDerivative::Averaged(f) => Some(PreparedDmu::Averaged(f)),
        MeasureDerivative::Pointwise(f) => Some(PreparedDmu::Pointwise(f)),
        MeasureDerivative::Estimated => {
            let phi = FnFunctional::new("integrated cost", |m: &EmpiricalMeasure| {
                m.atoms().map(|a| cost.value(a, m)).sum::<f64>() / m.len() as f64
            });
            let table = match lions::lions_derivative(&phi, mu, lions::default_step(mu)) {
                Ok(est) => mu
                    .atoms()
                    .zip(est.values)
                    .map(|(a, row)| {
                        let gx = cost.gradient(a, mu);
                        (bits(a), row.iter().zip(&gx).map(|(p, q)| p - q).collect())
                    })
                    .collect(),
                Err(_) => HashMap::new(),
            };
            Some(PreparedDmu::Table(table))
        }
    }
}

impl PreparedDmu<'_> {
    fn add(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        match self {
            PreparedDmu::Averaged(f) => out.iter_mut().zip(f(x, mu)).for_each(|(o, v)| *o += v),
            PreparedDmu::Pointwise(f) => {
                let n = mu.len() as f64;
                let mut acc = vec![0.0; out.len()];
                for a in mu.atoms() {
                    acc.iter_mut().zip(f(a, mu, x)).for_each(|(s, v)| *s += v);
                }
                out.iter_mut().zip(acc).for_each(|(o, v)| *o += v / n);
            }
            PreparedDmu::Table(t) => match t.get(&bits(x)) {
                Some(v) => out.iter_mut().zip(v).for_each(|(o, v)| *o += v),
                None => out.iter_mut().for_each(|o| *o = f64::NAN),
            },
        }
    }
}

struct FrozenPontryagin<'a> {
    p: &'a Pontryagin,
    mu: EmpiricalMeasure,
    /// `b̄₁†ȳ` for the control problem, when nonzero.
    mean_adjoint: Option<Vec<f64>>,
    dmu: Option<PreparedDmu<'a>>,
}

impl FrozenStep for FrozenPontryagin<'_> {
    fn drift(&self, x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
        let alpha = self.p.control(x, y);
        self.p.spec.drift_into(x, self.mu.mean(), &alpha, out);
    }

    fn sigma(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        let s = &self.p.spec.sigma;
        let d = s.nrows();
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = s[(r, c)];
            }
        }
    }

    fn driver(&self, x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
        let spec = &self.p.spec;
        let d = x.len();
        let gx = spec.f0.gradient(x, &self.mu);
        for r in 0..d {
            out[r] = (0..d).map(|j| spec.b1[(j, r)] * y[j]).sum::<f64>() + gx[r];
        }
        if let ControlCost::General { .. } = spec.f1 {
            let alpha = self.p.control(x, y);
            if let Some(g1) = spec.f1.grad_x(x, &alpha) {
                out.iter_mut().zip(g1).for_each(|(o, v)| *o += v);
            }
        }
        if let Some(extra) = &self.mean_adjoint {
            out.iter_mut().zip(extra).for_each(|(o, v)| *o += v);
        }
        if let Some(dmu) = &self.dmu {
            dmu.add(x, &self.mu, out);
        }
    }
}

struct FrozenPontryaginTerminal<'a> {
    p: &'a Pontryagin,
    mu: &'a EmpiricalMeasure,
    dmu: Option<PreparedDmu<'a>>,
}

impl FrozenTerminal for FrozenPontryaginTerminal<'_> {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.p.spec.g.gradient(x, self.mu));
        if let Some(dmu) = &self.dmu {
            dmu.add(x, self.mu, out);
        }
    }
}

impl Coefficients for Pontryagin {
    fn dims(&self) -> (usize, usize) {
        let (d, _) = self.spec.dims();
        (d, d)
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn drift(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.freeze(nu).drift(x, y, z, &mut out);
        out
    }

    fn sigma(&self, x: &[f64], y: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; x.len() * x.len()];
        self.freeze(nu).sigma(x, y, &mut out);
        out
    }

    fn driver(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.freeze(nu).driver(x, y, z, &mut out);
        out
    }

    fn terminal(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.freeze_terminal(mu).eval(x, &mut out);
        out
    }

    fn sigma_bound(&self) -> Option<f64> {
        Some(self.spec.sigma.norm())
    }

    fn freeze<'a>(&'a self, nu: &'a EmpiricalMeasure) -> Box<dyn FrozenStep + 'a> {
        let (d, _) = self.spec.dims();
        let mu = nu.marginal(0..d);
        let mut mean_adjoint = None;
        let mut dmu = None;
        if let Some(extra) = &self.mkv {
            if self.spec.b1_bar.iter().any(|v| *v != 0.0) {
                let ybar = nu.mean()[d..2 * d].to_vec();
                mean_adjoint = Some(
                    (0..d)
                        .map(|r| (0..d).map(|j| self.spec.b1_bar[(j, r)] * ybar[j]).sum())
                        .collect(),
                );
            }
            dmu = prepare_dmu(&extra.dmu_f, &self.spec.f0, &mu);
        }
        Box::new(FrozenPontryagin {
            p: self,
            mu,
            mean_adjoint,
            dmu,
        })
    }

    fn freeze_terminal<'a>(&'a self, mu: &'a EmpiricalMeasure) -> Box<dyn FrozenTerminal + 'a> {
        let dmu = self
            .mkv
            .as_ref()
            .and_then(|e| prepare_dmu(&e.dmu_g, &self.spec.g, mu));
        Box::new(FrozenPontryaginTerminal { p: self, mu, dmu })
    }
}

/// Monte Carlo settings for [`value_function`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McParams {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub noise: NoiseMode,
}

impl Default for McParams {
    fn default() -> Self {
        Self {
            paths: 4096,
            steps: 64,
            seed: 0,
            noise: NoiseMode::Centered,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn increments(
    key: StreamKey,
    first: u64,
    count: usize,
    d: usize,
    k: usize,
    dt: f64,
    noise: NoiseMode,
    x: &[f64],
) -> Vec<f64> {
    let mut dw = vec![0.0; count * d];
    dw.par_chunks_mut(d).enumerate().for_each(|(i, c)| {
        key.fill_normals(first + i as u64, k as u64, c);
        c.iter_mut().for_each(|v| *v *= dt.sqrt());
    });
    match_moments(noise, dt, d, x, &mut dw);
    dw
}

/// Euler step of the controlled state with `α̂ = α̂(x, U(t, x, μ))`, returning the control used.
fn controlled_step(
    p: &Pontryagin,
    u: &dyn Field,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    dw: &[f64],
    dt: f64,
    next: &mut [f64],
) -> Vec<f64> {
    let spec = &p.spec;
    let y = u.eval(t, x, mu);
    let alpha = p.control(x, &y);
    let d = x.len();
    let mut b = vec![0.0; d];
    spec.drift_into(x, mu.mean(), &alpha, &mut b);
    for r in 0..d {
        next[r] = x[r] + b[r] * dt + (0..d).map(|j| spec.sigma[(r, j)] * dw[j]).sum::<f64>();
    }
    alpha
}

/// Population flow from `mu` on `grid` with every particle playing `α̂(x, U(t, x, μ_t))`.
pub fn equilibrium_flow(
    p: &Pontryagin,
    u: &dyn Field,
    mu: &EmpiricalMeasure,
    grid: &TimeGrid,
    seed: u64,
    noise: NoiseMode,
) -> Result<Vec<EmpiricalMeasure>> {
    let d = mu.dim();
    let n = mu.len();
    let key = StreamKey::new(seed, Domain::MonteCarlo);
    let mut flow = vec![mu.clone()];
    for k in 0..grid.steps() {
        let cur = &flow[k];
        let t = grid.time(k);
        let dw = increments(key, 0, n, d, k, grid.dt(), noise, cur.as_flat());
        let mut next = vec![0.0; n * d];
        next.par_chunks_mut(d).enumerate().for_each(|(i, nx)| {
            controlled_step(
                p,
                u,
                t,
                cur.atom(i),
                cur,
                &dw[i * d..(i + 1) * d],
                grid.dt(),
                nx,
            );
        });
        flow.push(EmpiricalMeasure::from_flat(d, next)?);
    }
    Ok(flow)
}

/// Expected cost of a player starting at `x` at time `t` in a population started at `mu`, when
/// everybody plays `α̂(x, U)`. Left-point rule for the running cost.
pub fn value_function(
    p: &Pontryagin,
    u: &dyn Field,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    mc: &McParams,
) -> Result<ValueEstimate> {
    let (lo, hi) = u.time_domain();
    if !(t >= lo && t < hi) {
        return Err(Error::invalid(format!(
            "t = {t} outside the field's domain [{lo}, {hi})"
        )));
    }
    if mc.paths < 2 || mc.steps == 0 {
        return Err(Error::invalid(
            "value_function needs at least two paths and one step",
        ));
    }
    let d = mu.dim();
    if x.len() != d || u.state_dim() != d {
        return Err(Error::invalid("value_function: dimension mismatch"));
    }
    let grid = TimeGrid::new(t, hi, mc.steps)?;
    let flow = equilibrium_flow(p, u, mu, &grid, mc.seed, mc.noise)?;
    let key = StreamKey::new(mc.seed, Domain::MonteCarlo);
    let first = mu.len() as u64;
    let m = mc.paths;
    let mut xs: Vec<f64> = x.iter().copied().cycle().take(m * d).collect();
    let mut cost = vec![0.0; m];
    let dt = grid.dt();
    let spec = &p.spec;
    for k in 0..grid.steps() {
        let s = grid.time(k);
        let pop = &flow[k];
        let dw = increments(key, first, m, d, k, dt, mc.noise, &xs);
        let mut next = vec![0.0; m * d];
        next.par_chunks_mut(d)
            .zip(cost.par_iter_mut())
            .enumerate()
            .for_each(|(i, (nx, c))| {
                let xi = &xs[i * d..(i + 1) * d];
                let alpha = controlled_step(p, u, s, xi, pop, &dw[i * d..(i + 1) * d], dt, nx);
                *c += dt * (spec.f0.value(xi, pop) + spec.f1.value(xi, &alpha));
            });
        xs = next;
    }
    let last = &flow[grid.steps()];
    for (i, c) in cost.iter_mut().enumerate() {
        *c += spec.g.value(&xs[i * d..(i + 1) * d], last);
    }
    let mean = cost.iter().sum::<f64>() / m as f64;
    let var = cost.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (m - 1) as f64;
    if !mean.is_finite() {
        return Err(Error::non_finite("value_function", None));
    }
    Ok(ValueEstimate {
        value: mean,
        std_error: (var / m as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Mfg,
    Mkv,
}

/// `|U − ∂_xV|` for the game; `|U − ∂_xV − ∫∂_μV(t,x′,μ)(x) dμ(x′)|` for the control problem.
///
/// The integral is obtained from `Ψ(μ) = ∫V(t,x′,μ) dμ(x′)`, whose Lions derivative at `x` is
/// `∂_xV(t,x,μ) + ∫∂_μV(t,x′,μ)(x) dμ(x′)`. `x` must then be an atom of `μ`.
pub fn identification_check(
    kind: ProblemKind,
    v: &dyn Field,
    u: &dyn Field,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    h_x: f64,
    h_mu: f64,
) -> Result<f64> {
    if v.value_dim() != 1 || u.value_dim() != x.len() {
        return Err(Error::invalid(
            "identification_check needs a scalar V and an R^d-valued U",
        ));
    }
    let uval = u.eval(t, x, mu);
    let dxv: Vec<f64> = field::space_jacobian(v, t, x, mu, h_x)
        .row(0)
        .iter()
        .copied()
        .collect();
    let target = match kind {
        ProblemKind::Mfg => dxv,
        ProblemKind::Mkv => {
            let i = lions::support_index(mu, x)?;
            let psi = FnFunctional::new("integrated value", |m: &EmpiricalMeasure| {
                m.atoms().map(|a| v.eval(t, a, m)[0]).sum::<f64>() / m.len() as f64
            });
            lions::lions_derivative_atom(&psi, mu, i, h_mu)?
        }
    };
    let r = uval
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::non_finite("identification_check", None))
    }
}

/// Components of the value-function master equation at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MfgMasterBreakdown {
    pub dt_term: f64,
    pub drift_term: f64,
    pub running_cost: f64,
    pub trace_term: f64,
    pub measure_drift_term: f64,
    pub measure_trace_term: f64,
    pub total: f64,
}

/// `∂_tV + ∂_xV·b(x, α̂) + F(x, μ, α̂) + ½Tr(∂²_xxV σσ†) + ∫∂_μV·b dμ + ½∫Tr(∂_v∂_μV σσ†) dμ`
/// with `α̂ = α̂(x, U(t, x, μ))`.
pub fn mfg_master_residual(
    v: &dyn Field,
    p: &Pontryagin,
    u: &dyn Field,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    steps: lions::ItoSteps,
) -> Result<MfgMasterBreakdown> {
    let spec = &p.spec;
    let d = x.len();
    if v.value_dim() != 1 || v.state_dim() != d || mu.dim() != d {
        return Err(Error::invalid("mfg_master_residual: dimension mismatch"));
    }
    let (lo, hi) = v.time_domain();
    if t - steps.h_t < lo || t + steps.h_t > hi {
        return Err(Error::invalid(format!(
            "time stencil around t = {t} leaves [{lo}, {hi}]"
        )));
    }
    let a = &spec.sigma * spec.sigma.transpose();
    let drift_at = |z: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let y = u.eval(t, z, mu);
        let alpha = p.control(z, &y);
        let mut b = vec![0.0; d];
        spec.drift_into(z, mu.mean(), &alpha, &mut b);
        (b, alpha)
    };
    let center = v.eval(t, x, mu);
    let dt_term = field::time_derivative(v, t, x, mu, steps.h_t)[0];
    let jac = field::space_jacobian(v, t, x, mu, steps.h_x);
    let hess = field::space_hessians(v, t, x, mu, &center, steps.h_x);
    let (b, alpha) = drift_at(x);
    let drift_term: f64 = (0..d).map(|j| jac[(0, j)] * b[j]).sum();
    let running_cost = spec.f0.value(x, mu) + spec.f1.value(x, &alpha);
    let trace_term = 0.5 * (&hess[0] * &a).trace();
    let drifts: Vec<Vec<f64>> = mu.atoms().map(|z| drift_at(z).0).collect();
    let covs = vec![a.clone(); mu.len()];
    let (measure_drift_term, measure_trace_term) =
        lions::measure_terms(v, 0, t, x, mu, &drifts, &covs, steps.h_mu)?;
    let total =
        dt_term + drift_term + running_cost + trace_term + measure_drift_term + measure_trace_term;
    if !total.is_finite() {
        return Err(Error::non_finite("mfg_master_residual", None));
    }
    Ok(MfgMasterBreakdown {
        dt_term,
        drift_term,
        running_cost,
        trace_term,
        measure_drift_term,
        measure_trace_term,
        total,
    })
}

/// HJB residual along a frozen flow `(μ_k)` on `grid`, at node `k` (interior):
/// `d/ds V(s, x, μ_s) + ∂_xV·b(x, α̂) + ½Tr(σσ†∂²_xxV) + F(x, μ_s, α̂)` with
/// `α̂ = α̂(x, ∂_xV)` and the total time derivative by a central difference across nodes.
pub fn hjb_residual(
    v: &dyn Field,
    p: &Pontryagin,
    grid: &TimeGrid,
    flow: &[EmpiricalMeasure],
    k: usize,
    x: &[f64],
    h_x: f64,
) -> Result<f64> {
    if flow.len() != grid.steps() + 1 {
        return Err(Error::invalid("flow and grid lengths differ"));
    }
    if k == 0 || k >= grid.steps() {
        return Err(Error::invalid(format!(
            "node {k} is not interior to the flow grid"
        )));
    }
    let spec = &p.spec;
    let d = x.len();
    let t = grid.time(k);
    let mu = &flow[k];
    let ds = (v.eval(grid.time(k + 1), x, &flow[k + 1])[0]
        - v.eval(grid.time(k - 1), x, &flow[k - 1])[0])
        / (2.0 * grid.dt());
    let jac = field::space_jacobian(v, t, x, mu, h_x);
    let center = v.eval(t, x, mu);
    let hess = field::space_hessians(v, t, x, mu, &center, h_x);
    let grad: Vec<f64> = jac.row(0).iter().copied().collect();
    let alpha = p.control(x, &grad);
    let mut b = vec![0.0; d];
    spec.drift_into(x, mu.mean(), &alpha, &mut b);
    let a = &spec.sigma * spec.sigma.transpose();
    let r = ds
        + grad.iter().zip(&b).map(|(g, bb)| g * bb).sum::<f64>()
        + 0.5 * (&hess[0] * a).trace()
        + spec.f0.value(x, mu)
        + spec.f1.value(x, &alpha);
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::non_finite("hjb_residual", None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec(f1: ControlCost) -> MfgSpec {
        MfgSpec {
            b1: DMatrix::zeros(1, 1),
            b1_bar: DMatrix::zeros(1, 1),
            b2: DMatrix::identity(1, 1),
            sigma: DMatrix::identity(1, 1),
            f0: StateCost::zero(),
            f1,
            g: StateCost::zero(),
            lambda: 0.5,
        }
    }

    #[test]
    fn hamiltonian_by_substitution() {
        let spec = scalar_spec(ControlCost::Quadratic(DMatrix::identity(1, 1)));
        let mu = EmpiricalMeasure::from_scalars(&[0.0]).unwrap();
        assert_eq!(hamiltonian(&spec, &[0.3], &mu, &[2.0], &[1.0]), 2.5);
        assert_eq!(hamiltonian(&spec, &[0.3], &mu, &[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn closed_form_minimizers() {
        let mu = EmpiricalMeasure::from_scalars(&[0.0]).unwrap();
        let spec = scalar_spec(ControlCost::Quadratic(DMatrix::identity(1, 1)));
        assert_eq!(
            minimize_hamiltonian(&spec, &[0.0], &mu, &[0.7]).unwrap(),
            vec![-0.7]
        );
        let mut two = scalar_spec(ControlCost::Quadratic(DMatrix::identity(2, 2) * 2.0));
        two.b1 = DMatrix::zeros(2, 2);
        two.b1_bar = DMatrix::zeros(2, 2);
        two.b2 = DMatrix::identity(2, 2);
        two.sigma = DMatrix::identity(2, 2);
        let mu2 = EmpiricalMeasure::new(vec![vec![0.0, 0.0]]).unwrap();
        let a = minimize_hamiltonian(&two, &[0.0, 0.0], &mu2, &[1.0, -3.0]).unwrap();
        assert!((a[0] + 0.5).abs() < 1e-15 && (a[1] - 1.5).abs() < 1e-15);
    }
}
