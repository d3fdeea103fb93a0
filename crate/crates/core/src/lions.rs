//! Lions derivatives of measure functionals through their empirical projection.
//!
//! For `U : P₂(R^d) → R` and atoms `x¹..x^N`, the projection `u^N(x¹,…,x^N) = U((1/N) Σ δ_{x^i})`
//! satisfies `∂_{x^i} u^N = (1/N) ∂_μU(μ̄^N)(x^i)`. The estimators below invert this identity
//! with central differences in one atom at a time, so derivatives are only ever produced on
//! the support of the measure.
//!
//! The second-order estimator returns `N ∂²_{x^i x^i} u^N`, which equals
//! `∂_v[∂_μU](x^i) + (1/N) ∂²_μU(x^i, x^i)`. The `O(1/N)` cross term is left in place: for
//! `U(μ) = (∫v dμ)²` the estimate is `2/N` even though `∂_v∂_μU = 0`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{self, Field};
use crate::grid::TimeGrid;
use crate::measure::EmpiricalMeasure;
use crate::rng::{match_moments, Domain, NoiseMode, StreamKey};

/// Evaluates `μ ↦ U(μ)`. Must be deterministic and invariant under permutation of atoms.
pub trait MeasureFunctional: Sync {
    fn eval(&self, mu: &EmpiricalMeasure) -> f64;

    fn label(&self) -> &str {
        "functional"
    }

    /// Optional fast path returning `U` of `mu` with atom `i` replaced. Implementations that can
    /// update a cached statistic in O(1) override this; the default re-evaluates the measure.
    fn replacement_evaluator<'a>(
        &'a self,
        _mu: &'a EmpiricalMeasure,
    ) -> Option<Box<dyn Fn(usize, &[f64]) -> f64 + Sync + 'a>> {
        None
    }
}

/// Functional backed by a closure.
pub struct FnFunctional<F> {
    label: String,
    f: F,
}

impl<F: Fn(&EmpiricalMeasure) -> f64 + Sync> FnFunctional<F> {
    pub fn new(label: impl Into<String>, f: F) -> Self {
        Self {
            label: label.into(),
            f,
        }
    }
}

impl<F: Fn(&EmpiricalMeasure) -> f64 + Sync> MeasureFunctional for FnFunctional<F> {
    fn eval(&self, mu: &EmpiricalMeasure) -> f64 {
        (self.f)(mu)
    }
    fn label(&self) -> &str {
        &self.label
    }
}

/// `U(μ) = outer(∫ ψ dμ)` for a feature map `ψ : R^d → R^p`.
pub struct MomentFunctional<P, O> {
    label: String,
    features: usize,
    psi: P,
    outer: O,
}

impl<P, O> MomentFunctional<P, O>
where
    P: Fn(&[f64], &mut [f64]) + Sync,
    O: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(label: impl Into<String>, features: usize, psi: P, outer: O) -> Self {
        Self {
            label: label.into(),
            features,
            psi,
            outer,
        }
    }

    fn sums(&self, mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut acc = vec![0.0; self.features];
        let mut buf = vec![0.0; self.features];
        for a in mu.atoms() {
            (self.psi)(a, &mut buf);
            acc.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
        }
        acc
    }
}

impl<P, O> MeasureFunctional for MomentFunctional<P, O>
where
    P: Fn(&[f64], &mut [f64]) + Sync,
    O: Fn(&[f64]) -> f64 + Sync,
{
    fn eval(&self, mu: &EmpiricalMeasure) -> f64 {
        let n = mu.len() as f64;
        let avg: Vec<f64> = self.sums(mu).into_iter().map(|s| s / n).collect();
        (self.outer)(&avg)
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn replacement_evaluator<'a>(
        &'a self,
        mu: &'a EmpiricalMeasure,
    ) -> Option<Box<dyn Fn(usize, &[f64]) -> f64 + Sync + 'a>> {
        let sums = self.sums(mu);
        let n = mu.len() as f64;
        let p = self.features;
        Some(Box::new(move |i, atom| {
            let mut old = vec![0.0; p];
            let mut new = vec![0.0; p];
            (self.psi)(mu.atom(i), &mut old);
            (self.psi)(atom, &mut new);
            let avg: Vec<f64> = (0..p).map(|k| (sums[k] - old[k] + new[k]) / n).collect();
            (self.outer)(&avg)
        }))
    }
}

/// `∫ |v|² dμ`.
pub fn second_moment_functional() -> impl MeasureFunctional {
    MomentFunctional::new(
        "second_moment",
        1,
        |v: &[f64], out: &mut [f64]| out[0] = v.iter().map(|x| x * x).sum(),
        |s: &[f64]| s[0],
    )
}

/// `∫ ⟨c, v⟩ dμ`.
pub fn linear_functional(c: Vec<f64>) -> impl MeasureFunctional {
    MomentFunctional::new(
        "linear",
        1,
        move |v: &[f64], out: &mut [f64]| out[0] = v.iter().zip(&c).map(|(x, ci)| x * ci).sum(),
        |s: &[f64]| s[0],
    )
}

/// `(∫ |v|² dμ)^{1/2}`, the L² norm of any random variable with law μ.
pub fn l2_norm_functional() -> impl MeasureFunctional {
    MomentFunctional::new(
        "l2_norm",
        1,
        |v: &[f64], out: &mut [f64]| out[0] = v.iter().map(|x| x * x).sum(),
        |s: &[f64]| s[0].sqrt(),
    )
}

/// `|∫ v dμ|²`.
pub fn squared_mean_functional(dim: usize) -> impl MeasureFunctional {
    MomentFunctional::new(
        "squared_mean",
        dim,
        |v: &[f64], out: &mut [f64]| out.copy_from_slice(v),
        |s: &[f64]| s.iter().map(|x| x * x).sum(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LionsDerivativeEstimate {
    /// Row `i` holds `∂_μU(μ)(x^i)` (order 1, length d) or `∂_v∂_μU(μ)(x^i)` (order 2, d×d
    /// row-major).
    pub values: Vec<Vec<f64>>,
    pub step: f64,
    pub order: u8,
}

impl LionsDerivativeEstimate {
    pub fn block(&self, i: usize) -> DMatrix<f64> {
        let v = &self.values[i];
        let d = (v.len() as f64).sqrt() as usize;
        if self.order == 2 {
            DMatrix::from_row_slice(d, d, v)
        } else {
            DMatrix::from_row_slice(1, v.len(), v)
        }
    }

    /// Writes `atom_index, x1..xd, dmu_1..` as CSV.
    pub fn write_csv<W: std::io::Write>(&self, mu: &EmpiricalMeasure, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = mu.dim();
        let mut header = vec!["atom_index".to_string()];
        header.extend((1..=d).map(|j| format!("x{j}")));
        let width = self.values.first().map_or(0, |v| v.len());
        header.extend((1..=width).map(|j| format!("dmu_{j}")));
        w.write_record(&header)?;
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(mu.atom(i).iter().map(|v| crate::measure::format_float(*v)));
            rec.extend(row.iter().map(|v| crate::measure::format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `10⁻⁴` times the ensemble standard deviation (or `10⁻⁴` for a degenerate measure).
pub fn default_step(mu: &EmpiricalMeasure) -> f64 {
    let s = mu.std_dev();
    1e-4 * if s > 0.0 { s } else { 1.0 }
}

fn atom_step(h: f64, atom: &[f64]) -> f64 {
    h * (1.0 + atom.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Evaluates `U` with one atom replaced, either through the functional's fast path or a
/// private scratch copy of the measure.
enum Perturber<'a> {
    Fast(&'a (dyn Fn(usize, &[f64]) -> f64 + Sync + 'a)),
    Scratch(
        &'a (dyn Fn(&EmpiricalMeasure) -> f64 + Sync + 'a),
        EmpiricalMeasure,
    ),
}

impl Perturber<'_> {
    fn eval(&mut self, i: usize, atom: &[f64]) -> f64 {
        match self {
            Perturber::Fast(f) => f(i, atom),
            Perturber::Scratch(u, scratch) => {
                let saved = scratch.atom(i).to_vec();
                scratch.set_atom(i, atom);
                let v = u(scratch);
                scratch.set_atom(i, &saved);
                v
            }
        }
    }
}

const CHUNK: usize = 64;

/// Runs `per_atom` for every atom in parallel chunks, in ascending atom order.
fn per_atom_map<U, F>(u: &U, mu: &EmpiricalMeasure, per_atom: F) -> Result<Vec<Vec<f64>>>
where
    U: MeasureFunctional + ?Sized,
    F: Fn(&mut Perturber<'_>, usize) -> Result<Vec<f64>> + Sync,
{
    let fast = u.replacement_evaluator(mu);
    let full = |m: &EmpiricalMeasure| u.eval(m);
    let indices: Vec<usize> = (0..mu.len()).collect();
    let chunks: Vec<Result<Vec<Vec<f64>>>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut p = match &fast {
                Some(f) => Perturber::Fast(f.as_ref()),
                None => Perturber::Scratch(&full, mu.clone()),
            };
            chunk.iter().map(|&i| per_atom(&mut p, i)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(mu.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn finite(v: f64, i: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(what, Some(i)))
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )))
    }
}

/// Estimates `∂_μU(μ)(x^i)` at every atom: `N` times the central difference of `u^N` in atom `i`
/// with step `h (1 + |x^i|)`.
pub fn lions_derivative<U: MeasureFunctional + ?Sized>(
    u: &U,
    mu: &EmpiricalMeasure,
    h: f64,
) -> Result<LionsDerivativeEstimate> {
    check_step(h)?;
    let n = mu.len() as f64;
    let d = mu.dim();
    let values = per_atom_map(u, mu, |p, i| {
        let x = mu.atom(i);
        let hi = atom_step(h, x);
        let mut xp = x.to_vec();
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            xp[j] = x[j] + hi;
            let up = finite(p.eval(i, &xp), i, "lions_derivative")?;
            xp[j] = x[j] - hi;
            let um = finite(p.eval(i, &xp), i, "lions_derivative")?;
            xp[j] = x[j];
            row.push(n * (up - um) / (2.0 * hi));
        }
        Ok(row)
    })?;
    Ok(LionsDerivativeEstimate {
        values,
        step: h,
        order: 1,
    })
}

/// Estimates `∂_v[∂_μU(μ)](x^i)` at every atom as `N` times the Hessian of `u^N` in atom `i`.
/// Biased by `(1/N) ∂²_μU(x^i, x^i)`.
pub fn lions_second_diag<U: MeasureFunctional + ?Sized>(
    u: &U,
    mu: &EmpiricalMeasure,
    h: f64,
) -> Result<LionsDerivativeEstimate> {
    check_step(h)?;
    let n = mu.len() as f64;
    let d = mu.dim();
    let center = finite(u.eval(mu), 0, "lions_second_diag")?;
    let values = per_atom_map(u, mu, |p, i| {
        let x = mu.atom(i);
        let hi = atom_step(h, x);
        let mut xp = x.to_vec();
        let mut block = vec![0.0; d * d];
        for j in 0..d {
            xp[j] = x[j] + hi;
            let up = finite(p.eval(i, &xp), i, "lions_second_diag")?;
            xp[j] = x[j] - hi;
            let um = finite(p.eval(i, &xp), i, "lions_second_diag")?;
            xp[j] = x[j];
            block[j * d + j] = n * (up - 2.0 * center + um) / (hi * hi);
            for l in (j + 1)..d {
                let mut corner = |sj: f64, sl: f64| {
                    xp[j] = x[j] + sj * hi;
                    xp[l] = x[l] + sl * hi;
                    let v = p.eval(i, &xp);
                    xp[j] = x[j];
                    xp[l] = x[l];
                    finite(v, i, "lions_second_diag")
                };
                let v = n
                    * (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                        + corner(-1.0, -1.0)?)
                    / (4.0 * hi * hi);
                block[j * d + l] = v;
                block[l * d + j] = v;
            }
        }
        Ok(block)
    })?;
    Ok(LionsDerivativeEstimate {
        values,
        step: h,
        order: 2,
    })
}

/// Index of the atom equal to `v`; derivatives are never extrapolated off the support.
pub fn support_index(mu: &EmpiricalMeasure, v: &[f64]) -> Result<usize> {
    mu.atoms().position(|a| a == v).ok_or(Error::OffSupport)
}

/// `∂_μU(μ)(v)` for a point `v` of the support of `μ`.
pub fn lions_derivative_at<U: MeasureFunctional + ?Sized>(
    u: &U,
    mu: &EmpiricalMeasure,
    v: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let i = support_index(mu, v)?;
    Ok(lions_derivative(u, mu, h)?.values.swap_remove(i))
}

/// `∂_μU(μ)(x^i)` at the single atom `i`, with the same stencil as [`lions_derivative`].
pub fn lions_derivative_atom<U: MeasureFunctional + ?Sized>(
    u: &U,
    mu: &EmpiricalMeasure,
    i: usize,
    h: f64,
) -> Result<Vec<f64>> {
    check_step(h)?;
    if i >= mu.len() {
        return Err(Error::OffSupport);
    }
    let fast = u.replacement_evaluator(mu);
    let full = |m: &EmpiricalMeasure| u.eval(m);
    let mut p = match &fast {
        Some(f) => Perturber::Fast(f.as_ref()),
        None => Perturber::Scratch(&full, mu.clone()),
    };
    let n = mu.len() as f64;
    let x = mu.atom(i);
    let hi = atom_step(h, x);
    let mut xp = x.to_vec();
    let mut row = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        xp[j] = x[j] + hi;
        let up = finite(p.eval(i, &xp), i, "lions_derivative")?;
        xp[j] = x[j] - hi;
        let um = finite(p.eval(i, &xp), i, "lions_derivative")?;
        xp[j] = x[j];
        row.push(n * (up - um) / (2.0 * hi));
    }
    Ok(row)
}

/// Simulated particle system together with the drift and diffusion samples used at each step.
#[derive(Debug, Clone)]
pub struct ParticleFlow {
    pub grid: TimeGrid,
    /// `K + 1` marginal empirical measures.
    pub states: Vec<EmpiricalMeasure>,
    /// Per step, `N × d` drift samples `b^i_k`.
    pub drift: Vec<Vec<f64>>,
    /// Per step, `N × d × d` diffusion samples `σ^i_k` (row-major blocks).
    pub diffusion: Vec<Vec<f64>>,
    /// Per step, `N × d` Brownian increments.
    pub increments: Vec<Vec<f64>>,
}

impl ParticleFlow {
    /// Euler–Maruyama simulation of `dX^i = b(X^i, μ̄) dt + σ(X^i, μ̄) dW^i`.
    pub fn simulate<B, S>(
        x0: EmpiricalMeasure,
        grid: TimeGrid,
        drift: B,
        sigma: S,
        seed: u64,
        noise: NoiseMode,
    ) -> Result<Self>
    where
        B: Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Sync,
        S: Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Sync,
    {
        let n = x0.len();
        let d = x0.dim();
        let dt = grid.dt();
        let key = StreamKey::new(seed, Domain::Increments);
        let mut states = vec![x0];
        let (mut drifts, mut diffs, mut incs) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..grid.steps() {
            let cur = &states[k];
            let mut dw = vec![0.0; n * d];
            dw.par_chunks_mut(d).enumerate().for_each(|(i, c)| {
                key.fill_normals(i as u64, k as u64, c);
                c.iter_mut().for_each(|v| *v *= dt.sqrt());
            });
            match_moments(noise, dt, d, cur.as_flat(), &mut dw);
            let b: Vec<f64> = (0..n)
                .into_par_iter()
                .flat_map_iter(|i| drift(cur.atom(i), cur))
                .collect();
            let s: Vec<f64> = (0..n)
                .into_par_iter()
                .flat_map_iter(|i| sigma(cur.atom(i), cur))
                .collect();
            if b.len() != n * d || s.len() != n * d * d {
                return Err(Error::invalid(
                    "drift/diffusion output has the wrong dimension",
                ));
            }
            let mut next = cur.as_flat().to_vec();
            for i in 0..n {
                for r in 0..d {
                    let mut v = b[i * d + r] * dt;
                    for c in 0..d {
                        v += s[i * d * d + r * d + c] * dw[i * d + c];
                    }
                    next[i * d + r] += v;
                }
            }
            states.push(EmpiricalMeasure::from_flat(d, next)?);
            drifts.push(b);
            diffs.push(s);
            incs.push(dw);
        }
        Ok(Self {
            grid,
            states,
            drift: drifts,
            diffusion: diffs,
            increments: incs,
        })
    }

    pub fn particles(&self) -> usize {
        self.states[0].len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    fn validate(&self) -> Result<()> {
        let k = self.grid.steps();
        let n = self.particles();
        let d = self.dim();
        if self.states.len() != k + 1
            || self.drift.len() != k
            || self.diffusion.len() != k
            || self.increments.len() != k
            || self.states.iter().any(|s| s.len() != n || s.dim() != d)
            || self.drift.iter().any(|b| b.len() != n * d)
            || self.diffusion.iter().any(|s| s.len() != n * d * d)
            || self.increments.iter().any(|w| w.len() != n * d)
        {
            return Err(Error::invalid(
                "particle flow does not match its grid/ensemble shape",
            ));
        }
        Ok(())
    }

    /// `a^i_k = σ^i_k (σ^i_k)†` for particle `i` at step `k`.
    fn covariance(&self, k: usize, i: usize) -> DMatrix<f64> {
        let d = self.dim();
        let s = DMatrix::from_row_slice(d, d, &self.diffusion[k][i * d * d..(i + 1) * d * d]);
        &s * s.transpose()
    }
}

/// Outcome of a chain-rule check along a particle flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainRuleResidual {
    /// `U(μ_T) − U(μ_0)`.
    pub observed: f64,
    /// Time integral of the first- and second-order measure terms (left-point rule).
    pub predicted: f64,
    pub residual: f64,
}

/// Measure part of the chain rule at one step:
/// `(1/N) Σ_i [∂_μU(μ)(x^i)·b^i + ½ Tr(∂_v∂_μU(μ)(x^i) a^i)]`.
fn measure_generator<U: MeasureFunctional + ?Sized>(
    u: &U,
    flow: &ParticleFlow,
    k: usize,
    h: f64,
) -> Result<f64> {
    let mu = &flow.states[k];
    let d = mu.dim();
    let n = mu.len();
    let first = lions_derivative(u, mu, h)?;
    let second = lions_second_diag(u, mu, h)?;
    let mut acc = 0.0;
    for i in 0..n {
        let b = &flow.drift[k][i * d..(i + 1) * d];
        let drift: f64 = first.values[i].iter().zip(b).map(|(p, q)| p * q).sum();
        let a = flow.covariance(k, i);
        let trace = (second.block(i) * a).trace();
        acc += drift + 0.5 * trace;
    }
    Ok(acc / n as f64)
}

/// Compares `U(μ_T) − U(μ_0)` with the time integral given by the Wasserstein chain rule.
pub fn chain_rule_residual<U: MeasureFunctional + ?Sized>(
    u: &U,
    flow: &ParticleFlow,
    h: f64,
) -> Result<ChainRuleResidual> {
    flow.validate()?;
    check_step(h)?;
    let dt = flow.grid.dt();
    let mut predicted = 0.0;
    for k in 0..flow.grid.steps() {
        predicted += dt * measure_generator(u, flow, k, h)?;
    }
    let observed = u.eval(flow.states.last().expect("non-empty flow")) - u.eval(&flow.states[0]);
    if !observed.is_finite() || !predicted.is_finite() {
        return Err(Error::non_finite("chain_rule_residual", None));
    }
    Ok(ChainRuleResidual {
        observed,
        predicted,
        residual: (observed - predicted).abs(),
    })
}

/// Finite-difference steps for [`full_ito_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItoSteps {
    pub h_t: f64,
    pub h_x: f64,
    pub h_mu: f64,
}

impl Default for ItoSteps {
    fn default() -> Self {
        Self {
            h_t: 1e-4,
            h_x: 1e-4,
            h_mu: 1e-4,
        }
    }
}

/// Scalar functional `μ ↦ V(t, x, μ)` with `(t, x)` frozen.
struct Frozen<'a, V: Field + ?Sized> {
    v: &'a V,
    t: f64,
    x: &'a [f64],
    component: usize,
}

impl<V: Field + ?Sized> MeasureFunctional for Frozen<'_, V> {
    fn eval(&self, mu: &EmpiricalMeasure) -> f64 {
        self.v.eval(self.t, self.x, mu)[self.component]
    }
}

/// `(1/N) Σ_i ∂_μV(t,x,μ)(x^i) · b^i` and `½ (1/N) Σ_i Tr(∂_v∂_μV(t,x,μ)(x^i) a^i)` for component
/// `component` of `V`, with drift/covariance supplied per atom.
pub(crate) fn measure_terms<V: Field + ?Sized>(
    v: &V,
    component: usize,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    drift: &[Vec<f64>],
    covariance: &[DMatrix<f64>],
    h_mu: f64,
) -> Result<(f64, f64)> {
    let frozen = Frozen { v, t, x, component };
    let first = lions_derivative(&frozen, mu, h_mu)?;
    let second = lions_second_diag(&frozen, mu, h_mu)?;
    let n = mu.len() as f64;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for i in 0..mu.len() {
        d1 += first.values[i]
            .iter()
            .zip(&drift[i])
            .map(|(p, q)| p * q)
            .sum::<f64>();
        d2 += 0.5 * (second.block(i) * &covariance[i]).trace();
    }
    Ok((d1 / n, d2 / n))
}

/// Itô expansion check for `s ↦ V(s, X_s, μ_s)` along the flow.
///
/// With `observed = Some(p)` the path of particle `p` is used; with `None` the residual is the
/// ensemble average over all particles. The martingale increment `∂_xV σ ΔW` is included
/// explicitly; the measure martingale of the finite system is not, so the residual carries an
/// `O(N^{-1/2})` fluctuation (and an `O(1/N)` self-interaction bias).
pub fn full_ito_residual<V: Field + ?Sized>(
    v: &V,
    flow: &ParticleFlow,
    observed: Option<usize>,
    steps: ItoSteps,
) -> Result<f64> {
    flow.validate()?;
    if v.value_dim() != 1 || v.state_dim() != flow.dim() {
        return Err(Error::invalid(
            "full_ito_residual needs a scalar field on the flow's state space",
        ));
    }
    let n = flow.particles();
    let d = flow.dim();
    let paths: Vec<usize> = match observed {
        Some(p) if p < n => vec![p],
        Some(p) => return Err(Error::invalid(format!("path index {p} out of range"))),
        None => (0..n).collect(),
    };
    let dt = flow.grid.dt();
    let mut total = 0.0;
    for &p in &paths {
        let mut predicted = 0.0;
        for k in 0..flow.grid.steps() {
            let t = flow.grid.time(k);
            let mu = &flow.states[k];
            let x = mu.atom(p);
            let center = v.eval(t, x, mu);
            let dtv = field::time_derivative(v, t, x, mu, steps.h_t)[0];
            let jac = field::space_jacobian(v, t, x, mu, steps.h_x);
            let hess = field::space_hessians(v, t, x, mu, &center, steps.h_x);
            let b = &flow.drift[k][p * d..(p + 1) * d];
            let a = flow.covariance(k, p);
            let drift: f64 = (0..d).map(|j| jac[(0, j)] * b[j]).sum();
            let trace = 0.5 * (&hess[0] * &a).trace();
            let drifts: Vec<Vec<f64>> = (0..n)
                .map(|i| flow.drift[k][i * d..(i + 1) * d].to_vec())
                .collect();
            let covs: Vec<DMatrix<f64>> = (0..n).map(|i| flow.covariance(k, i)).collect();
            let (m1, m2) = measure_terms(v, 0, t, x, mu, &drifts, &covs, steps.h_mu)?;
            let sig = DMatrix::from_row_slice(d, d, &flow.diffusion[k][p * d * d..(p + 1) * d * d]);
            let dw = nalgebra::DVector::from_column_slice(&flow.increments[k][p * d..(p + 1) * d]);
            let mart = (&jac * sig * dw)[0];
            predicted += dt * (dtv + drift + trace + m1 + m2) + mart;
        }
        let kf = flow.grid.steps();
        let observed_change =
            v.eval(
                flow.grid.time(kf),
                flow.states[kf].atom(p),
                &flow.states[kf],
            )[0] - v.eval(flow.grid.time(0), flow.states[0].atom(p), &flow.states[0])[0];
        total += observed_change - predicted;
    }
    let r = (total / paths.len() as f64).abs();
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::non_finite("full_ito_residual", None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(v).unwrap()
    }

    #[test]
    fn linear_functional_is_exact() {
        let mu = m1(&[0.3, -1.2, 4.0, 2.5]);
        for h in [1e-6, 1e-3, 0.5] {
            let est = lions_derivative(&linear_functional(vec![1.0]), &mu, h).unwrap();
            for row in &est.values {
                assert!((row[0] - 1.0).abs() < 1e-9, "{row:?}");
            }
            let sec = lions_second_diag(&linear_functional(vec![1.0]), &mu, h).unwrap();
            for row in &sec.values {
                assert!(row[0].abs() < 1e-6 / (h * h) * 1e-6, "{row:?}");
            }
        }
    }

    #[test]
    fn squared_mean_bias_is_two_over_n() {
        let mu = m1(&[0.5, 1.0, -2.0, 3.0, 0.0]);
        let est = lions_derivative(&squared_mean_functional(1), &mu, 1e-3).unwrap();
        let m = mu.mean()[0];
        for row in &est.values {
            assert!((row[0] - 2.0 * m).abs() < 1e-9);
        }
        let sec = lions_second_diag(&squared_mean_functional(1), &mu, 1e-3).unwrap();
        for row in &sec.values {
            assert!((row[0] - 2.0 / 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn second_moment_hessian_is_two_identity() {
        let mu =
            EmpiricalMeasure::new(vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.0, 0.0]]).unwrap();
        let sec = lions_second_diag(&second_moment_functional(), &mu, 1e-3).unwrap();
        for i in 0..3 {
            let b = sec.block(i);
            assert!((b[(0, 0)] - 2.0).abs() < 1e-6);
            assert!((b[(1, 1)] - 2.0).abs() < 1e-6);
            assert!(b[(0, 1)].abs() < 1e-6);
        }
    }

    #[test]
    fn generic_and_fast_paths_agree() {
        let mu = m1(&[0.1, 0.7, -0.4]);
        let slow = FnFunctional::new("m2", |m: &EmpiricalMeasure| m.second_moment());
        let a = lions_derivative(&slow, &mu, 1e-4).unwrap();
        let b = lions_derivative(&second_moment_functional(), &mu, 1e-4).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x[0] - y[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_values_name_the_atom() {
        let mu = m1(&[1.0, 2.0, 3.0]);
        let bad = FnFunctional::new(
            "bad",
            |m: &EmpiricalMeasure| {
                if m.atom(2)[0] > 3.0 {
                    f64::NAN
                } else {
                    0.0
                }
            },
        );
        match lions_derivative(&bad, &mu, 1e-3) {
            Err(Error::NumericDomain { index: Some(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn off_support_requests_are_rejected() {
        let mu = m1(&[1.0, 2.0]);
        assert!(matches!(
            lions_derivative_at(&second_moment_functional(), &mu, &[1.5], 1e-4),
            Err(Error::OffSupport)
        ));
        let v = lions_derivative_at(&second_moment_functional(), &mu, &[2.0], 1e-4).unwrap();
        assert!((v[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_functional_has_zero_chain_rule_residual() {
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let flow = ParticleFlow::simulate(
            m1(&[0.0, 1.0, 2.0, 3.0]),
            grid,
            |_x, _mu| vec![0.0],
            |_x, _mu| vec![1.0],
            3,
            NoiseMode::Plain,
        )
        .unwrap();
        let c = FnFunctional::new("const", |_m: &EmpiricalMeasure| 2.5);
        assert_eq!(chain_rule_residual(&c, &flow, 1e-3).unwrap().residual, 0.0);
    }
}
