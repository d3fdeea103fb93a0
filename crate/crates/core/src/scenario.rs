//! Coefficients `(b, σ, f, g)` of the McKean–Vlasov FBSDE and sampled checks of the standing
//! hypotheses.
//!
//! Conventions: `x ∈ R^d`, `y ∈ R^m`, `z ∈ R^{m×d}` (row-major), `σ ∈ R^{d×d}` (row-major).
//! The measure argument `ν` of `b`, `σ`, `f` is the joint empirical law of `(X, Y)` on
//! `R^{d+m}`; `g` only sees the `X`-marginal.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::rng::{Domain, StreamKey};

/// Coefficients frozen at one law `ν`; called once per particle by the solver.
pub trait FrozenStep: Sync {
    fn drift(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
    fn sigma(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn driver(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
}

/// Terminal function frozen at one `X`-marginal.
pub trait FrozenTerminal: Sync {
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

pub trait Coefficients: Sync {
    /// `(d, m)`.
    fn dims(&self) -> (usize, usize);

    fn label(&self) -> &str {
        "coefficients"
    }

    fn drift(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64>;
    fn sigma(&self, x: &[f64], y: &[f64], nu: &EmpiricalMeasure) -> Vec<f64>;
    fn driver(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64>;
    fn terminal(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64>;

    /// Declared bound `L̃` on `|σ|` (Frobenius norm), if any.
    fn sigma_bound(&self) -> Option<f64> {
        None
    }

    /// Precomputes whatever depends on `ν` only. The default forwards to the methods above.
    fn freeze<'a>(&'a self, nu: &'a EmpiricalMeasure) -> Box<dyn FrozenStep + 'a> {
        Box::new(Unfrozen { c: self, nu })
    }

    fn freeze_terminal<'a>(&'a self, mu: &'a EmpiricalMeasure) -> Box<dyn FrozenTerminal + 'a> {
        Box::new(Unfrozen { c: self, nu: mu })
    }
}

struct Unfrozen<'a, C: ?Sized> {
    c: &'a C,
    nu: &'a EmpiricalMeasure,
}

impl<C: Coefficients + ?Sized> FrozenStep for Unfrozen<'_, C> {
    fn drift(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c.drift(x, y, z, self.nu));
    }
    fn sigma(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c.sigma(x, y, self.nu));
    }
    fn driver(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c.driver(x, y, z, self.nu));
    }
}

impl<C: Coefficients + ?Sized> FrozenTerminal for Unfrozen<'_, C> {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c.terminal(x, self.nu));
    }
}

impl<C: Coefficients + ?Sized> Coefficients for Box<C> {
    fn dims(&self) -> (usize, usize) {
        (**self).dims()
    }
    fn label(&self) -> &str {
        (**self).label()
    }
    fn drift(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        (**self).drift(x, y, z, nu)
    }
    fn sigma(&self, x: &[f64], y: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        (**self).sigma(x, y, nu)
    }
    fn driver(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        (**self).driver(x, y, z, nu)
    }
    fn terminal(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        (**self).terminal(x, mu)
    }
    fn sigma_bound(&self) -> Option<f64> {
        (**self).sigma_bound()
    }
    fn freeze<'a>(&'a self, nu: &'a EmpiricalMeasure) -> Box<dyn FrozenStep + 'a> {
        (**self).freeze(nu)
    }
    fn freeze_terminal<'a>(&'a self, mu: &'a EmpiricalMeasure) -> Box<dyn FrozenTerminal + 'a> {
        (**self).freeze_terminal(mu)
    }
}

type XyzFn = Box<dyn Fn(&[f64], &[f64], &[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;
type XyFn = Box<dyn Fn(&[f64], &[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;
type XmuFn = Box<dyn Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;

/// Coefficients assembled from closures. Unset drift, driver and terminal are zero; unset σ is
/// the identity.
pub struct ClosureCoefficients {
    label: String,
    d: usize,
    m: usize,
    drift: XyzFn,
    sigma: XyFn,
    driver: XyzFn,
    terminal: XmuFn,
    sigma_bound: Option<f64>,
}

impl ClosureCoefficients {
    pub fn new(label: impl Into<String>, d: usize, m: usize) -> Self {
        Self {
            label: label.into(),
            d,
            m,
            drift: Box::new(move |_, _, _, _| vec![0.0; d]),
            sigma: Box::new(move |_, _, _| {
                let mut s = vec![0.0; d * d];
                (0..d).for_each(|i| s[i * d + i] = 1.0);
                s
            }),
            driver: Box::new(move |_, _, _, _| vec![0.0; m]),
            terminal: Box::new(move |_, _| vec![0.0; m]),
            sigma_bound: None,
        }
    }

    pub fn drift(
        mut self,
        f: impl Fn(&[f64], &[f64], &[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.drift = Box::new(f);
        self
    }

    pub fn sigma(
        mut self,
        f: impl Fn(&[f64], &[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.sigma = Box::new(f);
        self
    }

    /// Constant diffusion `s · I`.
    pub fn sigma_scalar(self, s: f64) -> Self {
        let d = self.d;
        self.sigma(move |_, _, _| {
            let mut out = vec![0.0; d * d];
            (0..d).for_each(|i| out[i * d + i] = s);
            out
        })
        .with_sigma_bound(s.abs() * (d as f64).sqrt())
    }

    pub fn driver(
        mut self,
        f: impl Fn(&[f64], &[f64], &[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.driver = Box::new(f);
        self
    }

    pub fn terminal(
        mut self,
        f: impl Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Box::new(f);
        self
    }

    pub fn with_sigma_bound(mut self, bound: f64) -> Self {
        self.sigma_bound = Some(bound);
        self
    }
}

impl Coefficients for ClosureCoefficients {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }
    fn label(&self) -> &str {
        &self.label
    }
    fn drift(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        (self.drift)(x, y, z, nu)
    }
    fn sigma(&self, x: &[f64], y: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        (self.sigma)(x, y, nu)
    }
    fn driver(&self, x: &[f64], y: &[f64], z: &[f64], nu: &EmpiricalMeasure) -> Vec<f64> {
        (self.driver)(x, y, z, nu)
    }
    fn terminal(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        (self.terminal)(x, mu)
    }
    fn sigma_bound(&self) -> Option<f64> {
        self.sigma_bound
    }
}

/// Sampled lower bounds for the constants of the standing hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    /// Sampled Lipschitz ratios for `drift`, `sigma`, `driver`, `terminal`.
    pub lipschitz_l: BTreeMap<String, f64>,
    /// Largest sampled Frobenius norm of `σ`.
    pub sigma_bound: f64,
    pub declared_sigma_bound: Option<f64>,
    pub convexity_lambda: Option<f64>,
    pub monotonicity_min: Option<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

impl HypothesisReport {
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz_l.values().copied().fold(0.0, f64::max)
    }
}

/// Deterministic source of sample points `(x, y, z, ν)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeededSampler {
    pub seed: u64,
    /// Atoms of the sampled measures.
    pub atoms: usize,
    /// Standard deviation of sampled coordinates.
    pub scale: f64,
    /// Standard deviation of the single-variable perturbations.
    pub perturbation: f64,
}

impl SeededSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            atoms: 16,
            scale: 1.0,
            perturbation: 0.1,
        }
    }

    fn draws(&self, sample: usize, count: usize) -> Vec<f64> {
        let mut rng = StreamKey::new(self.seed, Domain::Sampler).rng(sample as u64, 0);
        (0..count)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Default)]
struct Ratios {
    drift: f64,
    sigma: f64,
    driver: f64,
    terminal: f64,
    sigma_norm: f64,
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

fn check_finite(v: &[f64], what: &str, sample: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(
            format!("estimate_lipschitz: {what}"),
            Some(sample),
        ))
    }
}

/// Sampled Lipschitz ratios of every coefficient.
///
/// Sample `s` draws a base point and moves one argument only, cycling through `x`, `y`, `z`, a
/// translation of the `X`-part of `ν` and a translation of its `Y`-part (translations have an
/// exact `W₂` of `|v|`). The result is a lower bound on the Lipschitz constants, and it is
/// monotone in `n` because sample `s` depends only on `(seed, s)`.
pub fn estimate_lipschitz<C: Coefficients + ?Sized>(
    c: &C,
    sampler: &SeededSampler,
    n: usize,
) -> Result<HypothesisReport> {
    if n < 2 {
        return Err(Error::invalid("estimate_lipschitz needs n >= 2"));
    }
    let (d, m) = c.dims();
    let na = sampler.atoms.max(1);
    let need = d + m + m * d + na * (d + m) + d + m + m * d + d + m;
    let mut r = Ratios::default();
    for s in 0..n {
        let w = sampler.draws(s, need);
        let mut it = w.iter().copied();
        let mut take = |k: usize, scale: f64| -> Vec<f64> {
            (0..k).map(|_| it.next().unwrap() * scale).collect()
        };
        let x = take(d, sampler.scale);
        let y = take(m, sampler.scale);
        let z = take(m * d, sampler.scale);
        let atoms = take(na * (d + m), sampler.scale);
        let nu = EmpiricalMeasure::from_flat(d + m, atoms)?;
        let mu = nu.marginal(0..d);
        let dx = take(d, sampler.perturbation);
        let dy = take(m, sampler.perturbation);
        let dz = take(m * d, sampler.perturbation);
        let vx = take(d, sampler.perturbation);
        let vy = take(m, sampler.perturbation);

        let (mut x2, mut y2, mut z2, mut nu2) = (x.clone(), y.clone(), z.clone(), None);
        let dist = match s % 5 {
            0 => {
                x2.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                diff_norm(&x, &x2)
            }
            1 => {
                y2.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                diff_norm(&y, &y2)
            }
            2 => {
                z2.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
                diff_norm(&z, &z2)
            }
            3 => {
                let mut v = vx.clone();
                v.extend(std::iter::repeat_n(0.0, m));
                nu2 = Some(nu.translated(&v));
                vx.iter().map(|a| a * a).sum::<f64>().sqrt()
            }
            _ => {
                let mut v = vec![0.0; d];
                v.extend(&vy);
                nu2 = Some(nu.translated(&v));
                vy.iter().map(|a| a * a).sum::<f64>().sqrt()
            }
        };
        if m == 0 && (s % 5 == 1 || s % 5 == 2 || s % 5 == 4) || dist == 0.0 {
            continue;
        }
        let nu2 = nu2.unwrap_or_else(|| nu.clone());
        let mu2 = nu2.marginal(0..d);

        let b1 = c.drift(&x, &y, &z, &nu);
        let b2 = c.drift(&x2, &y2, &z2, &nu2);
        let s1 = c.sigma(&x, &y, &nu);
        let s2 = c.sigma(&x2, &y2, &nu2);
        let f1 = c.driver(&x, &y, &z, &nu);
        let f2 = c.driver(&x2, &y2, &z2, &nu2);
        let g1 = c.terminal(&x, &mu);
        let g2 = c.terminal(&x2, &mu2);
        for (v, what) in [
            (&b1, "drift"),
            (&b2, "drift"),
            (&s1, "sigma"),
            (&s2, "sigma"),
            (&f1, "driver"),
            (&f2, "driver"),
            (&g1, "terminal"),
            (&g2, "terminal"),
        ] {
            check_finite(v, what, s)?;
        }
        r.drift = r.drift.max(diff_norm(&b1, &b2) / dist);
        r.sigma = r.sigma.max(diff_norm(&s1, &s2) / dist);
        r.driver = r.driver.max(diff_norm(&f1, &f2) / dist);
        // g has no (y, z) arguments
        if matches!(s % 5, 0 | 3) {
            r.terminal = r.terminal.max(diff_norm(&g1, &g2) / dist);
        }
        let frob = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        r.sigma_norm = r.sigma_norm.max(frob(&s1)).max(frob(&s2));
    }
    let mut lipschitz_l = BTreeMap::new();
    lipschitz_l.insert("drift".to_string(), r.drift);
    lipschitz_l.insert("sigma".to_string(), r.sigma);
    lipschitz_l.insert("driver".to_string(), r.driver);
    lipschitz_l.insert("terminal".to_string(), r.terminal);
    Ok(HypothesisReport {
        lipschitz_l,
        sigma_bound: r.sigma_norm,
        declared_sigma_bound: c.sigma_bound(),
        convexity_lambda: None,
        monotonicity_min: None,
        sample_count: n,
        seed: sampler.seed,
    })
}

/// `∫ (h(x, μ) − h(x, μ′)) d(μ − μ′)(x)`, exactly on the atoms.
pub fn lasry_lions_pairing<H>(h: &H, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64>
where
    H: Fn(&[f64], &EmpiricalMeasure) -> f64 + ?Sized,
{
    if mu.len() != nu.len() {
        return Err(Error::invalid(format!(
            "Lasry-Lions pair has {} vs {} atoms",
            mu.len(),
            nu.len()
        )));
    }
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("Lasry-Lions pair has mismatched dimensions"));
    }
    let n = mu.len() as f64;
    let a: f64 = mu.atoms().map(|x| h(x, mu) - h(x, nu)).sum::<f64>() / n;
    let b: f64 = nu.atoms().map(|x| h(x, mu) - h(x, nu)).sum::<f64>() / n;
    Ok(a - b)
}

/// Minimum of the Lasry–Lions pairing over `pairs`; nonnegative iff monotonicity holds on the
/// sample.
pub fn check_lasry_lions<H>(h: &H, pairs: &[(EmpiricalMeasure, EmpiricalMeasure)]) -> Result<f64>
where
    H: Fn(&[f64], &EmpiricalMeasure) -> f64 + ?Sized,
{
    if pairs.is_empty() {
        return Err(Error::invalid("check_lasry_lions needs at least one pair"));
    }
    let mut min = f64::INFINITY;
    for (mu, nu) in pairs {
        let v = lasry_lions_pairing(h, mu, nu)?;
        if !v.is_finite() {
            return Err(Error::non_finite("check_lasry_lions", None));
        }
        min = min.min(v);
    }
    Ok(min)
}

/// One sample `(x, μ, y, z, α, x′, α′)` for [`check_convexity`].
#[derive(Debug, Clone)]
pub struct ConvexitySample {
    pub x: Vec<f64>,
    pub mu: EmpiricalMeasure,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub alpha: Vec<f64>,
    pub x2: Vec<f64>,
    pub alpha2: Vec<f64>,
}

/// Sampled minimum of
/// `[H(x′,α′) − H(x,α) − ⟨x′−x, ∂_xH(x,α)⟩ − ⟨α′−α, ∂_αH(x,α)⟩] / |α′−α|²`
/// with gradients by central differences of step `h`.
pub fn check_convexity<H>(hamiltonian: &H, samples: &[ConvexitySample], h: f64) -> Result<f64>
where
    H: Fn(&[f64], &EmpiricalMeasure, &[f64], &[f64], &[f64]) -> f64 + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::invalid("check_convexity needs at least one sample"));
    }
    let mut min = f64::INFINITY;
    for (si, s) in samples.iter().enumerate() {
        let da2: f64 = s
            .alpha
            .iter()
            .zip(&s.alpha2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if da2 == 0.0 {
            return Err(Error::invalid(format!(
                "convexity sample {si} has alpha' == alpha"
            )));
        }
        let hh = |x: &[f64], a: &[f64]| hamiltonian(x, &s.mu, &s.y, &s.z, a);
        let base = hh(&s.x, &s.alpha);
        let mut lin = 0.0;
        let mut xp = s.x.clone();
        for j in 0..s.x.len() {
            xp[j] = s.x[j] + h;
            let up = hh(&xp, &s.alpha);
            xp[j] = s.x[j] - h;
            let um = hh(&xp, &s.alpha);
            xp[j] = s.x[j];
            lin += (s.x2[j] - s.x[j]) * (up - um) / (2.0 * h);
        }
        let mut ap = s.alpha.clone();
        for j in 0..s.alpha.len() {
            ap[j] = s.alpha[j] + h;
            let up = hh(&s.x, &ap);
            ap[j] = s.alpha[j] - h;
            let um = hh(&s.x, &ap);
            ap[j] = s.alpha[j];
            lin += (s.alpha2[j] - s.alpha[j]) * (up - um) / (2.0 * h);
        }
        let v = (hh(&s.x2, &s.alpha2) - base - lin) / da2;
        if !v.is_finite() {
            return Err(Error::non_finite("check_convexity", Some(si)));
        }
        min = min.min(v);
    }
    Ok(min)
}

/// Random convexity samples with `x, α, x′, α′` drawn from `N(0, scale²)`.
pub fn convexity_samples(
    d: usize,
    k: usize,
    m: usize,
    count: usize,
    sampler: &SeededSampler,
) -> Result<Vec<ConvexitySample>> {
    (0..count)
        .map(|s| {
            let w = sampler.draws(s, 2 * d + 2 * k + m + m * d);
            let mut it = w.into_iter().map(|v| v * sampler.scale);
            let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| it.next().unwrap()).collect() };
            Ok(ConvexitySample {
                x: take(d),
                alpha: take(k),
                x2: take(d),
                alpha2: take(k),
                y: take(m),
                z: take(m * d),
                mu: EmpiricalMeasure::dirac(&vec![0.0; d])?,
            })
        })
        .collect()
}

/// Pairs of Gaussian measures with `n` atoms each and different means, for monotonicity checks.
pub fn measure_pairs(
    d: usize,
    n: usize,
    count: usize,
    sampler: &SeededSampler,
) -> Result<Vec<(EmpiricalMeasure, EmpiricalMeasure)>> {
    (0..count)
        .map(|s| {
            let w = sampler.draws(s, 2 * n * d + 2 * d);
            let (shift, atoms) = w.split_at(2 * d);
            let a: Vec<f64> = atoms[..n * d]
                .iter()
                .enumerate()
                .map(|(i, v)| v * sampler.scale + shift[i % d])
                .collect();
            let b: Vec<f64> = atoms[n * d..]
                .iter()
                .enumerate()
                .map(|(i, v)| v * sampler.scale + shift[d + i % d])
                .collect();
            Ok((
                EmpiricalMeasure::from_flat(d, a)?,
                EmpiricalMeasure::from_flat(d, b)?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_drift_has_zero_lipschitz() {
        let c = ClosureCoefficients::new("const", 1, 1).drift(|_, _, _, _| vec![3.0]);
        let r = estimate_lipschitz(&c, &SeededSampler::new(1), 50).unwrap();
        assert_eq!(r.lipschitz_l["drift"], 0.0);
        assert_eq!(r.sample_count, 50);
    }

    #[test]
    fn linear_drift_gives_its_slope() {
        let c = ClosureCoefficients::new("lin", 1, 1).drift(|x, _, _, _| vec![2.0 * x[0]]);
        let r = estimate_lipschitz(&c, &SeededSampler::new(2), 40).unwrap();
        assert!((r.lipschitz_l["drift"] - 2.0).abs() < 1e-12);
        assert!((r.sigma_bound - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lasry_lions_analytic_value() {
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 2.0]).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&[-1.0, 0.5, 0.0]).unwrap();
        let (m, mp) = (1.0, -0.5 / 3.0);
        for rho in [-1.0, 1.0] {
            let h =
                move |x: &[f64], mu: &EmpiricalMeasure| 0.5 * (x[0] - rho * mu.mean()[0]).powi(2);
            let v = check_lasry_lions(&h, &[(mu.clone(), nu.clone())]).unwrap();
            assert!((v + rho * (m - mp) * (m - mp)).abs() < 1e-12);
        }
        let indep = |x: &[f64], _: &EmpiricalMeasure| x[0] * x[0];
        assert_eq!(
            check_lasry_lions(&indep, &[(mu.clone(), nu.clone())]).unwrap(),
            0.0
        );
        let short = EmpiricalMeasure::from_scalars(&[1.0]).unwrap();
        assert!(check_lasry_lions(&indep, &[(mu, short)]).is_err());
    }

    #[test]
    fn convexity_of_quadratic_control_cost() {
        let sampler = SeededSampler::new(4);
        let samples = convexity_samples(1, 1, 1, 30, &sampler).unwrap();
        let h = |x: &[f64], _: &EmpiricalMeasure, y: &[f64], _: &[f64], a: &[f64]| {
            y[0] * (x[0] + a[0]) + 0.5 * a[0] * a[0]
        };
        let lam = check_convexity(&h, &samples, 1e-4).unwrap();
        assert!((lam - 0.5).abs() < 1e-6, "{lam}");
        let affine =
            |x: &[f64], _: &EmpiricalMeasure, y: &[f64], _: &[f64], a: &[f64]| y[0] * a[0] + x[0];
        assert!(check_convexity(&affine, &samples, 1e-4).unwrap() <= 1e-6);
        let mut bad = samples[0].clone();
        bad.alpha2 = bad.alpha.clone();
        assert!(check_convexity(&h, &[bad], 1e-4).is_err());
    }
}
