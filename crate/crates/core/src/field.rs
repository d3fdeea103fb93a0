//! Functions of `(t, x, μ)` and the finite-difference stencils shared by the residual checks.

use nalgebra::DMatrix;

use crate::measure::EmpiricalMeasure;

/// A (possibly vector-valued) function `(t, x, μ) ↦ R^m` on `[t0, T] × R^d × P₂(R^d)`.
///
/// Decoupling fields, oracle fields and value functions all implement this. Implementations
/// must be pure so that concurrent evaluation is safe.
pub trait Field: Sync {
    fn state_dim(&self) -> usize;
    fn value_dim(&self) -> usize;
    fn time_domain(&self) -> (f64, f64);
    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64>;
}

impl<F: Field + ?Sized> Field for &F {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn value_dim(&self) -> usize {
        (**self).value_dim()
    }
    fn time_domain(&self) -> (f64, f64) {
        (**self).time_domain()
    }
    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        (**self).eval(t, x, mu)
    }
}

/// Field given by a closure; handy for analytic test fields.
pub struct FnField<F> {
    d: usize,
    m: usize,
    domain: (f64, f64),
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(f64, &[f64], &EmpiricalMeasure) -> Vec<f64> + Sync,
{
    pub fn new(d: usize, m: usize, domain: (f64, f64), f: F) -> Self {
        Self { d, m, domain, f }
    }
}

impl<F> Field for FnField<F>
where
    F: Fn(f64, &[f64], &EmpiricalMeasure) -> Vec<f64> + Sync,
{
    fn state_dim(&self) -> usize {
        self.d
    }
    fn value_dim(&self) -> usize {
        self.m
    }
    fn time_domain(&self) -> (f64, f64) {
        self.domain
    }
    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        (self.f)(t, x, mu)
    }
}

/// Central time derivative, one-sided (first order) when the stencil would leave the domain.
pub fn time_derivative<F: Field + ?Sized>(
    f: &F,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    h: f64,
) -> Vec<f64> {
    let (lo, hi) = f.time_domain();
    let (a, b) = if t - h < lo {
        (t, t + h)
    } else if t + h > hi {
        (t - h, t)
    } else {
        (t - h, t + h)
    };
    let ua = f.eval(a, x, mu);
    let ub = f.eval(b, x, mu);
    ua.iter().zip(&ub).map(|(p, q)| (q - p) / (b - a)).collect()
}

/// `m × d` Jacobian in `x` by central differences (rows are gradients of the components).
pub fn space_jacobian<F: Field + ?Sized>(
    f: &F,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    h: f64,
) -> DMatrix<f64> {
    let d = x.len();
    let m = f.value_dim();
    let mut jac = DMatrix::zeros(m, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let up = f.eval(t, &xp, mu);
        xp[j] = x[j] - h;
        let um = f.eval(t, &xp, mu);
        xp[j] = x[j];
        for r in 0..m {
            jac[(r, j)] = (up[r] - um[r]) / (2.0 * h);
        }
    }
    jac
}

/// Hessians in `x` of every component, by central differences. `center` is `f(t, x, μ)`.
pub fn space_hessians<F: Field + ?Sized>(
    f: &F,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    center: &[f64],
    h: f64,
) -> Vec<DMatrix<f64>> {
    let d = x.len();
    let m = f.value_dim();
    let mut out = vec![DMatrix::zeros(d, d); m];
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let up = f.eval(t, &xp, mu);
        xp[j] = x[j] - h;
        let um = f.eval(t, &xp, mu);
        xp[j] = x[j];
        for r in 0..m {
            out[r][(j, j)] = (up[r] - 2.0 * center[r] + um[r]) / (h * h);
        }
        for l in (j + 1)..d {
            let mut corner = |sj: f64, sl: f64| {
                xp[j] = x[j] + sj * h;
                xp[l] = x[l] + sl * h;
                let v = f.eval(t, &xp, mu);
                xp[j] = x[j];
                xp[l] = x[l];
                v
            };
            let pp = corner(1.0, 1.0);
            let pm = corner(1.0, -1.0);
            let mp = corner(-1.0, 1.0);
            let mm = corner(-1.0, -1.0);
            for r in 0..m {
                let v = (pp[r] - pm[r] - mp[r] + mm[r]) / (4.0 * h * h);
                out[r][(j, l)] = v;
                out[r][(l, j)] = v;
            }
        }
    }
    out
}
