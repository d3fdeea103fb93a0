//! Forward simulation, backward regression and the Picard loop on the law flow, run on a family
//! of ensembles that share their Brownian increments.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::basis::Basis;
use super::field::{DecouplingField, FieldDiagnostics};
use super::{PathEnsemble, SolverParams};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{law_gap, EmpiricalMeasure};
use crate::rng::{match_moments, Domain, StreamKey};
use crate::scenario::Coefficients;

/// Terminal condition of one run: the scenario's `g`, or the first node of a later block's field.
#[derive(Clone, Copy)]
pub(crate) enum Terminal<'a> {
    Exact,
    Field(&'a DecouplingField),
}

pub(crate) struct Ctx<'a> {
    pub c: &'a dyn Coefficients,
    pub grid: TimeGrid,
    /// Global index of the first step, so that blocks and restarts reuse the same increments.
    pub offset: usize,
    pub terminal: Terminal<'a>,
    pub params: &'a SolverParams,
    pub basis: Basis,
    pub d: usize,
    pub m: usize,
    pub n: usize,
}

/// Paths of every ensemble in the family, indexed `[ensemble][node]`, flat per node.
#[derive(Clone)]
pub(crate) struct Run {
    pub x: Vec<Vec<Vec<f64>>>,
    pub y: Vec<Vec<Vec<f64>>>,
    /// Forward `Z` for steps `0..K`.
    pub z: Vec<Vec<Vec<f64>>>,
    pub dw: Vec<Vec<Vec<f64>>>,
}

pub(crate) struct Outcome {
    pub run: Run,
    pub field: DecouplingField,
}

fn nonfinite_index(v: &[f64], width: usize) -> Option<usize> {
    v.iter()
        .position(|x| !x.is_finite())
        .map(|p| p / width.max(1))
}

impl Ctx<'_> {
    fn measure(&self, flat: &[f64], dim: usize) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_flat(dim, flat.to_vec())
    }

    fn increments(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let dt = self.grid.dt();
        let key = StreamKey::new(self.params.seed, Domain::Increments);
        let step = (self.offset + k) as u64;
        let mut dw = vec![0.0; self.n * d];
        dw.par_chunks_mut(d).enumerate().for_each(|(i, c)| {
            key.fill_normals(i as u64, step, c);
            c.iter_mut().for_each(|v| *v *= dt.sqrt());
        });
        match_moments(self.params.noise, dt, d, x, &mut dw);
        dw
    }

    fn terminal_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (d, m) = (self.d, self.m);
        let mu = self.measure(x, d)?;
        let mut out = vec![0.0; self.n * m];
        match self.terminal {
            Terminal::Exact => {
                let g = self.c.freeze_terminal(&mu);
                out.par_chunks_mut(m)
                    .enumerate()
                    .for_each(|(i, o)| g.eval(&x[i * d..(i + 1) * d], o));
            }
            Terminal::Field(f) => {
                let mean = mu.mean();
                out.par_chunks_mut(m).enumerate().for_each_init(
                    || vec![0.0; f.basis.len()],
                    |feat, (i, o)| f.node_value_into(0, &x[i * d..(i + 1) * d], mean, feat, o),
                );
            }
        }
        if let Some(i) = nonfinite_index(&out, m) {
            return Err(Error::non_finite("terminal condition", Some(i)));
        }
        Ok(out)
    }

    /// Euler–Maruyama pass of every ensemble with `Y = U(t_k, X_k, μ_k)` and `Z = ∂_xU σ` from
    /// `field` (zero when absent).
    pub fn forward(&self, x0: &[Vec<f64>], field: Option<&DecouplingField>) -> Result<Run> {
        let (d, m, n) = (self.d, self.m, self.n);
        let k_steps = self.grid.steps();
        let dt = self.grid.dt();
        let mut run = Run {
            x: Vec::new(),
            y: Vec::new(),
            z: Vec::new(),
            dw: Vec::new(),
        };
        for x_init in x0 {
            let mut xs = vec![x_init.clone()];
            let mut ys = Vec::with_capacity(k_steps + 1);
            let mut zs = Vec::with_capacity(k_steps);
            let mut dws = Vec::with_capacity(k_steps);
            for k in 0..k_steps {
                let xk = &xs[k];
                let mu = self.measure(xk, d)?;
                let mut yk = vec![0.0; n * m];
                if let Some(f) = field {
                    let mean = mu.mean();
                    yk.par_chunks_mut(m).enumerate().for_each_init(
                        || vec![0.0; f.basis.len()],
                        |feat, (i, o)| f.node_value_into(k, &xk[i * d..(i + 1) * d], mean, feat, o),
                    );
                }
                if let Some(i) = nonfinite_index(&yk, m) {
                    return Err(Error::non_finite(
                        format!("forward Y at step {}", self.offset + k),
                        Some(i),
                    ));
                }
                let nu = EmpiricalMeasure::joint(&mu, &self.measure(&yk, m)?)?;
                let frozen = self.c.freeze(&nu);
                let dw = self.increments(k, xk);
                let mut zk = vec![0.0; n * m * d];
                let mut next = vec![0.0; n * d];
                next.par_chunks_mut(d)
                    .zip(zk.par_chunks_mut(m * d))
                    .enumerate()
                    .for_each_init(
                        || {
                            (
                                vec![0.0; d * d],
                                vec![0.0; d],
                                vec![0.0; m * d],
                                vec![0.0; field.map_or(0, |f| f.basis.len() * d)],
                            )
                        },
                        |(sig, b, jac, grad), (i, (nx, zi))| {
                            let x = &xk[i * d..(i + 1) * d];
                            let y = &yk[i * m..(i + 1) * m];
                            frozen.sigma(x, y, sig);
                            if let Some(f) = field {
                                f.node_jacobian_into(k, x, grad, jac);
                                for r in 0..m {
                                    for j in 0..d {
                                        zi[r * d + j] =
                                            (0..d).map(|l| jac[r * d + l] * sig[l * d + j]).sum();
                                    }
                                }
                            }
                            frozen.drift(x, y, zi, b);
                            let w = &dw[i * d..(i + 1) * d];
                            for r in 0..d {
                                nx[r] = x[r]
                                    + b[r] * dt
                                    + (0..d).map(|j| sig[r * d + j] * w[j]).sum::<f64>();
                            }
                        },
                    );
                if let Some(i) = nonfinite_index(&next, d) {
                    return Err(Error::non_finite(
                        format!("forward X at step {}", self.offset + k + 1),
                        Some(i),
                    ));
                }
                xs.push(next);
                ys.push(yk);
                zs.push(zk);
                dws.push(dw);
            }
            ys.push(self.terminal_values(&xs[k_steps])?);
            run.x.push(xs);
            run.y.push(ys);
            run.z.push(zs);
            run.dw.push(dws);
        }
        Ok(run)
    }

    /// Joint empirical laws of `(X, Y)` per ensemble and node.
    pub fn joints(&self, run: &Run) -> Result<Vec<Vec<EmpiricalMeasure>>> {
        run.x
            .iter()
            .zip(&run.y)
            .map(|(xs, ys)| {
                xs.iter()
                    .zip(ys)
                    .map(|(x, y)| {
                        EmpiricalMeasure::joint(
                            &self.measure(x, self.d)?,
                            &self.measure(y, self.m)?,
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// Least squares of `targets` (width `q`) on the features, pooled over the family.
    fn regress(
        &self,
        feats: &[Vec<f64>],
        targets: &[Vec<f64>],
        q: usize,
        step: usize,
    ) -> Result<Vec<f64>> {
        let p = self.basis.len();
        let mut g = DMatrix::<f64>::zeros(p, p);
        let mut b = DMatrix::<f64>::zeros(p, q);
        for (fe, te) in feats.iter().zip(targets) {
            for (phi, t) in fe.chunks_exact(p).zip(te.chunks_exact(q)) {
                for a in 0..p {
                    for c in 0..p {
                        g[(a, c)] += phi[a] * phi[c];
                    }
                    for r in 0..q {
                        b[(a, r)] += phi[a] * t[r];
                    }
                }
            }
        }
        let scale: Vec<f64> = (0..p).map(|a| g[(a, a)]).collect();
        if scale.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::IllConditioned { step });
        }
        let s = DVector::from_iterator(p, scale.iter().map(|v| 1.0 / v.sqrt()));
        let gs = DMatrix::from_fn(p, p, |a, c| g[(a, c)] * s[a] * s[c]);
        let bs = DMatrix::from_fn(p, q, |a, r| b[(a, r)] * s[a]);
        let chol = gs.cholesky().ok_or(Error::IllConditioned { step })?;
        let l = chol.l();
        let diag: Vec<f64> = (0..p).map(|a| l[(a, a)] * l[(a, a)]).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if min < 1e-13 * max {
            return Err(Error::IllConditioned { step });
        }
        let sol = chol.solve(&bs);
        let mut out = vec![0.0; p * q];
        for a in 0..p {
            for r in 0..q {
                out[a * q + r] = sol[(a, r)] * s[a];
            }
        }
        Ok(out)
    }

    fn features(&self, x: &[f64], mean: &[f64]) -> Vec<f64> {
        let (d, p) = (self.d, self.basis.len());
        let mut out = vec![0.0; self.n * p];
        out.par_chunks_mut(p)
            .enumerate()
            .for_each(|(i, o)| self.basis.eval_into(&x[i * d..(i + 1) * d], mean, o));
        out
    }

    fn apply(&self, feats: &[f64], coef: &[f64], q: usize) -> Vec<f64> {
        let p = self.basis.len();
        let mut out = vec![0.0; self.n * q];
        out.par_chunks_mut(q)
            .zip(feats.par_chunks(p))
            .for_each(|(o, phi)| {
                for (a, ph) in phi.iter().enumerate() {
                    for r in 0..q {
                        o[r] += coef[a * q + r] * ph;
                    }
                }
            });
        out
    }

    fn empty_field(&self) -> DecouplingField {
        DecouplingField {
            grid: self.grid,
            basis: self.basis.clone(),
            value_dim: self.m,
            coefficients: Vec::new(),
            snapshots: Vec::new(),
            diagnostics: FieldDiagnostics::default(),
            seed: self.params.seed,
        }
    }

    /// Backward regression on the paths of `run`, with coefficients frozen at `laws`.
    ///
    /// Target at step `k`: `Y_{k+1} + Δt f(X_k, Y_k, Z_k, ν_k) − ∂_xU(t_{k+1}, X_k) σ ΔW_k`. The
    /// last term has zero conditional mean and removes the martingale noise from the target.
    pub fn backward(&self, run: &Run, laws: &[Vec<EmpiricalMeasure>]) -> Result<DecouplingField> {
        let (d, m, n) = (self.d, self.m, self.n);
        let k_steps = self.grid.steps();
        let dt = self.grid.dt();
        let p = self.basis.len();
        let fam = run.x.len();
        let mut field = self.empty_field();
        field.coefficients = vec![Vec::new(); k_steps + 1];
        field.diagnostics.fit_rms = vec![0.0; k_steps + 1];
        field.diagnostics.z_consistency = vec![0.0; k_steps + 1];
        field.snapshots = run.x[0]
            .iter()
            .map(|x| self.measure(x, d))
            .collect::<Result<_>>()?;

        let means: Vec<Vec<Vec<f64>>> = run
            .x
            .iter()
            .map(|xs| {
                xs.iter()
                    .map(|x| self.measure(x, d).map(|mu| mu.mean().to_vec()))
                    .collect()
            })
            .collect::<Result<_>>()?;

        let feats: Vec<Vec<f64>> = (0..fam)
            .map(|e| self.features(&run.x[e][k_steps], &means[e][k_steps]))
            .collect();
        let terminal: Vec<Vec<f64>> = (0..fam).map(|e| run.y[e][k_steps].clone()).collect();
        let coef = self.regress(&feats, &terminal, m, self.offset + k_steps)?;
        let mut ss = 0.0;
        for e in 0..fam {
            let fitted = self.apply(&feats[e], &coef, m);
            ss += fitted
                .iter()
                .zip(&terminal[e])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        field.diagnostics.fit_rms[k_steps] = (ss / (fam * n) as f64).sqrt();
        field.coefficients[k_steps] = coef;
        let mut ynext = terminal;

        for k in (0..k_steps).rev() {
            let mut raws = Vec::with_capacity(fam);
            let mut targets = Vec::with_capacity(fam);
            let mut zt = Vec::with_capacity(fam);
            let mut sigmas = Vec::with_capacity(fam);
            let mut feats = Vec::with_capacity(fam);
            for e in 0..fam {
                let frozen = self.c.freeze(&laws[e][k]);
                let (xk, yk, zk, dw) = (&run.x[e][k], &run.y[e][k], &run.z[e][k], &run.dw[e][k]);
                let yn = &ynext[e];
                let mut raw = vec![0.0; n * m];
                let mut target = vec![0.0; n * m];
                let mut zmart = vec![0.0; n * m * d];
                let mut sig_all = vec![0.0; n * d * d];
                let cnext = &field.coefficients[k + 1];
                let mean_next = &means[e][k + 1];
                raw.par_chunks_mut(m)
                    .zip(target.par_chunks_mut(m))
                    .zip(zmart.par_chunks_mut(m * d))
                    .zip(sig_all.par_chunks_mut(d * d))
                    .enumerate()
                    .for_each_init(
                        || {
                            (
                                vec![0.0; m],
                                vec![0.0; p * d],
                                vec![0.0; m * d],
                                vec![0.0; p],
                                vec![0.0; d],
                            )
                        },
                        |(f, grad, jac, phi, js), (i, (((ra, ta), za), sig))| {
                            let x = &xk[i * d..(i + 1) * d];
                            let y = &yk[i * m..(i + 1) * m];
                            let z = &zk[i * m * d..(i + 1) * m * d];
                            let w = &dw[i * d..(i + 1) * d];
                            frozen.driver(x, y, z, f);
                            frozen.sigma(x, y, sig);
                            field_jacobian(&self.basis, cnext, m, x, grad, jac);
                            self.basis.eval_into(x, mean_next, phi);
                            for r in 0..m {
                                let yv = yn[i * m + r];
                                ra[r] = yv + dt * f[r];
                                let mut cv = 0.0;
                                for j in 0..d {
                                    js[j] = (0..d).map(|l| jac[r * d + l] * sig[l * d + j]).sum();
                                    cv += js[j] * w[j];
                                }
                                ta[r] = ra[r] - cv;
                                // Z target with the linearised next field as control variate:
                                // unbiased, and exact when the next field is affine in x.
                                let base: f64 = phi
                                    .iter()
                                    .enumerate()
                                    .map(|(a, v)| cnext[a * m + r] * v)
                                    .sum();
                                for j in 0..d {
                                    za[r * d + j] = js[j] + (yv - base - cv) * w[j] / dt;
                                }
                            }
                        },
                    );
                if let Some(i) = nonfinite_index(&raw, m) {
                    return Err(Error::non_finite(
                        format!("backward target at step {}", self.offset + k),
                        Some(i),
                    ));
                }
                feats.push(self.features(xk, &means[e][k]));
                raws.push(raw);
                targets.push(target);
                zt.push(zmart);
                sigmas.push(sig_all);
            }
            let coef = self.regress(&feats, &targets, m, self.offset + k)?;
            let zcoef = self.regress(&feats, &zt, m * d, self.offset + k)?;
            let mut fit_ss = 0.0;
            let mut z_ss = 0.0;
            let mut fitted_all = Vec::with_capacity(fam);
            for e in 0..fam {
                let fitted = self.apply(&feats[e], &coef, m);
                fit_ss += fitted
                    .iter()
                    .zip(&raws[e])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                let zhat = self.apply(&feats[e], &zcoef, m * d);
                let xk = &run.x[e][k];
                let mut grad = vec![0.0; p * d];
                let mut jac = vec![0.0; m * d];
                for i in 0..n {
                    field_jacobian(
                        &self.basis,
                        &coef,
                        m,
                        &xk[i * d..(i + 1) * d],
                        &mut grad,
                        &mut jac,
                    );
                    let sig = &sigmas[e][i * d * d..(i + 1) * d * d];
                    for r in 0..m {
                        for j in 0..d {
                            let js: f64 = (0..d).map(|l| jac[r * d + l] * sig[l * d + j]).sum();
                            z_ss += (zhat[i * m * d + r * d + j] - js).powi(2);
                        }
                    }
                }
                fitted_all.push(fitted);
            }
            field.diagnostics.fit_rms[k] = (fit_ss / (fam * n) as f64).sqrt();
            field.diagnostics.z_consistency[k] = (z_ss / (fam * n) as f64).sqrt();
            field.coefficients[k] = coef;
            ynext = fitted_all;
        }
        Ok(field)
    }

    /// Picard iteration on the law flow.
    ///
    /// `law⁰` comes from a forward pass with `Y = 0`; iteration `n` fits a field with the
    /// coefficients frozen at (a damped version of) `law^{n−1}` and simulates `law^n` with it.
    /// Stops when `sup_k W₂(law^n_k, law^{n−1}_k) < tol_law`, then refits on the final paths.
    pub fn picard(&self, x0: &[Vec<f64>]) -> Result<Outcome> {
        let params = self.params;
        let mut run = self.forward(x0, None)?;
        let mut laws = self.joints(&run)?;
        let mut frozen = laws.clone();
        let mut theta = params.damping;
        let mut gaps: Vec<f64> = Vec::new();
        for iter in 1..=params.picard_max {
            let step = || -> Result<(Run, Vec<Vec<EmpiricalMeasure>>, f64)> {
                let field = self.backward(&run, &frozen)?;
                let next = self.forward(x0, Some(&field))?;
                let next_laws = self.joints(&next)?;
                let mut gap: f64 = 0.0;
                for (a, b) in next_laws.iter().flatten().zip(laws.iter().flatten()) {
                    gap = gap.max(law_gap(a, b)?);
                }
                if !gap.is_finite() {
                    return Err(Error::non_finite("Picard law gap", None));
                }
                Ok((next, next_laws, gap))
            };
            let (next, next_laws, gap) = match step() {
                Ok(v) => v,
                // Numerical breakdown after the first iterate is a symptom of divergence.
                Err(e @ (Error::IllConditioned { .. } | Error::NumericDomain { .. }))
                    if !gaps.is_empty() =>
                {
                    return Err(Error::ConvergenceFailure {
                        context: format!(
                            "Picard iteration on [{}, {}] diverged at iteration {iter} ({e})",
                            self.grid.t0(),
                            self.grid.t_end()
                        ),
                        last_gaps: gaps[gaps.len().saturating_sub(2)..].to_vec(),
                    })
                }
                Err(e) => return Err(e),
            };
            log::debug!(
                "picard [{}, {}] iteration {iter}: gap {gap:.3e}, theta {theta}",
                self.grid.t0(),
                self.grid.t_end()
            );
            if let Some(&last) = gaps.last() {
                if gap > last && theta > 1.0 / 64.0 {
                    theta *= 0.5;
                    log::info!(
                        "law gap increased ({last:.3e} -> {gap:.3e}); damping set to {theta}"
                    );
                }
            }
            gaps.push(gap);
            if gap < params.tol_law {
                let mut field = self.backward(&next, &next_laws)?;
                field.diagnostics.picard_gaps = gaps;
                return Ok(Outcome { run: next, field });
            }
            if theta < 1.0 {
                for (f, l) in frozen.iter_mut().flatten().zip(next_laws.iter().flatten()) {
                    let mixed: Vec<f64> = f
                        .as_flat()
                        .iter()
                        .zip(l.as_flat())
                        .map(|(a, b)| (1.0 - theta) * a + theta * b)
                        .collect();
                    *f = EmpiricalMeasure::from_flat(f.dim(), mixed)?;
                }
            } else {
                frozen = next_laws.clone();
            }
            run = next;
            laws = next_laws;
        }
        let last_gaps = gaps[gaps.len().saturating_sub(2)..].to_vec();
        Err(Error::ConvergenceFailure {
            context: format!(
                "Picard iteration on [{}, {}] after {} iterations (tol_law = {})",
                self.grid.t0(),
                self.grid.t_end(),
                params.picard_max,
                params.tol_law
            ),
            last_gaps,
        })
    }

    /// Path ensemble of the first family member: forward `Y`, `Z` for `k < K`, exact terminal `Y`
    /// and `Z_K = ∂_xU(T) σ` from the fitted terminal node.
    pub fn ensemble(&self, run: &Run, field: &DecouplingField) -> Result<PathEnsemble> {
        let (d, m, n) = (self.d, self.m, self.n);
        let k_steps = self.grid.steps();
        let xk = &run.x[0][k_steps];
        let yk = &run.y[0][k_steps];
        let nu = EmpiricalMeasure::joint(&self.measure(xk, d)?, &self.measure(yk, m)?)?;
        let frozen = self.c.freeze(&nu);
        let mut zt = vec![0.0; n * m * d];
        let p = self.basis.len();
        zt.par_chunks_mut(m * d).enumerate().for_each_init(
            || (vec![0.0; d * d], vec![0.0; p * d], vec![0.0; m * d]),
            |(sig, grad, jac), (i, zi)| {
                let x = &xk[i * d..(i + 1) * d];
                frozen.sigma(x, &yk[i * m..(i + 1) * m], sig);
                field.node_jacobian_into(k_steps, x, grad, jac);
                for r in 0..m {
                    for j in 0..d {
                        zi[r * d + j] = (0..d).map(|l| jac[r * d + l] * sig[l * d + j]).sum();
                    }
                }
            },
        );
        let mut z = run.z[0].clone();
        z.push(zt);
        Ok(PathEnsemble {
            grid: self.grid,
            dim: d,
            value_dim: m,
            particles: n,
            x: run.x[0].clone(),
            y: run.y[0].clone(),
            z,
            dw: run.dw[0].clone(),
            seed: self.params.seed,
        })
    }
}

fn field_jacobian(
    basis: &Basis,
    coef: &[f64],
    m: usize,
    x: &[f64],
    grad: &mut [f64],
    out: &mut [f64],
) {
    let d = basis.dim();
    basis.gradient_into(x, grad);
    out.iter_mut().for_each(|v| *v = 0.0);
    for f in 0..basis.monomials() {
        for r in 0..m {
            let c = coef[f * m + r];
            if c == 0.0 {
                continue;
            }
            for j in 0..d {
                out[r * d + j] += c * grad[f * d + j];
            }
        }
    }
}

/// Joins per-block fields (in time order) into one field on `grid`. At a shared node the later
/// block wins.
pub(crate) fn concat(grid: TimeGrid, blocks: Vec<DecouplingField>) -> Result<DecouplingField> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::invalid("no blocks to join"))?;
    let mut out = DecouplingField {
        grid,
        basis: first.basis.clone(),
        value_dim: first.value_dim,
        coefficients: Vec::new(),
        snapshots: Vec::new(),
        diagnostics: FieldDiagnostics::default(),
        seed: first.seed,
    };
    let count = blocks.len();
    for (j, b) in blocks.into_iter().enumerate() {
        out.check_same_shape(&b)?;
        let take = if j + 1 == count {
            b.coefficients.len()
        } else {
            b.coefficients.len() - 1
        };
        out.coefficients
            .extend(b.coefficients.into_iter().take(take));
        out.snapshots.extend(b.snapshots.into_iter().take(take));
        out.diagnostics
            .fit_rms
            .extend(b.diagnostics.fit_rms.into_iter().take(take));
        out.diagnostics
            .z_consistency
            .extend(b.diagnostics.z_consistency.into_iter().take(take));
        out.diagnostics
            .picard_gaps
            .extend(b.diagnostics.picard_gaps);
    }
    if out.coefficients.len() != grid.steps() + 1 {
        return Err(Error::invalid("blocks do not tile the grid"));
    }
    Ok(out)
}
