//! Particle solver for coupled McKean–Vlasov forward–backward SDEs.
//!
//! The forward state `X` is simulated with explicit Euler–Maruyama, the decoupling field
//! `U(t, x, μ)` is fitted by least-squares Monte Carlo on a polynomial basis, and the two are
//! coupled through a Picard iteration on the flow of joint laws of `(X, Y)`. Long horizons are
//! split into blocks solved backward from `T`.

mod basis;
mod engine;
mod field;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use basis::Basis;
pub use field::{DecouplingField, FieldDiagnostics};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::TimeGrid;
use crate::measure::{format_float, law_gap, EmpiricalMeasure};
use crate::rng::{Domain, NoiseMode, StreamKey};
use crate::scenario::Coefficients;
use engine::{Ctx, Run, Terminal};

/// Law of the initial state `ξ`. Draws for particle `i` come from the stream of particle `i`, so
/// two laws sampled with the same seed are coupled atom-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Independent coordinates `mean_j + std_j · N(0, 1)`.
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    /// Independent coordinates uniform on `[low_j, high_j)`.
    Uniform {
        low: Vec<f64>,
        high: Vec<f64>,
    },
    Dirac {
        point: Vec<f64>,
    },
    /// Explicit atoms; the count must equal the number of particles.
    Atoms {
        atoms: Vec<Vec<f64>>,
    },
}

impl InitialLaw {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        InitialLaw::Gaussian {
            mean: vec![mean],
            std: vec![std],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { low, .. } => low.len(),
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Atoms { atoms } => atoms.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            InitialLaw::Gaussian { mean, std } => {
                mean.len() == std.len() && std.iter().all(|s| *s >= 0.0 && s.is_finite())
            }
            InitialLaw::Uniform { low, high } => {
                low.len() == high.len() && low.iter().zip(high).all(|(a, b)| a <= b)
            }
            InitialLaw::Dirac { .. } => true,
            InitialLaw::Atoms { atoms } => {
                !atoms.is_empty() && atoms.iter().all(|a| a.len() == atoms[0].len())
            }
        };
        if !ok || self.dim() == 0 {
            return Err(Error::invalid("malformed initial law"));
        }
        Ok(())
    }

    /// `n` atoms drawn deterministically from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
        self.validate()?;
        let d = self.dim();
        let key = StreamKey::new(seed, Domain::InitialLaw);
        let mut flat = vec![0.0; n * d];
        match self {
            InitialLaw::Gaussian { mean, std } => {
                for (i, c) in flat.chunks_mut(d).enumerate() {
                    key.fill_normals(i as u64, 0, c);
                    for j in 0..d {
                        c[j] = mean[j] + std[j] * c[j];
                    }
                }
            }
            InitialLaw::Uniform { low, high } => {
                for (i, c) in flat.chunks_mut(d).enumerate() {
                    let mut rng = key.rng(i as u64, 0);
                    for j in 0..d {
                        c[j] = low[j] + (high[j] - low[j]) * rng.random::<f64>();
                    }
                }
            }
            InitialLaw::Dirac { point } => {
                for c in flat.chunks_mut(d) {
                    c.copy_from_slice(point);
                }
            }
            InitialLaw::Atoms { atoms } => {
                if atoms.len() != n {
                    return Err(Error::invalid(format!(
                        "initial law has {} atoms but {n} particles were requested",
                        atoms.len()
                    )));
                }
                for (c, a) in flat.chunks_mut(d).zip(atoms) {
                    c.copy_from_slice(a);
                }
            }
        }
        EmpiricalMeasure::from_flat(d, flat)
    }
}

/// Numerical parameters of the solver. The seed is supplied separately by the caller's config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub particles: usize,
    pub basis_degree: usize,
    /// Adds the ensemble mean to the regression features. The solver then runs `2d + 1`
    /// translated copies of the ensemble so that the mean coefficients are identifiable.
    pub mean_regressor: bool,
    pub picard_max: usize,
    pub tol_law: f64,
    /// Initial Picard damping `θ ∈ (0, 1]`, halved whenever the law gap increases.
    pub damping: f64,
    /// Smallest admissible block length; defaults to `4Δt`.
    pub delta_min: Option<f64>,
    pub noise: NoiseMode,
    /// Size of the translations used with the mean regressor.
    pub mean_offset: f64,
    /// First block length tried by the long-horizon solver; defaults to the whole horizon.
    pub initial_block: Option<f64>,
    pub sweep_max: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            particles: 1024,
            basis_degree: 2,
            mean_regressor: false,
            picard_max: 50,
            tol_law: 1e-6,
            damping: 1.0,
            delta_min: None,
            noise: NoiseMode::Centered,
            mean_offset: 0.5,
            initial_block: None,
            sweep_max: 30,
            seed: 0,
        }
    }
}

impl SolverParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.particles < 2 {
            return bad("particles must be at least 2");
        }
        if self.picard_max == 0 || self.sweep_max == 0 {
            return bad("iteration caps must be positive");
        }
        if !(self.tol_law > 0.0) {
            return bad("tol_law must be positive");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if !(self.mean_offset > 0.0 && self.mean_offset.is_finite()) {
            return bad("mean_offset must be positive");
        }
        if self.delta_min.is_some_and(|v| !(v > 0.0))
            || self.initial_block.is_some_and(|v| !(v > 0.0))
        {
            return bad("block lengths must be positive");
        }
        Ok(())
    }
}

/// Particle paths of `(X, Y, Z)` on a grid. Arrays are indexed by node, each flat over particles.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub(crate) grid: TimeGrid,
    pub(crate) dim: usize,
    pub(crate) value_dim: usize,
    pub(crate) particles: usize,
    pub(crate) x: Vec<Vec<f64>>,
    pub(crate) y: Vec<Vec<f64>>,
    /// `K + 1` nodes; the last one is `∂_xU σ` from the fitted terminal.
    pub(crate) z: Vec<Vec<f64>>,
    pub(crate) dw: Vec<Vec<f64>>,
    pub(crate) seed: u64,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim, self.value_dim)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `X^i_k`.
    pub fn x(&self, k: usize, i: usize) -> &[f64] {
        &self.x[k][i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, k: usize, i: usize) -> &[f64] {
        &self.y[k][i * self.value_dim..(i + 1) * self.value_dim]
    }

    /// `Z^i_k`, `m × d` row-major.
    pub fn z(&self, k: usize, i: usize) -> &[f64] {
        let w = self.value_dim * self.dim;
        &self.z[k][i * w..(i + 1) * w]
    }

    pub fn dw(&self, k: usize, i: usize) -> &[f64] {
        &self.dw[k][i * self.dim..(i + 1) * self.dim]
    }

    /// Empirical law of `X_k`.
    pub fn x_measure(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_flat(self.dim, self.x[k].clone()).expect("finite states")
    }

    /// Empirical law of `(X_k, Y_k)`.
    pub fn joint(&self, k: usize) -> EmpiricalMeasure {
        let y =
            EmpiricalMeasure::from_flat(self.value_dim, self.y[k].clone()).expect("finite values");
        EmpiricalMeasure::joint(&self.x_measure(k), &y).expect("same particle count")
    }

    /// Columns `particle, step, x1.., y1.., z11..`; `Z` rows are listed row-major.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (d, m) = (self.dim, self.value_dim);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["particle".to_string(), "step".to_string()];
        header.extend((1..=d).map(|j| format!("x{j}")));
        header.extend((1..=m).map(|r| format!("y{r}")));
        for r in 1..=m {
            header.extend((1..=d).map(|j| format!("z{r}{j}")));
        }
        w.write_record(&header)?;
        for i in 0..self.particles {
            for k in 0..=self.grid.steps() {
                let mut rec = vec![i.to_string(), k.to_string()];
                rec.extend(self.x(k, i).iter().map(|v| format_float(*v)));
                rec.extend(self.y(k, i).iter().map(|v| format_float(*v)));
                rec.extend(self.z(k, i).iter().map(|v| format_float(*v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn context<'a>(
    c: &'a dyn Coefficients,
    grid: TimeGrid,
    params: &'a SolverParams,
    offset: usize,
    terminal: Terminal<'a>,
) -> Ctx<'a> {
    let (d, m) = c.dims();
    Ctx {
        c,
        grid,
        offset,
        terminal,
        params,
        basis: Basis::new(d, params.basis_degree, params.mean_regressor),
        d,
        m,
        n: params.particles,
    }
}

/// Initial atoms of every ensemble in the family: the sample itself and, with the mean
/// regressor, its translates by `±mean_offset` along each axis.
fn family(base: &EmpiricalMeasure, params: &SolverParams) -> Vec<Vec<f64>> {
    let mut out = vec![base.as_flat().to_vec()];
    if params.mean_regressor {
        let d = base.dim();
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut shift = vec![0.0; d];
                shift[j] = sign * params.mean_offset;
                out.push(base.translated(&shift).as_flat().to_vec());
            }
        }
    }
    out
}

fn prepare(
    c: &dyn Coefficients,
    init: &InitialLaw,
    params: &SolverParams,
) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    let (d, m) = c.dims();
    if d == 0 || m == 0 {
        return Err(Error::InvalidSpec(
            "state and value dimensions must be positive".into(),
        ));
    }
    if init.dim() != d {
        return Err(Error::invalid(format!(
            "initial law has dimension {} but the state has {d}",
            init.dim()
        )));
    }
    let base = init.sample(params.particles, params.seed)?;
    Ok(family(&base, params))
}

fn small_time_family(
    c: &dyn Coefficients,
    x0: &[Vec<f64>],
    grid: TimeGrid,
    params: &SolverParams,
    offset: usize,
) -> Result<(PathEnsemble, DecouplingField, Run)> {
    let ctx = context(c, grid, params, offset, Terminal::Exact);
    let out = ctx.picard(x0)?;
    let mut field = out.field;
    field.diagnostics.blocks = vec![(offset, offset + grid.steps())];
    field.diagnostics.block_steps = grid.steps();
    let ens = ctx.ensemble(&out.run, &field)?;
    Ok((ens, field, out.run))
}

/// Picard–regression solve on a single block.
pub fn solve_small_time(
    c: &dyn Coefficients,
    init: &InitialLaw,
    grid: &TimeGrid,
    params: &SolverParams,
) -> Result<(PathEnsemble, DecouplingField)> {
    let x0 = prepare(c, init, params)?;
    let (ens, field, _) = small_time_family(c, &x0, *grid, params, 0)?;
    Ok((ens, field))
}

/// Block recursion backward from `T`.
///
/// Blocks of `L` steps are laid out from the end of the grid. A sweep solves every block from the
/// last to the first, each with the next block's field at its first node as terminal condition
/// and with initial atoms taken from the previous global forward pass; a global forward pass with
/// the joined field follows. Sweeps repeat until successive global law flows agree to
/// `tol_law`. When a block fails to converge the block length is halved; below `delta_min` the
/// solve fails with [`Error::BlowUp`]. A single block is exactly [`solve_small_time`].
pub fn solve_long_horizon(
    c: &dyn Coefficients,
    init: &InitialLaw,
    grid: &TimeGrid,
    params: &SolverParams,
) -> Result<(PathEnsemble, DecouplingField)> {
    let x0 = prepare(c, init, params)?;
    let k_total = grid.steps();
    let dt = grid.dt();
    let delta_min = params.delta_min.unwrap_or(4.0 * dt);
    let mut steps = params
        .initial_block
        .map_or(k_total, |l| ((l / dt).round() as usize).max(1))
        .min(k_total);
    loop {
        let attempt = if steps >= k_total {
            small_time_family(c, &x0, *grid, params, 0).map(|(e, f, _)| (e, f))
        } else {
            sweep_blocks(c, &x0, *grid, params, steps)
        };
        match attempt {
            Err(Error::ConvergenceFailure { context, last_gaps }) => {
                let next = steps / 2;
                let delta = next as f64 * dt;
                log::warn!("{context} failed (gaps {last_gaps:?}); block length -> {delta}");
                if next == 0 || delta < delta_min * (1.0 - 1e-12) {
                    return Err(Error::BlowUp { delta, delta_min });
                }
                steps = next;
            }
            other => return other,
        }
    }
}

fn sweep_blocks(
    c: &dyn Coefficients,
    x0: &[Vec<f64>],
    grid: TimeGrid,
    params: &SolverParams,
    steps: usize,
) -> Result<(PathEnsemble, DecouplingField)> {
    let k_total = grid.steps();
    let mut blocks = Vec::new();
    let mut end = k_total;
    while end > 0 {
        let start = end.saturating_sub(steps);
        blocks.push((start, end));
        end = start;
    }
    blocks.reverse();
    let global = context(c, grid, params, 0, Terminal::Exact);
    let mut run = global.forward(x0, None)?;
    let mut laws = global.joints(&run)?;
    let mut picard_gaps = Vec::new();
    let mut sweep_gaps: Vec<f64> = Vec::new();
    for sweep in 1..=params.sweep_max {
        let mut fields: Vec<DecouplingField> = Vec::with_capacity(blocks.len());
        for &(start, end) in blocks.iter().rev() {
            let sub = grid.slice(start, end)?;
            let terminal = fields.last().map_or(Terminal::Exact, Terminal::Field);
            let ctx = context(c, sub, params, start, terminal);
            let starts: Vec<Vec<f64>> = run.x.iter().map(|xs| xs[start].clone()).collect();
            let out = ctx.picard(&starts)?;
            picard_gaps.extend(out.field.diagnostics.picard_gaps.iter().copied());
            fields.push(out.field);
        }
        fields.reverse();
        let mut field = engine::concat(grid, fields)?;
        let next = global.forward(x0, Some(&field))?;
        let next_laws = global.joints(&next)?;
        let mut gap: f64 = 0.0;
        for (a, b) in next_laws.iter().flatten().zip(laws.iter().flatten()) {
            gap = gap.max(law_gap(a, b)?);
        }
        log::debug!("block sweep {sweep}: gap {gap:.3e}");
        sweep_gaps.push(gap);
        if gap < params.tol_law {
            field.diagnostics.picard_gaps = picard_gaps;
            field.diagnostics.sweep_gaps = sweep_gaps;
            field.diagnostics.blocks = blocks;
            field.diagnostics.block_steps = steps;
            field.snapshots = next.x[0]
                .iter()
                .map(|x| EmpiricalMeasure::from_flat(global.d, x.clone()))
                .collect::<Result<_>>()?;
            let ens = global.ensemble(&next, &field)?;
            return Ok((ens, field));
        }
        run = next;
        laws = next_laws;
    }
    Err(Error::ConvergenceFailure {
        context: format!("block sweeps with {steps}-step blocks"),
        last_gaps: sweep_gaps[sweep_gaps.len().saturating_sub(2)..].to_vec(),
    })
}

/// `max_k ( (1/N) Σ_i |Y^i_k − U(t_k, X^i_k, μ_k)|² )^{1/2}`.
pub fn decoupling_residual<F: Field + ?Sized>(ens: &PathEnsemble, u: &F) -> Result<f64> {
    let grid = ens.grid();
    let (a, b) = u.time_domain();
    let tol = 1e-9 * grid.horizon();
    if (a - grid.t0()).abs() > tol || (b - grid.t_end()).abs() > tol {
        return Err(Error::invalid(
            "ensemble and field are defined on different grids",
        ));
    }
    if u.state_dim() != ens.dim || u.value_dim() != ens.value_dim {
        return Err(Error::invalid("ensemble and field dimensions differ"));
    }
    let mut worst: f64 = 0.0;
    for k in 0..=grid.steps() {
        let t = grid.time(k);
        let mu = ens.x_measure(k);
        let mut ss = 0.0;
        for i in 0..ens.particles {
            let v = u.eval(t, ens.x(k, i), &mu);
            ss += v
                .iter()
                .zip(ens.y(k, i))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>();
        }
        worst = worst.max((ss / ens.particles as f64).sqrt());
    }
    Ok(worst)
}

/// Discrepancy between a solve on `[t0, T]` and a restart at node `s` from the computed law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowConsistency {
    /// `sup_{k ≥ s} W₂` between the two flows of `X`-laws.
    pub law_gap: f64,
    /// Sup over nodes `≥ s` and atoms of the difference between the two fields.
    pub field_gap: f64,
}

impl FlowConsistency {
    pub fn total(&self) -> f64 {
        self.law_gap + self.field_gap
    }
}

/// Solves on the whole grid, restarts at node `s` from the computed atoms (same increments) and
/// compares the two solutions on `[t_s, T]`.
pub fn flow_consistency(
    c: &dyn Coefficients,
    init: &InitialLaw,
    grid: &TimeGrid,
    params: &SolverParams,
    s: usize,
) -> Result<FlowConsistency> {
    if s == 0 || s >= grid.steps() {
        return Err(Error::invalid(format!(
            "restart node {s} is not interior to the grid"
        )));
    }
    let x0 = prepare(c, init, params)?;
    let (ens, field, run) = small_time_family(c, &x0, *grid, params, 0)?;
    let starts: Vec<Vec<f64>> = run.x.iter().map(|xs| xs[s].clone()).collect();
    let (restart, restart_field, _) =
        small_time_family(c, &starts, grid.slice(s, grid.steps())?, params, s)?;
    let mut out = FlowConsistency {
        law_gap: 0.0,
        field_gap: 0.0,
    };
    for k in s..=grid.steps() {
        let a = ens.x_measure(k);
        let b = restart.x_measure(k - s);
        out.law_gap = out.law_gap.max(law_gap(&a, &b)?);
        for i in 0..ens.particles {
            let x = ens.x(k, i);
            let u = field.node_value(k, x, &a);
            let v = restart_field.node_value(k - s, x, &a);
            for (p, q) in u.iter().zip(&v) {
                out.field_gap = out.field_gap.max((p - q).abs());
            }
        }
    }
    Ok(out)
}

/// Sampled `sup ‖Y_{t0}^{ξ} − Y_{t0}^{ξ′}‖₂ / ‖ξ − ξ′‖₂` over coupled pairs of initial laws.
pub fn weak_lipschitz_estimate(
    c: &dyn Coefficients,
    grid: &TimeGrid,
    params: &SolverParams,
    pairs: &[(InitialLaw, InitialLaw)],
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (a, b) in pairs {
        let xa = a.sample(params.particles, params.seed)?;
        let xb = b.sample(params.particles, params.seed)?;
        let den = xa
            .as_flat()
            .iter()
            .zip(xb.as_flat())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
        if den == 0.0 {
            return Err(Error::invalid("paired initial laws coincide atom-wise"));
        }
        let (ea, _) = solve_long_horizon(c, a, grid, params)?;
        let (eb, _) = solve_long_horizon(c, b, grid, params)?;
        let num = ea.y[0]
            .iter()
            .zip(&eb.y[0])
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
        best = best.max((num / den).sqrt());
    }
    Ok(best)
}
