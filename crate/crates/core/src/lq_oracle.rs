//! Riccati oracle for linear-quadratic mean-field scenarios.
//!
//! Model: drift `b₁x + b̄₁m + b₂α`, constant `σ`, running cost
//! `½α†Rα + ½(x − ρm)†Q(x − ρm)`, terminal cost `½(x − ρ_G m)†Q_G(x − ρ_G m)`, where `m` is the
//! mean of the population. The minimizer is `α̂ = −R⁻¹b₂†y`; write `S = b₂R⁻¹b₂†` and
//! `A = b₁ + b̄₁ − S(η + χ)` for the mean dynamics `m' = Am`.
//!
//! Substituting `Y = ηX + χm` in the adjoint equation and matching the `X` and `m` coefficients:
//!
//! ```text
//! η' = ηSη − ηb₁ − b₁†η − Q                                          η_T = Q_G
//! χ' = ρQ − b₁†χ − ηb̄₁ + ηSχ − χA                          (mfg)    χ_T = −ρ_G Q_G
//! χ' = ρ(2−ρ)Q − b₁†χ − b̄₁†(η+χ) − ηb̄₁ + ηSχ − χA          (mkv)    χ_T = −ρ_G(2−ρ_G) Q_G
//! ```
//!
//! The control case picks up `b̄₁†E[Y]` and the averaged measure derivative of the running cost,
//! `∫∂_μF₀(x′,μ)(v) dμ(x′) = −ρ(1−ρ)Qm`. No constant forcing enters, so `κ ≡ 0`.
//!
//! The value of a player at `x` in a population at `μ`, everybody using the feedback above, is
//! `V = ½x†Px + x†Cm + ½m†rm + s` with `P = η` and
//!
//! ```text
//! C' = ρQ − ηb̄₁ − (b₁ − Sη)†C − CA                                   C_T = −ρ_G Q_G
//! r' = −C†(b̄₁−Sχ) − (b̄₁−Sχ)†C − ρ²Q − χ†Sχ − rA − A†r                r_T = ρ_G² Q_G
//! s' = −½ Tr(ησσ†)                                                   s_T = 0
//! ```
//!
//! For the game `C = χ`; for the control problem `χ = C + C† + r`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::TimeGrid;
use crate::measure::{format_float, EmpiricalMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LqKind {
    Mfg,
    Mkv,
}

pub(crate) mod matrix_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Scalar(f64),
        Rows(Vec<Vec<f64>>),
    }

    pub fn serialize<S: Serializer>(
        m: &DMatrix<f64>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DMatrix<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Scalar(v) => Ok(DMatrix::from_element(1, 1, v)),
            Repr::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, |row| row.len());
                if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
                    return Err(serde::de::Error::custom(
                        "matrix rows must be non-empty and of equal length",
                    ));
                }
                Ok(DMatrix::from_row_iterator(r, c, rows.into_iter().flatten()))
            }
        }
    }
}

fn one() -> DMatrix<f64> {
    DMatrix::identity(1, 1)
}

fn zero() -> DMatrix<f64> {
    DMatrix::zeros(1, 1)
}

fn default_rho() -> f64 {
    -0.5
}

/// Linear-quadratic scenario. Matrices accept a bare number for the 1×1 case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqSpec {
    #[serde(with = "matrix_serde", default = "zero")]
    pub b1: DMatrix<f64>,
    #[serde(with = "matrix_serde", default = "zero")]
    pub b1_bar: DMatrix<f64>,
    #[serde(with = "matrix_serde", default = "one")]
    pub b2: DMatrix<f64>,
    #[serde(with = "matrix_serde", default = "one")]
    pub sigma: DMatrix<f64>,
    #[serde(with = "matrix_serde", default = "one")]
    pub r: DMatrix<f64>,
    #[serde(with = "matrix_serde", default = "one")]
    pub q: DMatrix<f64>,
    #[serde(with = "matrix_serde", default = "one")]
    pub q_g: DMatrix<f64>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Defaults to `rho`.
    #[serde(default)]
    pub rho_g: Option<f64>,
}

impl Default for LqSpec {
    fn default() -> Self {
        Self::scalar(default_rho())
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
}

impl LqSpec {
    /// Scalar default `b₂ = R = Q = Q_G = σ = 1`, `b₁ = b̄₁ = 0`, `ρ_G = ρ`.
    pub fn scalar(rho: f64) -> Self {
        Self {
            b1: zero(),
            b1_bar: zero(),
            b2: one(),
            sigma: one(),
            r: one(),
            q: one(),
            q_g: one(),
            rho,
            rho_g: None,
        }
    }

    /// `d`-dimensional spec with diagonal blocks `diag(values)` for `Q` and `Q_G`, identity
    /// `b₂`, `R`, `σ`.
    pub fn diagonal(q: &[f64], q_g: &[f64], rho: f64) -> Self {
        let d = q.len();
        Self {
            b1: DMatrix::zeros(d, d),
            b1_bar: DMatrix::zeros(d, d),
            b2: DMatrix::identity(d, d),
            sigma: DMatrix::identity(d, d),
            r: DMatrix::identity(d, d),
            q: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(q)),
            q_g: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(q_g)),
            rho,
            rho_g: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.b1.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b2.ncols()
    }

    pub fn rho_g(&self) -> f64 {
        self.rho_g.unwrap_or(self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let k = self.control_dim();
        let square = |m: &DMatrix<f64>, n: usize, name: &str| -> Result<()> {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be {n}x{n}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        square(&self.b1, d, "b1")?;
        square(&self.b1_bar, d, "b1_bar")?;
        square(&self.sigma, d, "sigma")?;
        square(&self.q, d, "q")?;
        square(&self.q_g, d, "q_g")?;
        square(&self.r, k, "r")?;
        if self.b2.nrows() != d {
            return Err(Error::InvalidSpec(format!("b2 must have {d} rows")));
        }
        if !is_symmetric(&self.r) || self.r.clone().cholesky().is_none() {
            return Err(Error::InvalidSpec(
                "R must be symmetric positive definite".into(),
            ));
        }
        for (m, name) in [(&self.q, "q"), (&self.q_g, "q_g")] {
            if !is_symmetric(m) || m.clone().symmetric_eigenvalues().min() < -1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be symmetric positive semidefinite"
                )));
            }
        }
        let all = [
            &self.b1,
            &self.b1_bar,
            &self.b2,
            &self.sigma,
            &self.r,
            &self.q,
            &self.q_g,
        ];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite()))
            || !self.rho.is_finite()
            || !self.rho_g().is_finite()
        {
            return Err(Error::InvalidSpec(
                "LQ spec contains non-finite entries".into(),
            ));
        }
        Ok(())
    }

    /// `S = b₂R⁻¹b₂†`.
    pub fn s_matrix(&self) -> DMatrix<f64> {
        let rinv = self.r.clone().try_inverse().expect("validated R");
        &self.b2 * rinv * self.b2.transpose()
    }
}

/// Coefficients `(η, χ, C, r, s)` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiState {
    pub eta: DMatrix<f64>,
    pub chi: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: f64,
}

impl RiccatiState {
    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.eta.len() + 1);
        for m in [&self.eta, &self.chi, &self.c, &self.r] {
            v.extend(m.iter());
        }
        v.push(self.s);
        v
    }

    fn from_vec(d: usize, v: &[f64]) -> Self {
        let n = d * d;
        let m = |k: usize| DMatrix::from_column_slice(d, d, &v[k * n..(k + 1) * n]);
        Self {
            eta: m(0),
            chi: m(1),
            c: m(2),
            r: m(3),
            s: v[4 * n],
        }
    }
}

/// The ODE system of the module documentation.
#[derive(Debug, Clone)]
pub struct RiccatiSystem {
    spec: LqSpec,
    kind: LqKind,
    s_mat: DMatrix<f64>,
    a_diff: DMatrix<f64>,
}

impl RiccatiSystem {
    pub fn new(spec: &LqSpec, kind: LqKind) -> Result<Self> {
        spec.validate()?;
        let a_diff = &spec.sigma * spec.sigma.transpose();
        Ok(Self {
            s_mat: spec.s_matrix(),
            spec: spec.clone(),
            kind,
            a_diff,
        })
    }

    pub fn terminal(&self) -> RiccatiState {
        let qg = &self.spec.q_g;
        let rg = self.spec.rho_g();
        let chi = match self.kind {
            LqKind::Mfg => qg * (-rg),
            LqKind::Mkv => qg * (-rg * (2.0 - rg)),
        };
        RiccatiState {
            eta: qg.clone(),
            chi,
            c: qg * (-rg),
            r: qg * (rg * rg),
            s: 0.0,
        }
    }

    pub fn rhs(&self, st: &RiccatiState) -> RiccatiState {
        let sp = &self.spec;
        let s = &self.s_mat;
        let (b1, bb, q, rho) = (&sp.b1, &sp.b1_bar, &sp.q, sp.rho);
        let (eta, chi, c, r) = (&st.eta, &st.chi, &st.c, &st.r);
        let a = b1 + bb - s * (eta + chi);
        let d_eta = eta * s * eta - eta * b1 - b1.transpose() * eta - q;
        let d_chi = match self.kind {
            LqKind::Mfg => q * rho - b1.transpose() * chi - eta * bb + eta * s * chi - chi * &a,
            LqKind::Mkv => {
                q * (rho * (2.0 - rho))
                    - b1.transpose() * chi
                    - bb.transpose() * (eta + chi)
                    - eta * bb
                    + eta * s * chi
                    - chi * &a
            }
        };
        let d_c = q * rho - eta * bb - (b1 - s * eta).transpose() * c - c * &a;
        let e = bb - s * chi;
        let d_r = -(c.transpose() * &e)
            - e.transpose() * c
            - q * (rho * rho)
            - chi.transpose() * s * chi
            - r * &a
            - a.transpose() * r;
        let d_s = -0.5 * (eta * &self.a_diff).trace();
        RiccatiState {
            eta: d_eta,
            chi: d_chi,
            c: d_c,
            r: d_r,
            s: d_s,
        }
    }

    fn rhs_vec(&self, d: usize, v: &[f64]) -> Vec<f64> {
        self.rhs(&RiccatiState::from_vec(d, v)).to_vec()
    }

    /// One classical RK4 step of signed length `h`.
    pub fn rk4_step(&self, st: &RiccatiState, h: f64) -> RiccatiState {
        let d = self.spec.dim();
        let y = st.to_vec();
        let axpy = |y: &[f64], k: &[f64], a: f64| -> Vec<f64> {
            y.iter().zip(k).map(|(p, q)| p + a * q).collect()
        };
        let k1 = self.rhs_vec(d, &y);
        let k2 = self.rhs_vec(d, &axpy(&y, &k1, h / 2.0));
        let k3 = self.rhs_vec(d, &axpy(&y, &k2, h / 2.0));
        let k4 = self.rhs_vec(d, &axpy(&y, &k3, h));
        let out: Vec<f64> = (0..y.len())
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        RiccatiState::from_vec(d, &out)
    }
}

/// Entries above this magnitude are treated as a finite-time blow-up.
const BLOWUP: f64 = 1e8;

/// Oracle coefficients on a fine RK4 grid, with cubic Hermite interpolation in between.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub kind: LqKind,
    pub spec: LqSpec,
    /// RK4 substeps per grid step.
    pub substeps: usize,
    fine: TimeGrid,
    states: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

fn integrate(
    sys: &RiccatiSystem,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<(TimeGrid, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = sys.spec.dim();
    let fine = TimeGrid::new(grid.t0(), grid.t_end(), grid.steps() * substeps)?;
    let n = fine.steps();
    let h = fine.dt();
    let mut states = vec![Vec::new(); n + 1];
    let mut st = sys.terminal();
    states[n] = st.to_vec();
    for k in (0..n).rev() {
        st = sys.rk4_step(&st, -h);
        let v = st.to_vec();
        if v.iter().any(|e| !e.is_finite() || e.abs() > BLOWUP) {
            return Err(Error::OracleBlowUp { t: fine.time(k) });
        }
        states[k] = v;
    }
    let slopes = states.iter().map(|v| sys.rhs_vec(d, v)).collect();
    Ok((fine, states, slopes))
}

/// Largest RK4 refinement tried by [`solve_riccati`].
const MAX_FINE_STEPS: usize = 1 << 22;

/// Integrates the oracle ODEs backward from `T` with RK4, doubling the substeps per grid step
/// until the `η`/`χ` node values move by less than `1e-8` under halving.
pub fn solve_riccati(spec: &LqSpec, kind: LqKind, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let sys = RiccatiSystem::new(spec, kind)?;
    let d = spec.dim();
    let mut sub = 1;
    let mut prev = integrate(&sys, grid, sub)?;
    loop {
        let next = integrate(&sys, grid, 2 * sub)?;
        let mut diff: f64 = 0.0;
        for k in 0..=grid.steps() {
            let a = &prev.1[k * sub];
            let b = &next.1[k * 2 * sub];
            let de = (0..d * d).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
            let dc = (d * d..2 * d * d)
                .map(|i| (a[i] - b[i]).abs())
                .fold(0.0, f64::max);
            diff = diff.max(de + dc);
        }
        sub *= 2;
        prev = next;
        if diff < 1e-8 || grid.steps() * sub * 2 > MAX_FINE_STEPS {
            break;
        }
    }
    let (fine, states, slopes) = prev;
    Ok(RiccatiSolution {
        grid: *grid,
        kind,
        spec: spec.clone(),
        substeps: sub,
        fine,
        states,
        slopes,
    })
}

/// Same ODEs with a fixed number of RK4 substeps per grid step.
pub fn solve_riccati_fixed(
    spec: &LqSpec,
    kind: LqKind,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<RiccatiSolution> {
    if substeps == 0 {
        return Err(Error::invalid("substeps must be positive"));
    }
    let sys = RiccatiSystem::new(spec, kind)?;
    let (fine, states, slopes) = integrate(&sys, grid, substeps)?;
    Ok(RiccatiSolution {
        grid: *grid,
        kind,
        spec: spec.clone(),
        substeps,
        fine,
        states,
        slopes,
    })
}

impl RiccatiSolution {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Coefficients at `t` (clamped to the grid), by cubic Hermite interpolation.
    pub fn state_at(&self, t: f64) -> RiccatiState {
        let (k, s) = self.fine.locate(t);
        let h = self.fine.dt();
        let (y0, y1, m0, m1) = (
            &self.states[k],
            &self.states[k + 1],
            &self.slopes[k],
            &self.slopes[k + 1],
        );
        let h00 = 2.0 * s * s * s - 3.0 * s * s + 1.0;
        let h10 = s * s * s - 2.0 * s * s + s;
        let h01 = -2.0 * s * s * s + 3.0 * s * s;
        let h11 = s * s * s - s * s;
        let v: Vec<f64> = (0..y0.len())
            .map(|i| h00 * y0[i] + h10 * h * m0[i] + h01 * y1[i] + h11 * h * m1[i])
            .collect();
        RiccatiState::from_vec(self.dim(), &v)
    }

    /// Coefficients at grid node `k`.
    pub fn node(&self, k: usize) -> RiccatiState {
        RiccatiState::from_vec(self.dim(), &self.states[k * self.substeps])
    }

    pub fn eta(&self, t: f64) -> DMatrix<f64> {
        self.state_at(t).eta
    }

    pub fn chi(&self, t: f64) -> DMatrix<f64> {
        self.state_at(t).chi
    }

    /// `κ ≡ 0` for this model family; kept for the affine field layout.
    pub fn kappa(&self, _t: f64) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if self.grid.contains(t) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "t = {t} outside the oracle horizon [{}, {}]",
                self.grid.t0(),
                self.grid.t_end()
            )))
        }
    }

    fn field_unchecked(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let st = self.state_at(t);
        let xv = nalgebra::DVector::from_column_slice(x);
        let mv = nalgebra::DVector::from_column_slice(mu.mean());
        (st.eta * xv + st.chi * mv).iter().copied().collect()
    }

    fn value_unchecked(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        let st = self.state_at(t);
        let xv = nalgebra::DVector::from_column_slice(x);
        let mv = nalgebra::DVector::from_column_slice(mu.mean());
        0.5 * xv.dot(&(&st.eta * &xv))
            + xv.dot(&(&st.c * &mv))
            + 0.5 * mv.dot(&(&st.r * &mv))
            + st.s
    }

    /// `η_t x + χ_t m(μ) + κ_t`.
    pub fn oracle_field(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        self.check_time(t)?;
        self.check_point(x, mu)?;
        Ok(self.field_unchecked(t, x, mu))
    }

    /// `½x†η_t x + x†C_t m + ½m†r_t m + s_t`.
    pub fn oracle_value(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<f64> {
        self.check_time(t)?;
        self.check_point(x, mu)?;
        Ok(self.value_unchecked(t, x, mu))
    }

    fn check_point(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<()> {
        if x.len() != self.dim() || mu.dim() != self.dim() {
            return Err(Error::invalid("oracle query has the wrong dimension"));
        }
        Ok(())
    }

    /// The value function as a scalar [`Field`].
    pub fn value_field(&self) -> OracleValue<'_> {
        OracleValue(self)
    }

    /// Writes `t, eta_ij.., chi_ij.., kappa_i..` at every grid node.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        for name in ["eta", "chi"] {
            for i in 1..=d {
                for j in 1..=d {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        header.extend((1..=d).map(|i| format!("kappa_{i}")));
        w.write_record(&header)?;
        for k in 0..=self.grid.steps() {
            let st = self.node(k);
            let mut rec = vec![format_float(self.grid.time(k))];
            for m in [&st.eta, &st.chi] {
                for i in 0..d {
                    for j in 0..d {
                        rec.push(format_float(m[(i, j)]));
                    }
                }
            }
            rec.extend(std::iter::repeat_n(format_float(0.0), d));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Field for RiccatiSolution {
    fn state_dim(&self) -> usize {
        self.dim()
    }
    fn value_dim(&self) -> usize {
        self.dim()
    }
    fn time_domain(&self) -> (f64, f64) {
        (self.grid.t0(), self.grid.t_end())
    }
    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        self.field_unchecked(t, x, mu)
    }
}

/// Scalar field view of [`RiccatiSolution::oracle_value`].
#[derive(Debug, Clone, Copy)]
pub struct OracleValue<'a>(pub &'a RiccatiSolution);

impl Field for OracleValue<'_> {
    fn state_dim(&self) -> usize {
        self.0.dim()
    }
    fn value_dim(&self) -> usize {
        1
    }
    fn time_domain(&self) -> (f64, f64) {
        self.0.time_domain()
    }
    fn eval(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        vec![self.0.value_unchecked(t, x, mu)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 16).unwrap()
    }

    #[test]
    fn no_interaction_keeps_eta_one_and_chi_zero() {
        let sol = solve_riccati(&LqSpec::scalar(0.0), LqKind::Mfg, &grid()).unwrap();
        for k in 0..=16 {
            let st = sol.node(k);
            assert!((st.eta[(0, 0)] - 1.0).abs() < 1e-12);
            assert!(st.chi[(0, 0)].abs() < 1e-12);
        }
        let mu = EmpiricalMeasure::from_scalars(&[3.0, 5.0]).unwrap();
        assert!((sol.oracle_field(0.3, &[2.0], &mu).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!(sol.oracle_field(1.5, &[2.0], &mu).is_err());
    }

    #[test]
    fn terminal_values_and_short_horizon() {
        let rho = -0.5;
        let g = TimeGrid::new(0.0, 1e-6, 1).unwrap();
        let sol = solve_riccati(&LqSpec::scalar(rho), LqKind::Mfg, &g).unwrap();
        assert!((sol.node(0).eta[(0, 0)] - 1.0).abs() < 1e-5);
        assert!((sol.node(0).chi[(0, 0)] + rho).abs() < 1e-5);
        assert_eq!(sol.node(1).chi[(0, 0)], -rho);
    }

    #[test]
    fn blow_up_is_reported() {
        // with Q = 0, χ' = 2ηχ + χ² runs off to −∞ backward from a terminal χ_T < −2η_T
        let mut spec = LqSpec::scalar(0.0);
        spec.q = DMatrix::from_element(1, 1, 0.0);
        spec.rho_g = Some(30.0);
        let res = solve_riccati(&spec, LqKind::Mfg, &TimeGrid::new(0.0, 10.0, 10).unwrap());
        assert!(matches!(res, Err(Error::OracleBlowUp { .. })), "{res:?}");
    }

    #[test]
    fn hermite_interpolation_is_smooth() {
        let sol = solve_riccati(&LqSpec::scalar(-0.5), LqKind::Mfg, &grid()).unwrap();
        let fine = solve_riccati_fixed(
            &LqSpec::scalar(-0.5),
            LqKind::Mfg,
            &TimeGrid::new(0.0, 1.0, 4096).unwrap(),
            4,
        )
        .unwrap();
        for t in [0.013, 0.31, 0.777] {
            assert!((sol.chi(t)[(0, 0)] - fine.chi(t)[(0, 0)]).abs() < 1e-9);
        }
    }
}
