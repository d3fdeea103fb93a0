//! Uniform empirical measures on R^d and the quadratic Wasserstein distance between them.
//!
//! An [`EmpiricalMeasure`] is `(1/N) Σ δ_{x^i}`; weights are implicit. Distances are only
//! defined between measures with the same number of atoms, in which case the optimal plan is
//! a permutation and `W₂` reduces to an assignment problem. In one dimension the sorted
//! matching is optimal, elsewhere an exact Hungarian solve is used.

pub mod assignment;

use std::io::{Read, Write};
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    dim: usize,
    data: Vec<f64>,
    mean: OnceLock<Vec<f64>>,
}

impl PartialEq for EmpiricalMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.data == other.data
    }
}

impl EmpiricalMeasure {
    /// Builds a measure from a list of atoms. All atoms must share one dimension.
    pub fn new(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let dim = atoms
            .first()
            .map(|a| a.len())
            .ok_or_else(|| Error::invalid("a measure needs at least one atom"))?;
        if atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::invalid("atoms have inconsistent dimensions"));
        }
        Self::from_flat(dim, atoms.into_iter().flatten().collect())
    }

    /// Row-major atoms, `data.len() == N * dim`.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "flat atom buffer of length {} does not hold whole atoms of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("measure atoms", Some(pos / dim)));
        }
        Ok(Self {
            dim,
            data,
            mean: OnceLock::new(),
        })
    }

    /// Scalar atoms (d = 1).
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(1, values.to_vec())
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::from_flat(point.len(), point.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Replaces atom `i` in place. Panics on dimension mismatch.
    pub fn set_atom(&mut self, i: usize, atom: &[f64]) {
        assert_eq!(atom.len(), self.dim);
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(atom);
        self.mean = OnceLock::new();
    }

    /// Coordinate-wise average, cached after the first call.
    pub fn mean(&self) -> &[f64] {
        self.mean.get_or_init(|| {
            let n = self.len() as f64;
            let mut m = vec![0.0; self.dim];
            for a in self.atoms() {
                for (mj, aj) in m.iter_mut().zip(a) {
                    *mj += aj;
                }
            }
            m.iter_mut().for_each(|v| *v /= n);
            m
        })
    }

    /// `(1/N) Σ |x^i|²`.
    pub fn second_moment(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
    }

    /// Root mean squared deviation from the mean, per coordinate.
    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        let ss: f64 = self
            .atoms()
            .map(|a| a.iter().zip(m).map(|(x, mj)| (x - mj).powi(2)).sum::<f64>())
            .sum();
        (ss / (self.len() * self.dim) as f64).sqrt()
    }

    pub fn translated(&self, shift: &[f64]) -> Self {
        assert_eq!(shift.len(), self.dim);
        let data = self
            .data
            .chunks_exact(self.dim)
            .flat_map(|a| a.iter().zip(shift).map(|(x, s)| x + s))
            .collect();
        Self {
            dim: self.dim,
            data,
            mean: OnceLock::new(),
        }
    }

    /// Measure on `R^{d1+d2}` whose atom `i` is `(x^i, y^i)`.
    pub fn joint(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid("joint law needs equal atom counts"));
        }
        let dim = x.dim + y.dim;
        let mut data = Vec::with_capacity(x.len() * dim);
        for (a, b) in x.atoms().zip(y.atoms()) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Self::from_flat(dim, data)
    }

    /// Marginal on the coordinates `range`.
    pub fn marginal(&self, range: std::ops::Range<usize>) -> Self {
        assert!(range.end <= self.dim && range.start < range.end);
        let dim = range.len();
        let data = self
            .atoms()
            .flat_map(|a| a[range.clone()].iter().copied())
            .collect();
        Self {
            dim,
            data,
            mean: OnceLock::new(),
        }
    }

    /// Writes one CSV row per atom, columns `x1..xd`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.dim).map(|j| format!("x{j}")).collect();
        w.write_record(&header)?;
        for a in self.atoms() {
            w.write_record(a.iter().map(|v| format_float(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`write_csv`](Self::write_csv). A header row is expected.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut atoms = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let atom = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad coordinate {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            atoms.push(atom);
        }
        Self::new(atoms)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("finite atoms always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Serialize for EmpiricalMeasure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = self.atoms().collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmpiricalMeasure {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        EmpiricalMeasure::new(rows).map_err(serde::de::Error::custom)
    }
}

/// Shortest round-trip representation, used by every CSV writer in the crate.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim != nu.dim {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            mu.dim, nu.dim
        )));
    }
    if mu.len() != nu.len() {
        return Err(Error::invalid(format!(
            "atom count mismatch: {} vs {} (resample to equal sizes first)",
            mu.len(),
            nu.len()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Quadratic Wasserstein distance between two equal-size empirical measures.
pub fn w2_distance(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let n = mu.len();
    if mu.dim == 1 {
        let mut a = mu.data.clone();
        let mut b = nu.data.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        if !s.is_finite() {
            return Err(Error::non_finite("w2_distance", None));
        }
        return Ok((s / n as f64).sqrt());
    }
    let mut cost = Vec::with_capacity(n * n);
    for a in mu.atoms() {
        for b in nu.atoms() {
            cost.push(sq_dist(a, b));
        }
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::non_finite("w2_distance cost", Some(i / n)));
    }
    let perm = assignment::solve(n, &cost);
    let s: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((s / n as f64).sqrt())
}

/// `((1/N) Σ |x^i − y^i|²)^{1/2}`: the cost of the identity coupling, an upper bound on `W₂`.
pub fn coupled_distance(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let s: f64 = mu.atoms().zip(nu.atoms()).map(|(a, b)| sq_dist(a, b)).sum();
    Ok((s / mu.len() as f64).sqrt())
}

/// Above this size the Picard monitor switches from exact `W₂` to the coupled bound when d > 1.
pub const EXACT_W2_LIMIT: usize = 256;

/// Exact `W₂` when cheap (d = 1 or small N), otherwise the coupled upper bound.
pub fn law_gap(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim == 1 || mu.len() <= EXACT_W2_LIMIT {
        w2_distance(mu, nu)
    } else {
        coupled_distance(mu, nu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(v).unwrap()
    }

    #[test]
    fn w2_examples() {
        let mu = m1(&[0.0, 2.0]);
        assert_eq!(w2_distance(&mu, &mu).unwrap(), 0.0);
        assert_eq!(w2_distance(&m1(&[0.0]), &m1(&[3.0])).unwrap(), 3.0);
        // brute force over both permutations: min(½(1+1), ½(9+1))^{1/2} = 1
        assert!((w2_distance(&mu, &m1(&[1.0, 3.0])).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w2_rejects_mismatch() {
        let a = m1(&[0.0, 1.0]);
        let b = m1(&[0.0]);
        assert!(matches!(w2_distance(&a, &b), Err(Error::InvalidInput(_))));
        let c = EmpiricalMeasure::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(w2_distance(&a, &c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn moments() {
        assert_eq!(m1(&[0.0]).second_moment(), 0.0);
        assert_eq!(m1(&[1.0, -1.0]).second_moment(), 1.0);
        let p = EmpiricalMeasure::new(vec![vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.second_moment(), 25.0);
        assert_eq!(m1(&[0.0]).mean(), &[0.0]);
        assert_eq!(m1(&[1.0, 3.0]).mean(), &[2.0]);
        assert_eq!(m1(&[-5.0, 5.0]).mean(), &[0.0]);
    }

    #[test]
    fn construction_invariants() {
        assert!(EmpiricalMeasure::new(vec![]).is_err());
        assert!(EmpiricalMeasure::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(matches!(
            EmpiricalMeasure::from_scalars(&[1.0, f64::NAN]),
            Err(Error::NumericDomain { index: Some(1), .. })
        ));
    }

    #[test]
    fn set_atom_invalidates_mean() {
        let mut m = m1(&[1.0, 3.0]);
        assert_eq!(m.mean(), &[2.0]);
        m.set_atom(0, &[5.0]);
        assert_eq!(m.mean(), &[4.0]);
    }

    #[test]
    fn csv_and_json_layouts() {
        let m = EmpiricalMeasure::new(vec![vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "x1,x2\n1.5,-2.0\n0.25,3.0\n"
        );
        assert_eq!(EmpiricalMeasure::read_csv(&buf[..]).unwrap(), m);
        assert_eq!(m.to_json(), "[[1.5,-2.0],[0.25,3.0]]");
        assert_eq!(EmpiricalMeasure::from_json(&m.to_json()).unwrap(), m);
    }
}
