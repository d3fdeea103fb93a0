use serde::{Deserialize, Serialize};

/// Global polynomial features in `x` of total degree `≤ degree`, optionally followed by the
/// `d` coordinates of the mean of the measure argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BasisDescriptor", into = "BasisDescriptor")]
pub struct Basis {
    dim: usize,
    degree: usize,
    mean_regressor: bool,
    exponents: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct BasisDescriptor {
    dim: usize,
    degree: usize,
    mean_regressor: bool,
}

impl From<BasisDescriptor> for Basis {
    fn from(b: BasisDescriptor) -> Self {
        Basis::new(b.dim, b.degree, b.mean_regressor)
    }
}

impl From<Basis> for BasisDescriptor {
    fn from(b: Basis) -> Self {
        BasisDescriptor {
            dim: b.dim,
            degree: b.degree,
            mean_regressor: b.mean_regressor,
        }
    }
}

fn push_exponents(dim: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() == dim - 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in (0..=total).rev() {
        prefix.push(e);
        push_exponents(dim, total - e, prefix, out);
        prefix.pop();
    }
}

impl Basis {
    pub fn new(dim: usize, degree: usize, mean_regressor: bool) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree as u32 {
            push_exponents(dim, total, &mut Vec::new(), &mut exponents);
        }
        Self {
            dim,
            degree,
            mean_regressor,
            exponents,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn mean_regressor(&self) -> bool {
        self.mean_regressor
    }

    pub fn monomials(&self) -> usize {
        self.exponents.len()
    }

    pub fn len(&self) -> usize {
        self.monomials() + if self.mean_regressor { self.dim } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `"1"`, `"x1"`, `"x1^2"`, `"x1*x2"`, …, `"mean1"`, ….
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .exponents
            .iter()
            .map(|e| {
                let parts: Vec<String> = e
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0)
                    .map(|(j, &p)| {
                        if p == 1 {
                            format!("x{}", j + 1)
                        } else {
                            format!("x{}^{}", j + 1, p)
                        }
                    })
                    .collect();
                if parts.is_empty() {
                    "1".to_string()
                } else {
                    parts.join("*")
                }
            })
            .collect();
        if self.mean_regressor {
            out.extend((1..=self.dim).map(|j| format!("mean{j}")));
        }
        out
    }

    /// Features at `x`; `mean` is ignored without the mean regressor.
    pub fn eval_into(&self, x: &[f64], mean: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product();
        }
        if self.mean_regressor {
            out[self.monomials()..].copy_from_slice(&mean[..self.dim]);
        }
    }

    /// `∂_j φ_f(x)` stored at `out[f * d + j]`.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (f, e) in self.exponents.iter().enumerate() {
            for j in 0..d {
                if e[j] == 0 {
                    continue;
                }
                let mut v = e[j] as f64 * x[j].powi(e[j] as i32 - 1);
                for l in (0..d).filter(|&l| l != j) {
                    v *= x[l].powi(e[l] as i32);
                }
                out[f * d + j] = v;
            }
        }
    }

    /// `∂_j∂_l φ_f(x)` stored at `out[(f * d + j) * d + l]`.
    pub fn hessian_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (f, e) in self.exponents.iter().enumerate() {
            for j in 0..d {
                for l in 0..d {
                    let mut p = e.clone();
                    let mut coef = p[j] as f64;
                    if p[j] == 0 {
                        continue;
                    }
                    p[j] -= 1;
                    coef *= p[l] as f64;
                    if p[l] == 0 {
                        continue;
                    }
                    p[l] -= 1;
                    let v: f64 = p.iter().zip(x).map(|(&q, &xv)| xv.powi(q as i32)).product();
                    out[(f * d + j) * d + l] = coef * v;
                }
            }
        }
    }
}
