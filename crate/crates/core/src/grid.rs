use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = t0 + k Δt`, `k = 0..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(Error::invalid(format!(
                "time grid needs t0 < T, got [{t0}, {t_end}]"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 - 1e-12 && t <= self.t_end + 1e-12
    }

    /// Index of the node equal to `t` (within a relative tolerance), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let s = (t - self.t0) / self.dt();
        let k = s.round();
        ((s - k).abs() < 1e-9 && k >= 0.0 && k as usize <= self.steps).then_some(k as usize)
    }

    /// Cell `k` with `t_k ≤ t ≤ t_{k+1}` and the fractional position inside it.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = ((t - self.t0) / self.dt()).clamp(0.0, self.steps as f64);
        let k = (s.floor() as usize).min(self.steps - 1);
        (k, s - k as f64)
    }

    /// Sub-grid made of nodes `from..=to` of this grid.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.steps {
            return Err(Error::invalid(format!("invalid node range {from}..={to}")));
        }
        Self::new(self.time(from), self.time(to), to - from)
    }
}
