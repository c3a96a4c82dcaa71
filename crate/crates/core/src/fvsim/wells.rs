use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell-centred point sources (injectors, rate ≥ 0) and sinks (producers,
/// rate ≤ 0), rates in ft²/day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellSet {
    pub injectors: Vec<(usize, f64)>,
    pub producers: Vec<(usize, f64)>,
}

impl WellSet {
    /// Builds a well set and checks sign conventions, index validity,
    /// distinctness and rate closure against `n_cells`.
    pub fn new(injectors: Vec<(usize, f64)>, producers: Vec<(usize, f64)>, n_cells: usize) -> Result<Self> {
        let set = Self { injectors, producers };
        set.validate(n_cells)?;
        Ok(set)
    }

    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if self.injectors.is_empty() || self.producers.is_empty() {
            return Err(Error::Domain("need at least one injector and one producer".into()));
        }
        let mut seen = vec![false; n_cells];
        for &(cell, rate) in self.injectors.iter().chain(&self.producers) {
            if cell >= n_cells {
                return Err(Error::Domain(format!("well cell {cell} out of range ({n_cells} cells)")));
            }
            if seen[cell] {
                return Err(Error::Domain(format!("well cell {cell} used twice")));
            }
            seen[cell] = true;
            if !rate.is_finite() {
                return Err(Error::Domain(format!("non-finite rate at cell {cell}")));
            }
        }
        if let Some(&(c, r)) = self.injectors.iter().find(|(_, r)| *r < 0.0) {
            return Err(Error::Domain(format!("injector at cell {c} has negative rate {r}")));
        }
        if let Some(&(c, r)) = self.producers.iter().find(|(_, r)| *r > 0.0) {
            return Err(Error::Domain(format!("producer at cell {c} has positive rate {r}")));
        }
        let total: f64 = self.rates().map(|(_, r)| r).sum();
        let scale: f64 = self.rates().map(|(_, r)| r.abs()).sum::<f64>().max(1.0);
        if total.abs() > 1e-9 * scale {
            return Err(Error::Domain(format!("well rates do not balance: sum = {total:e}")));
        }
        Ok(())
    }

    pub fn rates(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.injectors.iter().chain(&self.producers).copied()
    }

    /// Per-cell source term q.
    pub fn source_field(&self, n_cells: usize) -> Vec<f64> {
        let mut q = vec![0.0; n_cells];
        for (cell, rate) in self.rates() {
            q[cell] += rate;
        }
        q
    }

    pub fn total_injection(&self) -> f64 {
        self.injectors.iter().map(|(_, r)| r).sum()
    }

    pub fn total_production(&self) -> f64 {
        -self.producers.iter().map(|(_, r)| r).sum::<f64>()
    }
}
