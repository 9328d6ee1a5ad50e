//! Structural algebra for a forecast hierarchy.
//!
//! Series are always ordered `[aggregates..., leaf_1, ..., leaf_m]`. The
//! structural matrix is `S = [S_sum; I_m]` and the coherence operator is
//! `B = [I_{n-m} | -S_sum]`, so that `B S = 0` and a vector `v` is coherent
//! iff `B v = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::market::MarketHour;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    m: usize,
    /// Aggregation rows, `(n - m) x m`, binary.
    s_sum: Vec<Vec<u8>>,
}

impl Hierarchy {
    /// PM + `m` producers.
    pub fn two_level(m: usize) -> Result<Self> {
        Self::from_aggregation(m, vec![vec![1; m]])
    }

    /// General hierarchy from its aggregation rows.
    pub fn from_aggregation(m: usize, s_sum: Vec<Vec<u8>>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("hierarchy needs at least one leaf".into()));
        }
        if s_sum.is_empty() {
            return Err(Error::Config("hierarchy needs at least one aggregate".into()));
        }
        for row in &s_sum {
            check_dim(m, row.len(), "aggregation row")?;
            if row.iter().any(|&x| x > 1) {
                return Err(Error::Config("aggregation matrix must be binary".into()));
            }
        }
        Ok(Self { m, s_sum })
    }

    /// Number of leaves.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of series.
    pub fn n(&self) -> usize {
        self.m + self.s_sum.len()
    }

    pub fn n_aggregates(&self) -> usize {
        self.s_sum.len()
    }

    pub fn is_two_level(&self) -> bool {
        self.s_sum.len() == 1 && self.s_sum[0].iter().all(|&x| x == 1)
    }

    /// `S`, `n x m`.
    pub fn structural_matrix(&self) -> Vec<Vec<i64>> {
        let mut s: Vec<Vec<i64>> = self
            .s_sum
            .iter()
            .map(|row| row.iter().map(|&x| x as i64).collect())
            .collect();
        for i in 0..self.m {
            let mut row = vec![0; self.m];
            row[i] = 1;
            s.push(row);
        }
        s
    }

    /// `B`, `(n - m) x n`.
    pub fn coherence_operator(&self) -> Vec<Vec<i64>> {
        let k = self.n_aggregates();
        self.s_sum
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let mut b = vec![0; k + self.m];
                b[r] = 1;
                for (j, &x) in row.iter().enumerate() {
                    b[k + j] = -(x as i64);
                }
                b
            })
            .collect()
    }

    /// `S b`.
    pub fn aggregate(&self, bottom: &[f64]) -> Result<SeriesVector> {
        check_dim(self.m, bottom.len(), "bottom-level vector")?;
        let mut values = Vec::with_capacity(self.n());
        for row in &self.s_sum {
            values.push(
                row.iter()
                    .zip(bottom)
                    .filter(|(&s, _)| s == 1)
                    .map(|(_, &b)| b)
                    .sum(),
            );
        }
        values.extend_from_slice(bottom);
        Ok(SeriesVector(values))
    }

    /// `B v`.
    pub fn coherence_residual(&self, v: &SeriesVector) -> Result<Vec<f64>> {
        check_dim(self.n(), v.len(), "series vector")?;
        let k = self.n_aggregates();
        let leaves = &v.0[k..];
        Ok(self
            .s_sum
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let sum: f64 = row
                    .iter()
                    .zip(leaves)
                    .filter(|(&s, _)| s == 1)
                    .map(|(_, &b)| b)
                    .sum();
                v.0[r] - sum
            })
            .collect())
    }

    /// Every component of `B v` within `tol * (1 + max |v|)`.
    pub fn is_coherent(&self, v: &SeriesVector, tol: f64) -> bool {
        let Ok(residual) = self.coherence_residual(v) else {
            return false;
        };
        let scale = 1.0 + v.0.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        residual.iter().all(|r| r.abs() <= tol * scale)
    }
}

/// Values for every series in hierarchy order (MWh).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesVector(pub Vec<f64>);

impl SeriesVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Top aggregate of a two-level vector.
    pub fn total(&self) -> f64 {
        self.0[0]
    }

    /// Trailing `m` leaf entries.
    pub fn leaves(&self, m: usize) -> &[f64] {
        &self.0[self.0.len() - m..]
    }
}

/// One issue time: base forecasts, context features, realized values and the
/// prices of the delivery hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub t: i64,
    pub base: SeriesVector,
    pub context: Vec<f64>,
    pub actual: SeriesVector,
    pub hour: MarketHour,
}

impl ForecastRecord {
    /// Checks that the realized vector is coherent.
    pub fn validate(&self, hierarchy: &Hierarchy) -> Result<()> {
        check_dim(hierarchy.n(), self.base.len(), "base forecast")?;
        check_dim(hierarchy.n(), self.actual.len(), "actual")?;
        if !hierarchy.is_coherent(&self.actual, 1e-9) {
            return Err(Error::Data(format!(
                "record {}: realized values are not coherent",
                self.t
            )));
        }
        Ok(())
    }
}
