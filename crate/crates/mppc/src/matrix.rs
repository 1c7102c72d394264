//! Dense square transfer matrices over truncated count distributions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense square matrix mapping an input-count distribution to an
/// output-count distribution: `p' = M * p`.
///
/// Orientation is fixed once for the whole crate: row index `n` is the
/// output count, column index `m` is the input count. Storage is row-major
/// and dense; the matrices involved are triangular but small enough that
/// sparsity is not worth the bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl TransferMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.entries[i * dim + i] = 1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest count index: `dim - 1`.
    pub fn n_max(&self) -> usize {
        self.dim - 1
    }

    /// Entry at output count `n`, input count `m`.
    pub fn entry(&self, n: usize, m: usize) -> f64 {
        self.entries[n * self.dim + m]
    }

    pub fn set_entry(&mut self, n: usize, m: usize, value: f64) {
        self.entries[n * self.dim + m] = value;
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.entries[n * self.dim..(n + 1) * self.dim]
    }

    pub fn column_sum(&self, m: usize) -> f64 {
        (0..self.dim).map(|n| self.entry(n, m)).sum()
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.dim != rhs.dim {
            return Err(Error::DimensionMismatch(format!(
                "matmul of dims {} and {}",
                self.dim, rhs.dim
            )));
        }
        let dim = self.dim;
        let mut out = Self::zeros(dim);
        for n in 0..dim {
            for j in 0..dim {
                let a = self.entry(n, j);
                if a == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(j);
                let out_row = &mut out.entries[n * dim..(n + 1) * dim];
                for m in 0..dim {
                    out_row[m] += a * rhs_row[m];
                }
            }
        }
        Ok(out)
    }

    /// Raw matrix-vector product, with no sign or normalization checks.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "matrix dim {} applied to vector of length {}",
                self.dim,
                v.len()
            )));
        }
        Ok((0..self.dim)
            .map(|n| self.row(n).iter().zip(v).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    /// True if every entry strictly below the diagonal is exactly zero.
    pub fn is_upper_triangular(&self) -> bool {
        (0..self.dim).all(|n| (0..n).all(|m| self.entry(n, m) == 0.0))
    }

    /// True if every entry strictly above the diagonal is exactly zero.
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.dim).all(|n| (n + 1..self.dim).all(|m| self.entry(n, m) == 0.0))
    }

    /// Largest absolute difference from another matrix.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch(format!(
                "comparing dims {} and {}",
                self.dim, other.dim
            )));
        }
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Write one CSV line per matrix row.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        for n in 0..self.dim {
            let line = self
                .row(n)
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_neutral() {
        let id = TransferMatrix::identity(4);
        let v = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(id.mul_vec(&v).unwrap(), v);
        assert_eq!(id.matmul(&id).unwrap(), id);
    }

    #[test]
    fn triangularity_checks() {
        let mut m = TransferMatrix::identity(3);
        m.set_entry(0, 2, 0.5);
        assert!(m.is_upper_triangular());
        assert!(!m.is_lower_triangular());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = TransferMatrix::identity(3);
        assert!(m.mul_vec(&[1.0, 0.0]).is_err());
        assert!(m.matmul(&TransferMatrix::identity(2)).is_err());
    }
}
