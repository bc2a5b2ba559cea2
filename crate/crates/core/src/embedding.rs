use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major table of `rows × dim` reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Embedding {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {rows}x{dim} = {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    /// Entries drawn i.i.d. from Normal(0, std²).
    pub fn normal<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn checked_row(&self, r: usize, what: &'static str) -> Result<&[f64]> {
        if r >= self.rows {
            return Err(Error::IndexOutOfRange {
                what,
                index: r,
                bound: self.rows,
            });
        }
        Ok(self.row(r))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sparse per-row gradient for one embedding table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowGrads {
    dim: usize,
    rows: std::collections::BTreeMap<usize, Vec<f64>>,
}

impl RowGrads {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Default::default(),
        }
    }

    /// `grad[row] += scale * direction`
    pub fn add_scaled(&mut self, row: usize, scale: f64, direction: &[f64]) {
        let dim = self.dim;
        let g = self.rows.entry(row).or_insert_with(|| vec![0.0; dim]);
        for (g, d) in g.iter_mut().zip(direction) {
            *g += scale * d;
        }
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(r, g)| (*r, g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Dense `(rows × dim)` view, zero where untouched.
    pub fn to_dense(&self, rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.dim];
        for (r, g) in &self.rows {
            out[r * self.dim..(r + 1) * self.dim].copy_from_slice(g);
        }
        out
    }

    /// Plain SGD on the touched rows with optional L2 decay:
    /// `row -= lr * (grad + l2 * row)`.
    pub fn apply(&self, table: &mut Embedding, lr: f64, l2: f64) {
        for (r, g) in &self.rows {
            for (w, g) in table.row_mut(*r).iter_mut().zip(g) {
                *w -= lr * (g + l2 * *w);
            }
        }
    }
}

pub(crate) fn hadamard_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn hadamard3_sum(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((x, y), z)| x * y * z)
        .sum()
}
