//! Dense row-major containers for query embeddings and image features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `P × D` matrix of per-Gaussian query embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl QueryMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::config(format!(
                "query matrix {rows}x{dim} needs {} values, got {}",
                rows * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("query values must be finite"));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::config(format!("row {i} has length {}, expected {dim}", r.len())));
            }
            values.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.dim), (other.rows, other.dim));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// `H × W × D` image feature map; pixel `(u, v)` = column `u`, row `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            values: vec![0.0; width * height * dim],
        }
    }

    pub fn constant(width: usize, height: usize, value: &[f64]) -> Self {
        let mut m = Self::zeros(width, height, value.len());
        for px in m.values.chunks_exact_mut(value.len().max(1)) {
            px.copy_from_slice(value);
        }
        m
    }

    pub fn from_vec(width: usize, height: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height * dim {
            return Err(Error::config(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                width * height * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("feature values must be finite"));
        }
        Ok(Self {
            width,
            height,
            dim,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn offset(&self, u: usize, v: usize) -> usize {
        (v * self.width + u) * self.dim
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let at = self.offset(u, v);
        &self.values[at..at + self.dim]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let at = self.offset(u, v);
        &mut self.values[at..at + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }
}
