//! Dense row-major `f64` tensors.
//!
//! The shapes that actually occur here are scalars (empty shape), vectors,
//! and matrices; everything is stored flat. Operations that could produce
//! NaN/Inf are validated at the public API boundaries (the tape and the
//! model), not on every arithmetic call.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense 64-bit float array with a shape. Row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Matrix with `rows x cols` entries in row-major order.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| s * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `W x` for a `[r, c]` matrix and a `[c]` vector.
    pub fn matvec(&self, x: &Tensor) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(x.shape, [c], "matvec: {:?} . {:?}", self.shape, x.shape);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            out[i] = row.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        }
        Tensor::vector(out)
    }

    /// `Wᵀ v` for a `[r, c]` matrix and a `[r]` vector.
    pub fn vecmat(&self, v: &Tensor) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(v.shape, [r], "vecmat: {:?}ᵀ . {:?}", self.shape, v.shape);
        let mut out = vec![0.0; c];
        for i in 0..r {
            let vi = v.data[i];
            if vi == 0.0 {
                continue;
            }
            let row = &self.data[i * c..(i + 1) * c];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
        Tensor::vector(out)
    }

    /// Outer product `u vᵀ` of two vectors.
    pub fn outer(u: &Tensor, v: &Tensor) -> Tensor {
        assert_eq!(u.shape.len(), 1);
        assert_eq!(v.shape.len(), 1);
        let (r, c) = (u.len(), v.len());
        let mut data = Vec::with_capacity(r * c);
        for &a in &u.data {
            for &b in &v.data {
                data.push(a * b);
            }
        }
        Tensor::matrix(r, c, data)
    }

    /// `A B` for `[m, k]` and `[k, n]` matrices.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul: {:?} . {:?}", self.shape, other.shape);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, data)
    }

    /// Scale column `j` of a matrix by `v[j]`, in place.
    pub fn scale_cols(&mut self, v: &Tensor) {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(v.shape, [c]);
        for i in 0..r {
            for j in 0..c {
                self.data[i * c + j] *= v.data[j];
            }
        }
        let _ = r;
    }
}
