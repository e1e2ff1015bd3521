use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Dense row-major f64 matrix.
///
/// Every product accumulates over the inner index in ascending order, one
/// output element at a time, so two computations that issue the same calls
/// produce bit-identical results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng::normal(rng, std)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2D {
        Tensor2D {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn write_rows(&mut self, start: usize, block: &Tensor2D) {
        debug_assert_eq!(block.cols, self.cols);
        let off = start * self.cols;
        self.data[off..off + block.data.len()].copy_from_slice(&block.data);
    }

    pub fn concat_rows(parts: &[Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn transpose(&self) -> Tensor2D {
        Tensor2D::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Tensor2D::from_fn(self.rows, other.cols, |i, j| {
            let mut acc = 0.0;
            for k in 0..self.cols {
                acc += self.get(i, k) * other.get(k, j);
            }
            acc
        }))
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Tensor2D::from_fn(self.rows, other.rows, |i, j| {
            let a = self.row(i);
            let b = other.row(j);
            let mut acc = 0.0;
            for k in 0..self.cols {
                acc += a[k] * b[k];
            }
            acc
        }))
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Tensor2D::from_fn(self.cols, other.cols, |i, j| {
            let mut acc = 0.0;
            for k in 0..self.rows {
                acc += self.get(k, i) * other.get(k, j);
            }
            acc
        }))
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor2D, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&self, bias: &Tensor2D) -> Result<Tensor2D> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        Ok(Tensor2D::from_fn(self.rows, self.cols, |r, c| {
            self.get(r, c) + bias.data[c]
        }))
    }

    pub fn scale(&self, s: f64) -> Tensor2D {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Column sums as a `1 x cols` tensor, rows accumulated in order.
    pub fn sum_rows(&self) -> Tensor2D {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor2D {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian f64 bytes of the data, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}
