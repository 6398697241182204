//! Row-major dense matrices.

use crate::scalar::Scalar;

use super::NumericsError;

/// A dense 2-D tensor stored as one flat row-major buffer.
///
/// Element `(r, c)` lives at `data[r * cols + c]`. All shapes are fixed at
/// construction; operations that change shape produce new tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor2D<F> {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Builds a tensor from nested rows, which must all have equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::DataLength {
                    rows: r,
                    cols: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2D {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// A scalar wrapped as a 1x1 tensor.
    pub fn scalar(value: F) -> Self {
        Tensor2D {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: F) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[F] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// True when the tensor is 1x1.
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// The single element of a 1x1 tensor.
    pub fn scalar_value(&self) -> Result<F, NumericsError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NumericsError::NotScalar {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Squared Frobenius distance to another tensor of the same shape.
    pub fn frobenius_distance(&self, other: &Self) -> Result<F, NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "frobenius_distance",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut acc = F::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = *a - *b;
            acc += d * d;
        }
        Ok(acc.sqrt())
    }

    /// Copies the buffer out as `f64`, the interchange type for checkpoints.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|x| x.to_f64().expect("scalar converts to f64"))
            .collect()
    }

    /// Rebuilds a tensor from checkpoint data, rounding into `F` if needed.
    pub fn from_f64_vec(rows: usize, cols: usize, data: &[f64]) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Tensor2D {
            rows,
            cols,
            data: data.iter().map(|&x| crate::scalar::cast(x)).collect(),
        })
    }
}
