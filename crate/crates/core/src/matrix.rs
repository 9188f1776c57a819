//! Minimal dense row-major f32 matrix used by the adapter and quantization code.

use thiserror::Error;

use crate::archive::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ShapeError> {
        if rows * cols != data.len() {
            return Err(ShapeError(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from nested rows; panics on ragged input (test/fixture helper).
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Rank-2 float tensor as a matrix (int4 tensors are dequantized).
    pub fn from_tensor(t: &Tensor) -> Result<Self, ShapeError> {
        let (rows, cols) = t
            .matrix_dims()
            .ok_or_else(|| ShapeError(format!("expected a rank-2 tensor, got shape {:?}", t.shape())))?;
        Self::new(rows, cols, t.to_f32_vec())
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scaled(&self, s: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self · rhs`, accumulated in f32.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, ShapeError> {
        if self.cols != rhs.rows {
            return Err(ShapeError(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0f32; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for (o, b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    /// Leading `cols` columns.
    pub fn slice_cols(&self, cols: usize) -> Result<Matrix, ShapeError> {
        if cols > self.cols {
            return Err(ShapeError(format!("cannot take {cols} of {} columns", self.cols)));
        }
        let data = (0..self.rows)
            .flat_map(|r| self.row(r)[..cols].iter().copied())
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(vec![self.rows, self.cols], self.data.clone()).expect("matrix shape is consistent")
    }
}
