use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {v}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `out[r] = bias[r] + row(r) · x`
    pub fn affine_into(&self, x: &[f64], bias: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.cols);
        out.clear();
        out.extend(
            self.values
                .chunks_exact(self.cols)
                .zip(bias)
                .map(|(row, b)| b + dot(row, x)),
        );
    }

    /// `out[c] = Σ_r upstream[r] · m[r, c]`
    pub fn transpose_mul_into(&self, upstream: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(upstream.len(), self.rows);
        out.clear();
        out.resize(self.cols, 0.0);
        for (row, &u) in self.values.chunks_exact(self.cols).zip(upstream) {
            if u == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += u * w;
            }
        }
    }

    /// `m[r, c] += scale · a[r] · b[c]`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &ar) in self.values.chunks_exact_mut(self.cols).zip(a) {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            for (m, bc) in row.iter_mut().zip(b) {
                *m += s * bc;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
