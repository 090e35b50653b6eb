//! Dense row-major 2-D tensors backed by shared buffers.
//!
//! Everything in the network stack is a matrix: batches are `[n, dim]`,
//! parameters are `[in, out]` weights and `[1, out]` biases, scalars are
//! `[1, 1]`. Cloning is cheap (the buffer is reference counted); mutation
//! goes through [`Tensor::data_mut`] which copies on write.

use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        Tensor { rows, cols, data: Arc::new(data) }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![1.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    /// Identity matrix, used for diagonal masks in pairwise losses.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(n, n, data)
    }

    /// A row-vector `[1, cols]` from a slice.
    pub fn row(values: &[f64]) -> Self {
        Tensor::new(1, values.len(), values.to_vec())
    }

    /// Stack equal-length rows into an `[n, cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows in from_rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
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
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {:?}", self.shape());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::new(self.cols, self.rows, out)
    }

    /// `self * other` using a blocked SIMD GEMM kernel.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: [{}, {}] x [{}, {}]",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        unsafe {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                m as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        Tensor::new(n, m, out)
    }

    /// Concatenate tensors with equal row counts along the column axis.
    pub fn hcat(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "hcat needs at least one part");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "hcat row mismatch");
                data.extend_from_slice(p.row_slice(r));
            }
        }
        Tensor::new(rows, cols, data)
    }

    /// Round every element to the nearest f32. Parameters are kept exactly
    /// f32-representable so the 32-bit checkpoint payload roundtrips bitwise.
    pub fn round_to_f32(&mut self) {
        for v in self.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
