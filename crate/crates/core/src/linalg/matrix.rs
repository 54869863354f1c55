use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Both dimensions are positive and every entry is finite after any public
/// constructor or operation returns successfully.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Row-major `n×m` product of an `n×k` and a `k×m` operand, each given as
/// (data, row stride, column stride).
fn gemm(n: usize, k: usize, m: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize)) -> Vec<f64> {
    debug_assert!(a.0.len() == n * k && b.0.len() == k * m);
    let mut out = vec![0.0; n * m];
    // SAFETY: strides describe in-bounds views of slices holding n*k and k*m
    // elements, and `out` holds n*m elements written with row stride m.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    out
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) of {rows}x{cols} matrix is {}",
                idx / cols,
                idx % cols,
                data[idx]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(n, cols, data)
    }

    /// Stacks the rows of several matrices with equal column counts.
    pub fn vstack(parts: &[&Matrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero matrices".into()))?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::DimensionMismatch {
                    op: "vstack",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Gathers the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Shape("row selection is empty".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let out = gemm(n, k, m, (&self.data, k as isize, 1), (&other.data, m as isize, 1));
        Self::new(n, m, out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                op: "t_matmul",
                left: (self.cols, self.rows),
                right: other.shape(),
            });
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let out = gemm(n, k, m, (&self.data, 1, n as isize), (&other.data, m as isize, 1));
        Self::new(n, m, out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: (other.cols, other.rows),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let out = gemm(n, k, m, (&self.data, k as isize, 1), (&other.data, 1, k as isize));
        Self::new(n, m, out)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// `self + alpha · other`.
    pub fn add_scaled(&self, other: &Matrix, alpha: f64) -> Result<Self> {
        self.check_same_shape("add_scaled", other)?;
        Self::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Mutable access for in-place optimizer updates. Callers are responsible
    /// for re-checking finiteness afterwards.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.iter_rows().take(8) {
            writeln!(f, "  {row:?}")?;
        }
        if self.rows > 8 {
            writeln!(f, "  ... {} more rows", self.rows - 8)?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for p in 0..a.cols() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_is_neutral() {
        let a = Matrix::from_rows(&[[1.5, -2.0], [0.0, 3.0], [4.0, 5.0]]).unwrap();
        let i2 = Matrix::identity(2);
        assert_eq!(a.matmul(&i2).unwrap(), a);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_expanded_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(11);
        let a = random(8, 16, &mut rng);
        let b = random(16, 4, &mut rng);
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = SeededRng::new(3);
        let a = random(7, 5, &mut rng);
        let b = random(7, 3, &mut rng);
        let c = random(4, 5, &mut rng);
        let lhs = a.t_matmul(&b).unwrap();
        let rhs = a.transpose().matmul(&b).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&c.transpose()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, m in 1usize..6, p in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let a = random(n, k, &mut rng);
            let b = random(k, m, &mut rng);
            let c = random(m, p, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.sub(&right).unwrap().max_abs() / scale < 1e-9);
        }
    }
}
