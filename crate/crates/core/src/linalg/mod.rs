//! Dense matrices, seeded randomness, initialization and a finite-difference
//! gradient oracle.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use rng::{derive_seed, SeededRng};

use rand::Rng;

use crate::error::{Error, Result};

/// Kaiming-uniform initialization in the PyTorch linear-layer convention:
/// `rows × cols` is `out × in`, entries are i.i.d. on `[-1/√cols, 1/√cols]`.
pub fn kaiming_uniform_init(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "kaiming init needs positive dimensions, got {rows}x{cols}"
        )));
    }
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Central-difference gradient of `loss_fn` at `at` with step `h`.
pub fn finite_diff_grad<F>(mut loss_fn: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.rows() * at.cols());
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let x = at.get(r, c);
            probe.set(r, c, x + h);
            let plus = loss_fn(&probe);
            probe.set(r, c, x - h);
            let minus = loss_fn(&probe);
            probe.set(r, c, x);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is not finite when perturbing entry ({r}, {c})"
                )));
            }
            grad.push((plus - minus) / (2.0 * h));
        }
    }
    Matrix::new(at.rows(), at.cols(), grad)
}
