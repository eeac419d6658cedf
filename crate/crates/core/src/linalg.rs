//! Small dense helpers shared by the samplers, the oracle and the predictives.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// First diagonal jitter tried when a factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// Cholesky factorization, retrying with diagonal jitter 1e-10, 1e-9, ..., 1e-6.
///
/// The first attempt adds nothing. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = mat.clone().cholesky() {
        return Ok((chol, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::numerical(format!(
        "cholesky failed on {}x{} matrix after jitter {:e}",
        mat.nrows(),
        mat.ncols(),
        JITTER_MAX
    )))
}

/// log det of the matrix factored by `chol`.
pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Draws `mean + L z` with `z` standard normal, where `L` is lower triangular.
pub fn sample_with_factor<R: Rng + ?Sized>(
    mean: &[f64],
    lower: &DMatrix<f64>,
    rng: &mut R,
) -> Vec<f64> {
    let n = mean.len();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let lz = lower.lower_triangle() * z;
    mean.iter().zip(lz.iter()).map(|(m, v)| m + v).collect()
}

/// Numerically stable `ln(sum(exp(v)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(mean(exp(v)))`; the log of an equally weighted mixture.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_mean_exp_of_equal_values_is_that_value() {
        assert!((log_mean_exp(&[-3.5; 7]) + 3.5).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn jitter_rescues_rank_deficient_matrix() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let (_, jitter) = cholesky_with_jitter(&m).unwrap();
        assert!(jitter > 0.0 && jitter <= JITTER_MAX);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_with_jitter(&m), Err(Error::Numerical(_))));
    }
}
