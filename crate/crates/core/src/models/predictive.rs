//! Gaussian predictives over a set of query points and their mixtures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, log_mean_exp};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Floor added to every predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    /// Independent marginals.
    Diagonal(Vec<f64>),
    /// `diag(diag) + L L^T` with `factor` holding `L` row-major, `n x rank`.
    LowRank {
        diag: Vec<f64>,
        factor: Vec<f64>,
        rank: usize,
    },
    Dense(DMatrix<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPredictive {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl GaussianPredictive {
    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::invalid("mean and variance lengths differ"));
        }
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::numerical("non-positive predictive variance"));
        }
        Ok(GaussianPredictive {
            mean,
            cov: Covariance::Diagonal(var),
        })
    }

    pub fn low_rank(mean: Vec<f64>, diag: Vec<f64>, factor: Vec<f64>, rank: usize) -> Result<Self> {
        if mean.len() != diag.len() || factor.len() != mean.len() * rank {
            return Err(Error::invalid("low-rank predictive shapes disagree"));
        }
        if diag.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::numerical("non-positive predictive variance"));
        }
        Ok(GaussianPredictive {
            mean,
            cov: Covariance::LowRank { diag, factor, rank },
        })
    }

    pub fn dense(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::invalid("dense covariance shape disagrees with mean"));
        }
        Ok(GaussianPredictive {
            mean,
            cov: Covariance::Dense(cov),
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn marginal_variances(&self) -> Vec<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::LowRank { diag, factor, rank } => diag
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    d + factor[i * rank..(i + 1) * rank]
                        .iter()
                        .map(|l| l * l)
                        .sum::<f64>()
                })
                .collect(),
            Covariance::Dense(m) => (0..m.nrows()).map(|i| m[(i, i)]).collect(),
        }
    }

    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        match &self.cov {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Covariance::LowRank { diag, factor, rank } => {
                let l = DMatrix::from_row_slice(n, *rank, factor);
                let mut m = &l * l.transpose();
                for i in 0..n {
                    m[(i, i)] += diag[i];
                }
                m
            }
            Covariance::Dense(m) => m.clone(),
        }
    }

    /// Per-point marginal log densities.
    pub fn marginal_log_densities(&self, ys: &[f64]) -> Result<Vec<f64>> {
        self.check_len(ys)?;
        Ok(self
            .mean
            .iter()
            .zip(self.marginal_variances())
            .zip(ys)
            .map(|((m, v), y)| -0.5 * (LN_2PI + v.ln() + (y - m).powi(2) / v))
            .collect())
    }

    fn check_len(&self, ys: &[f64]) -> Result<()> {
        if ys.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} observations for a predictive over {} points",
                ys.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Exact joint log density of `ys`.
    pub fn log_density(&self, ys: &[f64]) -> Result<f64> {
        self.check_len(ys)?;
        match &self.cov {
            Covariance::Diagonal(_) => Ok(self.marginal_log_densities(ys)?.iter().sum()),
            Covariance::LowRank { diag, factor, rank } => {
                let resid: Vec<f64> = ys.iter().zip(&self.mean).map(|(y, m)| y - m).collect();
                Ok(-low_rank_nll(&resid, diag, factor, *rank)?.nll)
            }
            Covariance::Dense(m) => {
                let chol = m.clone().cholesky().ok_or_else(|| {
                    Error::numerical("dense predictive covariance is not positive definite")
                })?;
                let r = DVector::from_iterator(
                    self.len(),
                    ys.iter().zip(&self.mean).map(|(y, m)| y - m),
                );
                let z = chol
                    .l()
                    .solve_lower_triangular(&r)
                    .expect("triangular solve");
                Ok(-0.5
                    * (self.len() as f64 * LN_2PI + linalg::chol_logdet(&chol) + z.norm_squared()))
            }
        }
    }

    /// One joint draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match &self.cov {
            Covariance::Diagonal(v) => Ok(self
                .mean
                .iter()
                .zip(v)
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect()),
            Covariance::LowRank { diag, factor, rank } => {
                let z: Vec<f64> = (0..*rank).map(|_| rng.sample(StandardNormal)).collect();
                Ok(self
                    .mean
                    .iter()
                    .zip(diag)
                    .enumerate()
                    .map(|(i, (m, d))| {
                        let lz: f64 = factor[i * rank..(i + 1) * rank]
                            .iter()
                            .zip(&z)
                            .map(|(l, z)| l * z)
                            .sum();
                        m + lz + d.sqrt() * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect())
            }
            Covariance::Dense(m) => {
                let chol = m.clone().cholesky().ok_or_else(|| {
                    Error::numerical("dense predictive covariance is not positive definite")
                })?;
                Ok(linalg::sample_with_factor(&self.mean, &chol.l(), rng))
            }
        }
    }

    /// Draws each point independently from its marginal.
    pub fn sample_marginals<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(self.marginal_variances())
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Exact joint log density; see [`GaussianPredictive::log_density`].
pub fn gaussian_loglik(pred: &GaussianPredictive, ys: &[f64]) -> Result<f64> {
    pred.log_density(ys)
}

pub(crate) struct LowRankNll {
    pub nll: f64,
    /// `Sigma^{-1} r`
    pub alpha: Vec<f64>,
    /// `D^{-1} L A^{-1}`, `n x rank`, equal to `Sigma^{-1} L`.
    pub sinv_l: Vec<f64>,
    /// `diag(Sigma^{-1})`
    pub sinv_diag: Vec<f64>,
}

/// Negative log density of residual `r` under `N(0, D + L L^T)` via the
/// matrix determinant lemma and the Woodbury identity, with
/// `A = I + L^T D^{-1} L`.
pub(crate) fn low_rank_nll(
    resid: &[f64],
    diag: &[f64],
    factor: &[f64],
    rank: usize,
) -> Result<LowRankNll> {
    let n = resid.len();
    let l = DMatrix::from_row_slice(n, rank, factor);
    let dinv: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
    let mut m = l.clone();
    for i in 0..n {
        for r in 0..rank {
            m[(i, r)] *= dinv[i];
        }
    }
    let mut a = l.transpose() * &m;
    for r in 0..rank {
        a[(r, r)] += 1.0;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::numerical("capacitance matrix is not positive definite"))?;
    let logdet = diag.iter().map(|d| d.ln()).sum::<f64>() + linalg::chol_logdet(&chol);
    let rv = DVector::from_column_slice(resid);
    let b = m.transpose() * &rv;
    let ainv_b = chol.solve(&b);
    let quad = resid.iter().zip(&dinv).map(|(r, d)| r * r * d).sum::<f64>() - b.dot(&ainv_b);
    let nll = 0.5 * (n as f64 * LN_2PI + logdet + quad);
    if !nll.is_finite() {
        return Err(Error::numerical("non-finite low-rank log density"));
    }
    let m_ainv_b = &m * &ainv_b;
    let alpha: Vec<f64> = (0..n).map(|i| resid[i] * dinv[i] - m_ainv_b[i]).collect();
    // P = M A^{-1}
    let p = chol.solve(&m.transpose()).transpose();
    let sinv_diag: Vec<f64> = (0..n)
        .map(|i| dinv[i] - (0..rank).map(|r| p[(i, r)] * m[(i, r)]).sum::<f64>())
        .collect();
    let mut sinv_l = vec![0.0; n * rank];
    for i in 0..n {
        for r in 0..rank {
            sinv_l[i * rank + r] = p[(i, r)];
        }
    }
    Ok(LowRankNll {
        nll,
        alpha,
        sinv_l,
        sinv_diag,
    })
}

/// Layout of the raw per-query outputs of a prediction head.
///
/// Row 0 is the mean, row 1 the pre-softplus variance, rows `2..2 + rank`
/// the low-rank factor scaled by `sqrt(rank)`; each row has one entry per query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub rank: usize,
}

impl HeadLayout {
    pub fn rows(&self) -> usize {
        2 + self.rank
    }

    fn factor_scale(&self) -> f64 {
        1.0 / (self.rank.max(1) as f64).sqrt()
    }

    pub fn predictive(&self, raw: &[f64], q: usize) -> Result<GaussianPredictive> {
        if raw.len() != self.rows() * q {
            return Err(Error::invalid("head output has the wrong size"));
        }
        let mean = raw[..q].to_vec();
        let var: Vec<f64> = raw[q..2 * q]
            .iter()
            .map(|&v| VARIANCE_FLOOR + linalg::softplus(v))
            .collect();
        if self.rank == 0 {
            return GaussianPredictive::diagonal(mean, var);
        }
        let s = self.factor_scale();
        let mut factor = vec![0.0; q * self.rank];
        for r in 0..self.rank {
            for i in 0..q {
                factor[i * self.rank + r] = s * raw[(2 + r) * q + i];
            }
        }
        GaussianPredictive::low_rank(mean, var, factor, self.rank)
    }

    /// Negative log density of `ys` and its gradient with respect to `raw`.
    pub fn nll_and_grad(&self, raw: &[f64], ys: &[f64]) -> Result<(f64, Vec<f64>)> {
        let q = ys.len();
        let pred = self.predictive(raw, q)?;
        let resid: Vec<f64> = ys.iter().zip(&pred.mean).map(|(y, m)| y - m).collect();
        let mut grad = vec![0.0; raw.len()];
        let raw_var = &raw[q..2 * q];
        match &pred.cov {
            Covariance::Diagonal(var) => {
                let mut nll = 0.0;
                for i in 0..q {
                    let (r, v) = (resid[i], var[i]);
                    nll += 0.5 * (LN_2PI + v.ln() + r * r / v);
                    grad[i] = -r / v;
                    grad[q + i] = 0.5 * (1.0 / v - r * r / (v * v)) * linalg::sigmoid(raw_var[i]);
                }
                Ok((nll, grad))
            }
            Covariance::LowRank { diag, factor, rank } => {
                let lr = low_rank_nll(&resid, diag, factor, *rank)?;
                let s = self.factor_scale();
                // d nll / d Sigma = G / 2 with G = Sigma^{-1} - alpha alpha^T
                let mut alpha_l = vec![0.0; *rank];
                for i in 0..q {
                    for r in 0..*rank {
                        alpha_l[r] += lr.alpha[i] * factor[i * rank + r];
                    }
                }
                for i in 0..q {
                    grad[i] = -lr.alpha[i];
                    let g_ii = lr.sinv_diag[i] - lr.alpha[i] * lr.alpha[i];
                    grad[q + i] = 0.5 * g_ii * linalg::sigmoid(raw_var[i]);
                    for r in 0..*rank {
                        let gl = lr.sinv_l[i * rank + r] - lr.alpha[i] * alpha_l[r];
                        grad[(2 + r) * q + i] = gl * s;
                    }
                }
                Ok((lr.nll, grad))
            }
            Covariance::Dense(_) => unreachable!("heads never produce dense covariances"),
        }
    }
}

/// An equally weighted mixture of Gaussian predictives over the same queries.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePredictive {
    components: Vec<GaussianPredictive>,
}

impl MixturePredictive {
    pub fn new(components: Vec<GaussianPredictive>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::invalid("mixture needs at least one component"));
        };
        if components.iter().any(|c| c.len() != first.len()) {
            return Err(Error::invalid("mixture components disagree on query count"));
        }
        Ok(MixturePredictive { components })
    }

    pub fn components(&self) -> &[GaussianPredictive] {
        &self.components
    }

    pub fn log_density(&self, ys: &[f64]) -> Result<f64> {
        let lls = self
            .components
            .iter()
            .map(|c| c.log_density(ys))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_mean_exp(&lls))
    }

    /// Per-query mixture mean and variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        mixture_moments(
            self.components
                .iter()
                .map(|c| (c.mean.clone(), c.marginal_variances())),
        )
    }
}

/// Mean is the average of component means; variance is
/// `mean(var + mean^2) - mixture_mean^2`, computed as
/// `mean(var) + mean((mean - mixture_mean)^2)`.
pub fn mixture_moments(
    components: impl IntoIterator<Item = (Vec<f64>, Vec<f64>)>,
) -> (Vec<f64>, Vec<f64>) {
    let comps: Vec<(Vec<f64>, Vec<f64>)> = components.into_iter().collect();
    let Some(first) = comps.first() else {
        return (Vec::new(), Vec::new());
    };
    let (n, c) = (first.0.len(), comps.len() as f64);
    let mean: Vec<f64> = (0..n)
        .map(|i| comps.iter().map(|(m, _)| m[i]).sum::<f64>() / c)
        .collect();
    let var = (0..n)
        .map(|i| {
            let within = comps.iter().map(|(_, v)| v[i]).sum::<f64>() / c;
            let between = comps
                .iter()
                .map(|(m, _)| (m[i] - mean[i]).powi(2))
                .sum::<f64>()
                / c;
            within + between
        })
        .collect();
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_low_rank(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> GaussianPredictive {
        let mean = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let diag = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
        let factor = (0..n * rank).map(|_| rng.random::<f64>() - 0.5).collect();
        GaussianPredictive::low_rank(mean, diag, factor, rank).unwrap()
    }

    /// Independent route: dense covariance, explicit inverse and determinant.
    fn dense_oracle(pred: &GaussianPredictive, ys: &[f64]) -> f64 {
        let cov = pred.dense_covariance();
        let n = ys.len();
        let r = DVector::from_iterator(n, ys.iter().zip(&pred.mean).map(|(y, m)| y - m));
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        -0.5 * (n as f64 * LN_2PI + det.ln() + (r.transpose() * inv * &r)[(0, 0)])
    }

    #[test]
    fn standard_normal_at_zero() {
        let p = GaussianPredictive::diagonal(vec![0.0], vec![1.0]).unwrap();
        assert!((p.log_density(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn independent_points_factorise() {
        let p = GaussianPredictive::diagonal(vec![0.1, -0.3], vec![0.5, 2.0]).unwrap();
        let joint = p.log_density(&[0.4, 1.0]).unwrap();
        let a = GaussianPredictive::diagonal(vec![0.1], vec![0.5])
            .unwrap()
            .log_density(&[0.4])
            .unwrap();
        let b = GaussianPredictive::diagonal(vec![-0.3], vec![2.0])
            .unwrap()
            .log_density(&[1.0])
            .unwrap();
        assert!((joint - a - b).abs() < 1e-12);
    }

    #[test]
    fn low_rank_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rank in [1, 4, 12] {
            let p = random_low_rank(&mut rng, 10, rank);
            let ys: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let fast = p.log_density(&ys).unwrap();
            assert!((fast - dense_oracle(&p, &ys)).abs() < 1e-8);
            let dense = GaussianPredictive::dense(p.mean.clone(), p.dense_covariance()).unwrap();
            assert!((fast - dense.log_density(&ys).unwrap()).abs() < 1e-8);
            assert!(p.dense_covariance().cholesky().is_some());
            assert!(p
                .marginal_variances()
                .iter()
                .zip(match &p.cov {
                    Covariance::LowRank { diag, .. } => diag,
                    _ => unreachable!(),
                })
                .all(|(m, d)| m >= d));
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for rank in [0, 3] {
            let layout = HeadLayout { rank };
            let q = 6;
            let raw: Vec<f64> = (0..layout.rows() * q)
                .map(|_| rng.random::<f64>() - 0.5)
                .collect();
            let ys: Vec<f64> = (0..q).map(|_| rng.random::<f64>()).collect();
            let (_, grad) = layout.nll_and_grad(&raw, &ys).unwrap();
            let h = 1e-6;
            for i in 0..raw.len() {
                let mut p = raw.clone();
                p[i] += h;
                let mut m = raw.clone();
                m[i] -= h;
                let fd = (layout.nll_and_grad(&p, &ys).unwrap().0
                    - layout.nll_and_grad(&m, &ys).unwrap().0)
                    / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0),
                    "rank {rank} i {i}: {} vs {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn sampling_matches_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_low_rank(&mut rng, 3, 2);
        let cov = p.dense_covariance();
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let y = p.sample(&mut rng).unwrap();
            let r = DVector::from_iterator(3, y.iter().zip(&p.mean).map(|(a, b)| a - b));
            acc += &r * r.transpose();
        }
        acc /= n as f64;
        assert!((acc - cov).abs().max() < 0.03);
    }

    #[test]
    fn mixture_algebra() {
        let a = GaussianPredictive::diagonal(vec![1.5, 0.0], vec![0.2, 1.0]).unwrap();
        let mix = MixturePredictive::new(vec![a.clone()]).unwrap();
        assert_eq!(mix.moments(), (a.mean.clone(), a.marginal_variances()));
        let ys = [1.0, 0.3];
        assert!((mix.log_density(&ys).unwrap() - a.log_density(&ys).unwrap()).abs() < 1e-12);
        let mix = MixturePredictive::new(vec![a.clone(), a.clone(), a.clone()]).unwrap();
        assert!((mix.log_density(&ys).unwrap() - a.log_density(&ys).unwrap()).abs() < 1e-12);

        let (m, v) = mixture_moments([(vec![2.0], vec![0.0]), (vec![-2.0], vec![0.0])]);
        assert_eq!(m, vec![0.0]);
        assert!((v[0] - 4.0).abs() < 1e-12);
        assert!(MixturePredictive::new(vec![]).is_err());
    }
}
