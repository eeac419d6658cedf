//! Exact Gaussian-process reference under the noising chain.
//!
//! With `a_f = (1 - beta)^(f / 2)`, the level-`f` value at `x` is
//! `a_f g(x) + delta_f(x)` where `g` is the clean GP draw and `delta_f` has
//! variance `v_f = beta - beta (1 - beta)^f`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{AugmentedTask, FidelityLevel, NoiseSchedule};
pub use crate::datagen::eq_kernel;
use crate::datagen::{Point, Task};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, JITTER_START};
use crate::models::{
    danp_joint_loglik, DeployConfig, ForwardCounter, GaussianPredictive, LayerModel,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How noise at coincident inputs on different levels is related.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Level noises are independent (deployment: levels live at distinct inputs).
    Independent,
    /// Observations sharing an input across levels lie on one noising chain.
    Correlated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoisedGpModel {
    pub lengthscale: f64,
    pub schedule: NoiseSchedule,
    /// Added to every diagonal entry of every covariance the model builds.
    pub jitter: f64,
}

#[derive(Clone, Copy, Debug)]
struct Obs {
    x: f64,
    level: usize,
}

impl NoisedGpModel {
    pub fn new(lengthscale: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(lengthscale > 0.0) {
            return Err(Error::invalid("kernel lengthscale must be positive"));
        }
        Ok(NoisedGpModel {
            lengthscale,
            schedule,
            jitter: JITTER_START,
        })
    }

    fn scale(&self, level: usize) -> f64 {
        (1.0 - self.schedule.beta()).powf(level as f64 / 2.0)
    }

    fn noise_var(&self, level: usize) -> f64 {
        let b = self.schedule.beta();
        b - b * (1.0 - b).powi(level as i32)
    }

    fn cross(&self, a: &Obs, b: &Obs, same: bool, mode: NoiseMode) -> f64 {
        let mut c =
            self.scale(a.level) * self.scale(b.level) * eq_kernel(a.x, b.x, self.lengthscale);
        if same {
            c += self.noise_var(a.level) + self.jitter;
        } else if mode == NoiseMode::Correlated && a.x == b.x && a.level != b.level {
            let (lo, hi) = if a.level < b.level {
                (a.level, b.level)
            } else {
                (b.level, a.level)
            };
            c += self.scale(hi - lo) * self.noise_var(lo);
        }
        c
    }

    fn covariance(
        &self,
        rows: &[Obs],
        cols: &[Obs],
        symmetric: bool,
        mode: NoiseMode,
    ) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            self.cross(&rows[i], &cols[j], symmetric && i == j, mode)
        })
    }

    /// Variance of a single level-`f` value under the prior.
    pub fn prior_variance(&self, level: usize) -> f64 {
        self.scale(level).powi(2) + self.noise_var(level)
    }
}

/// Observations in canonical order, so results do not depend on input order.
fn observations(context: &[Point], observed: &[FidelityLevel]) -> (Vec<Obs>, Vec<f64>) {
    let mut all: Vec<(usize, Point)> = context.iter().map(|&p| (0, p)).collect();
    for lvl in observed {
        all.extend(lvl.points.iter().map(|&p| (lvl.level, p)));
    }
    all.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.x.total_cmp(&b.1.x))
            .then(a.1.y.total_cmp(&b.1.y))
    });
    all.into_iter()
        .map(|(level, p)| (Obs { x: p.x, level }, p.y))
        .unzip()
}

/// Exact conditional of level `f` at `query_xs` given noiseless context
/// points and the observed levels (all above `f`).
pub fn noised_gp_conditional(
    model: &NoisedGpModel,
    context: &[Point],
    observed: &[FidelityLevel],
    f: usize,
    query_xs: &[f64],
    mode: NoiseMode,
) -> Result<GaussianPredictive> {
    let levels = model.schedule.levels();
    if f > levels {
        return Err(Error::invalid(format!(
            "layer {f} out of range 0..={levels}"
        )));
    }
    if let Some(l) = observed.iter().find(|l| l.level <= f || l.level > levels) {
        return Err(Error::invalid(format!(
            "observed level {} cannot inform layer {f}",
            l.level
        )));
    }
    let (obs, ys) = observations(context, observed);
    let query: Vec<Obs> = query_xs.iter().map(|&x| Obs { x, level: f }).collect();
    let k_qq = model.covariance(&query, &query, true, mode);
    if obs.is_empty() {
        return GaussianPredictive::dense(vec![0.0; query.len()], k_qq);
    }
    let k_oo = model.covariance(&obs, &obs, true, mode);
    let k_qo = model.covariance(&query, &obs, false, mode);
    let (chol, _) = cholesky_with_jitter(&k_oo)?;
    let mean = &k_qo * chol.solve(&DVector::from_vec(ys));
    let v = chol
        .l()
        .solve_lower_triangular(&k_qo.transpose())
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let mut cov = k_qq - v.transpose() * v;
    cov = (&cov + cov.transpose()) * 0.5;
    GaussianPredictive::dense(mean.as_slice().to_vec(), cov)
}

fn conditional_from_joint(chol_l: &DMatrix<f64>, ys: &[f64], n_cond: usize) -> f64 {
    let z = chol_l
        .solve_lower_triangular(&DVector::from_column_slice(ys))
        .expect("triangular solve");
    (n_cond..ys.len())
        .map(|i| -0.5 * (LN_2PI + z[i] * z[i]) - chol_l[(i, i)].ln())
        .sum()
}

/// `log p(y_t | y_c)` under the noiseless GP: the trailing block of the
/// joint Cholesky factor of `[context; targets]`.
pub fn oracle_joint_loglik(model: &NoisedGpModel, task: &Task) -> Result<f64> {
    let pts: Vec<Point> = task.context.iter().chain(&task.targets).copied().collect();
    let obs: Vec<Obs> = pts.iter().map(|p| Obs { x: p.x, level: 0 }).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
    let k = model.covariance(&obs, &obs, true, NoiseMode::Independent);
    let (chol, _) = cholesky_with_jitter(&k)?;
    Ok(conditional_from_joint(&chol.l(), &ys, task.context.len()))
}

/// Joint log density of all targets and augmented levels given the context,
/// with levels on correlated chains at the target inputs.
pub fn augmented_joint_loglik(model: &NoisedGpModel, aug: &AugmentedTask) -> Result<f64> {
    let (mut obs, mut ys) = observations(&aug.task.context, &[]);
    let n_cond = obs.len();
    for p in &aug.task.targets {
        obs.push(Obs { x: p.x, level: 0 });
        ys.push(p.y);
    }
    for lvl in &aug.levels {
        for p in &lvl.points {
            obs.push(Obs {
                x: p.x,
                level: lvl.level,
            });
            ys.push(p.y);
        }
    }
    let k = model.covariance(&obs, &obs, true, NoiseMode::Correlated);
    let (chol, _) = cholesky_with_jitter(&k)?;
    Ok(conditional_from_joint(&chol.l(), &ys, n_cond))
}

/// The oracle behind the per-layer predictive interface.
#[derive(Clone, Copy, Debug)]
pub struct OracleDenoiser {
    pub model: NoisedGpModel,
}

pub fn oracle_as_denoiser(model: NoisedGpModel) -> OracleDenoiser {
    OracleDenoiser { model }
}

impl LayerModel for OracleDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.model.schedule
    }

    fn predict_layer(
        &self,
        layer: usize,
        context: &[Point],
        aux: &[FidelityLevel],
        query_xs: &[f64],
    ) -> Result<GaussianPredictive> {
        noised_gp_conditional(
            &self.model,
            context,
            aux,
            layer,
            query_xs,
            NoiseMode::Independent,
        )
    }
}

/// Distance between the Monte-Carlo joint log-likelihood (oracle denoiser,
/// `samples` auxiliary draws) and the exact value, for each sample count.
/// Every count draws its auxiliary seeds from the same `seed`.
pub fn pipeline_errors(
    model: &NoisedGpModel,
    task: &Task,
    sample_counts: &[usize],
    deploy: &DeployConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let exact = oracle_joint_loglik(model, task)?;
    let denoiser = oracle_as_denoiser(*model);
    sample_counts
        .iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mc =
                danp_joint_loglik(&denoiser, task, s, deploy, &mut rng, &ForwardCounter::new())?;
            Ok((mc - exact).abs())
        })
        .collect()
}
