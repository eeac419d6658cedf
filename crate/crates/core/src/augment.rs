//! Autoregressive noising of target sets, the noise-schedule algebra and
//! per-layer task masking.
//!
//! One noising step maps `y -> sqrt(1 - beta) y + beta eps` with standard
//! normal `eps`, so after `f` steps
//! `y_f = (1 - beta)^(f/2) y_0 + delta_f`, `Var(delta_f) = beta - beta (1 - beta)^f`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{InputRange, Point, Task};
use crate::error::{Error, Result};

/// Number of noise levels with a constant per-step parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: usize,
    beta: f64,
    sigma2: f64,
}

/// `beta - beta (1 - beta)^levels`, the variance accumulated after `levels` steps.
pub fn compounded_variance(beta: f64, levels: usize) -> f64 {
    beta - beta * (1.0 - beta).powi(levels as i32)
}

/// Solves `beta - beta (1 - beta)^F = sigma2` for `beta` in (0, 1) by bisection.
///
/// The left side is strictly increasing on (0, 1), rising from 0 to 1.
pub fn solve_beta(levels: usize, sigma2: f64) -> Result<f64> {
    if levels == 0 {
        return Err(Error::invalid("solve_beta needs at least one noise level"));
    }
    if !(sigma2 > 0.0 && sigma2 < 1.0) {
        return Err(Error::invalid(format!(
            "target variance must lie in (0, 1), got {sigma2}"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if compounded_variance(mid, levels) < sigma2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl NoiseSchedule {
    /// The empty schedule: no auxiliary levels.
    pub fn none() -> Self {
        NoiseSchedule {
            levels: 0,
            beta: 0.0,
            sigma2: 0.0,
        }
    }

    pub fn from_beta(levels: usize, beta: f64) -> Result<Self> {
        if levels == 0 {
            return Ok(Self::none());
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        Ok(NoiseSchedule {
            levels,
            beta,
            sigma2: compounded_variance(beta, levels),
        })
    }

    pub fn from_sigma2(levels: usize, sigma2: f64) -> Result<Self> {
        Self::from_beta(levels, solve_beta(levels, sigma2)?)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Variance of the noise at the last level.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `((1 - beta)^(f/2), beta - beta (1 - beta)^f)`: signal scale and noise
    /// variance after `f` steps.
    pub fn compound_params(&self, f: usize) -> Result<(f64, f64)> {
        if f > self.levels {
            return Err(Error::invalid(format!(
                "level {f} exceeds schedule with {} levels",
                self.levels
            )));
        }
        Ok((
            (1.0 - self.beta).powf(f as f64 / 2.0),
            compounded_variance(self.beta, f),
        ))
    }

    /// Checks a recorded `(F, beta, sigma2)` triple against the algebra.
    pub fn validate_recorded(levels: usize, beta: f64, sigma2: f64) -> Result<Self> {
        let s = Self::from_beta(levels, beta)?;
        if (s.sigma2 - sigma2).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "recorded sigma2 {sigma2} disagrees with beta {beta} over {levels} levels (expected {})",
                s.sigma2
            )));
        }
        Ok(s)
    }
}

/// One step of the noising chain, applied elementwise.
pub fn noise_step<R: Rng + ?Sized>(ys: &[f64], beta: f64, rng: &mut R) -> Vec<f64> {
    let scale = (1.0 - beta).sqrt();
    ys.iter()
        .map(|y| scale * y + beta * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// A noised copy of the target outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityLevel {
    /// 1-based level index.
    pub level: usize,
    pub points: Vec<Point>,
}

impl FidelityLevel {
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.y).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTask {
    pub task: Task,
    /// `levels[i]` holds level `i + 1`.
    pub levels: Vec<FidelityLevel>,
    pub schedule: NoiseSchedule,
}

/// Training-time augmentation: every level lives at the target inputs and
/// level `f + 1` is one noising step of level `f`.
pub fn augment_task<R: Rng + ?Sized>(
    task: &Task,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> AugmentedTask {
    let xs = task.target_xs();
    let mut ys = task.target_ys();
    let mut levels = Vec::with_capacity(schedule.levels());
    for level in 1..=schedule.levels() {
        ys = noise_step(&ys, schedule.beta(), rng);
        levels.push(FidelityLevel {
            level,
            points: xs
                .iter()
                .zip(&ys)
                .map(|(&x, &y)| Point::new(x, y))
                .collect(),
        });
    }
    AugmentedTask {
        task: task.clone(),
        levels,
        schedule: *schedule,
    }
}

/// The per-layer training view: context, the layer's targets and the noisier levels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTask {
    pub layer: usize,
    pub context: Vec<Point>,
    /// Levels `layer + 1 ..= F`, in increasing order.
    pub aux: Vec<FidelityLevel>,
    pub layer_targets: Vec<Point>,
}

pub fn mask_task(aug: &AugmentedTask, f: usize) -> Result<MaskedTask> {
    let n_levels = aug.levels.len();
    if f > n_levels {
        return Err(Error::invalid(format!(
            "layer {f} out of range 0..={n_levels}"
        )));
    }
    let layer_targets = if f == 0 {
        aug.task.targets.clone()
    } else {
        aug.levels[f - 1].points.clone()
    };
    if layer_targets.is_empty() {
        return Err(Error::invalid("masked layer has no targets"));
    }
    Ok(MaskedTask {
        layer: f,
        context: aug.task.context.clone(),
        aux: aug.levels[f..].to_vec(),
        layer_targets,
    })
}

/// Deployment-time auxiliary inputs: `F` independent sets of iid uniform inputs.
/// Entry `i` belongs to level `i + 1`.
pub fn sample_aux_inputs<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    n_per_level: usize,
    input_range: &InputRange,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if n_per_level == 0 {
        return Err(Error::invalid(
            "need at least one auxiliary input per level",
        ));
    }
    Ok((0..schedule.levels())
        .map(|_| input_range.sample_n(n_per_level, rng))
        .collect())
}
