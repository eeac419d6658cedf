//! Deployment: autoregressive auxiliary sampling, Monte-Carlo joint
//! likelihoods and the autoregressive baseline.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::neural::NeuralProcess;
use super::predictive::{mixture_moments, GaussianPredictive};
use crate::augment::{sample_aux_inputs, FidelityLevel, MaskedTask, NoiseSchedule};
use crate::datagen::{InputRange, Point, Task};
use crate::error::{Error, Result};
use crate::linalg::log_mean_exp;

/// A per-layer conditional predictive: layer `layer` at `query_xs` given
/// the context set and auxiliary levels above `layer`.
pub trait LayerModel: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn levels(&self) -> usize {
        self.schedule().levels()
    }

    fn predict_layer(
        &self,
        layer: usize,
        context: &[Point],
        aux: &[FidelityLevel],
        query_xs: &[f64],
    ) -> Result<GaussianPredictive>;
}

impl LayerModel for NeuralProcess {
    fn schedule(&self) -> &NoiseSchedule {
        &self.spec().schedule
    }

    fn predict_layer(
        &self,
        layer: usize,
        context: &[Point],
        aux: &[FidelityLevel],
        query_xs: &[f64],
    ) -> Result<GaussianPredictive> {
        self.predict(layer, context, aux, query_xs)
    }
}

/// Counts base-model applications within one run.
#[derive(Debug, Default)]
pub struct ForwardCounter(AtomicU64);

impl ForwardCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn counted<M: LayerModel + ?Sized>(
    model: &M,
    counter: &ForwardCounter,
    layer: usize,
    context: &[Point],
    aux: &[FidelityLevel],
    query_xs: &[f64],
) -> Result<GaussianPredictive> {
    counter.add(1);
    model.predict_layer(layer, context, aux, query_xs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeployConfig {
    pub aux_points_per_level: usize,
    pub aux_range: InputRange,
    /// Draw auxiliary levels jointly; otherwise from per-point marginals.
    pub joint_aux_sampling: bool,
}

impl Default for DeployConfig {
    fn default() -> Self {
        DeployConfig {
            aux_points_per_level: 50,
            aux_range: InputRange::default(),
            joint_aux_sampling: true,
        }
    }
}

pub fn convcnp_predict(
    model: &NeuralProcess,
    context: &[Point],
    query_xs: &[f64],
) -> Result<GaussianPredictive> {
    model.predict(0, context, &[], query_xs)
}

pub fn convgnp_predict(
    model: &NeuralProcess,
    context: &[Point],
    query_xs: &[f64],
) -> Result<GaussianPredictive> {
    model.predict(0, context, &[], query_xs)
}

pub fn danp_layer_predict<M: LayerModel + ?Sized>(
    model: &M,
    masked: &MaskedTask,
) -> Result<GaussianPredictive> {
    let xs: Vec<f64> = masked.layer_targets.iter().map(|p| p.x).collect();
    model.predict_layer(masked.layer, &masked.context, &masked.aux, &xs)
}

/// Samples levels `F` down to `1`, each conditioned on the context and all
/// noisier levels drawn so far. `aux_inputs[i]` holds the inputs of level `i + 1`.
pub fn danp_sample_aux<M: LayerModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[Point],
    aux_inputs: &[Vec<f64>],
    joint: bool,
    rng: &mut R,
    counter: &ForwardCounter,
) -> Result<Vec<FidelityLevel>> {
    let levels = model.levels();
    if aux_inputs.len() != levels {
        return Err(Error::invalid(format!(
            "{} auxiliary input sets for a {levels}-level model",
            aux_inputs.len()
        )));
    }
    let mut aux: Vec<FidelityLevel> = Vec::with_capacity(levels);
    for level in (1..=levels).rev() {
        let xs = &aux_inputs[level - 1];
        let pred = counted(model, counter, level, context, &aux, xs)?;
        let ys = if joint {
            pred.sample(rng)?
        } else {
            pred.sample_marginals(rng)
        };
        let points = xs.iter().zip(ys).map(|(&x, y)| Point::new(x, y)).collect();
        aux.insert(0, FidelityLevel { level, points });
    }
    Ok(aux)
}

/// One auxiliary draw per seed. Each draw uses its own seeded stream, so the
/// result does not depend on scheduling or on the target set.
pub fn danp_aux_draws<M: LayerModel + ?Sized>(
    model: &M,
    context: &[Point],
    seeds: &[u64],
    cfg: &DeployConfig,
    counter: &ForwardCounter,
) -> Result<Vec<Vec<FidelityLevel>>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if model.levels() == 0 {
                return Ok(Vec::new());
            }
            let inputs = sample_aux_inputs(
                model.schedule(),
                cfg.aux_points_per_level,
                &cfg.aux_range,
                &mut rng,
            )?;
            danp_sample_aux(
                model,
                context,
                &inputs,
                cfg.joint_aux_sampling,
                &mut rng,
                counter,
            )
        })
        .collect()
}

pub fn draw_seeds<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

/// Layer-0 joint log density of the targets under each auxiliary draw.
pub fn danp_component_logliks<M: LayerModel + ?Sized>(
    model: &M,
    task: &Task,
    draws: &[Vec<FidelityLevel>],
    counter: &ForwardCounter,
) -> Result<Vec<f64>> {
    let xs = task.target_xs();
    let ys = task.target_ys();
    draws
        .par_iter()
        .map(|aux| counted(model, counter, 0, &task.context, aux, &xs)?.log_density(&ys))
        .collect()
}

/// Monte-Carlo joint log-likelihood with `samples` auxiliary draws, combined
/// by log-mean-exp. Uses exactly `samples * (F + 1)` forward passes.
pub fn danp_joint_loglik<M: LayerModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    task: &Task,
    samples: usize,
    cfg: &DeployConfig,
    rng: &mut R,
    counter: &ForwardCounter,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::invalid("need at least one auxiliary sample"));
    }
    let seeds = draw_seeds(samples, rng);
    let draws = danp_aux_draws(model, &task.context, &seeds, cfg, counter)?;
    Ok(log_mean_exp(&danp_component_logliks(
        model, task, &draws, counter,
    )?))
}

/// Per-query mean and variance of the layer-0 mixture predictive.
pub fn danp_marginals<M: LayerModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[Point],
    samples: usize,
    query_xs: &[f64],
    cfg: &DeployConfig,
    rng: &mut R,
    counter: &ForwardCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    danp_layer_marginals(model, context, 0, samples, query_xs, cfg, rng, counter)
}

/// Mixture moments of layer `layer` after sampling the levels above it.
#[allow(clippy::too_many_arguments)]
pub fn danp_layer_marginals<M: LayerModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[Point],
    layer: usize,
    samples: usize,
    query_xs: &[f64],
    cfg: &DeployConfig,
    rng: &mut R,
    counter: &ForwardCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples == 0 {
        return Err(Error::invalid("need at least one auxiliary sample"));
    }
    let seeds = draw_seeds(samples, rng);
    let draws = danp_aux_draws(model, context, &seeds, cfg, counter)?;
    let comps = draws
        .par_iter()
        .map(|aux| {
            let above: Vec<FidelityLevel> =
                aux.iter().filter(|l| l.level > layer).cloned().collect();
            let p = counted(model, counter, layer, context, &above, query_xs)?;
            Ok((p.mean.clone(), p.marginal_variances()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mixture_moments(comps))
}

/// Chain-rule joint log-likelihood of the targets, visiting them in the
/// order given by each seed and conditioning on the true values seen so far.
/// Orders are combined by log-mean-exp.
pub fn ar_convcnp_loglik_with_orders<M: LayerModel + ?Sized>(
    model: &M,
    task: &Task,
    order_seeds: &[u64],
    counter: &ForwardCounter,
) -> Result<f64> {
    if order_seeds.is_empty() {
        return Err(Error::invalid("need at least one target order"));
    }
    let per_order = order_seeds
        .iter()
        .map(|&seed| {
            let mut order: Vec<usize> = (0..task.targets.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut context = task.context.clone();
            let mut total = 0.0;
            for i in order {
                let t = task.targets[i];
                total += counted(model, counter, 0, &context, &[], &[t.x])?.log_density(&[t.y])?;
                context.push(t);
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_mean_exp(&per_order))
}

pub fn ar_convcnp_loglik<M: LayerModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    task: &Task,
    n_orders: usize,
    rng: &mut R,
    counter: &ForwardCounter,
) -> Result<f64> {
    let seeds = draw_seeds(n_orders, rng);
    ar_convcnp_loglik_with_orders(model, task, &seeds, counter)
}
