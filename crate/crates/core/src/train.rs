//! Maximum-likelihood training with one randomly chosen layer per batch.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment_task, mask_task, AugmentedTask};
use crate::datagen::{sample_task, GeneratorSpec};
use crate::diffgrid::{value_and_grad, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, NeuralProcess};

pub use crate::models::init_params;

/// RNG streams derived from the run seed.
const STREAM_TRAIN: u64 = 0;
const STREAM_VALIDATION: u64 = 1;
const STREAM_INIT: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Gradients are rescaled to at most this global norm.
    pub clip_norm: f64,
    pub generator: GeneratorSpec,
    /// Inclusive context-size range for training tasks.
    pub context_range: (usize, usize),
    pub num_targets: usize,
    pub validation_tasks: usize,
    /// Validate after every this many epochs.
    pub validate_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Twenty epochs of 512 tasks.
    pub fn desk_scale(generator: GeneratorSpec, seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            tasks_per_epoch: 512,
            batch_size: 16,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            generator,
            context_range: (0, 30),
            num_targets: 50,
            validation_tasks: 64,
            validate_every: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.num_targets == 0 || self.context_range.0 > self.context_range.1 {
            return Err(Error::invalid("need targets and a non-empty context range"));
        }
        if self.validate_every == 0 {
            return Err(Error::invalid("validate_every must be at least 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.tasks_per_epoch / self.batch_size).max(1)
    }
}

/// Adam moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: NeuralProcess,
    pub adam: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: NeuralProcess, rng: ChaCha8Rng) -> Self {
        let zeros = model.params().zeros_like();
        TrainState {
            model,
            adam: AdamState {
                m: zeros.clone(),
                v: zeros,
            },
            step: 0,
            rng,
        }
    }

    /// Fresh model and optimizer state for the run seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(STREAM_INIT);
        let model = NeuralProcess::init(spec, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_TRAIN);
        Ok(Self::new(model, rng))
    }

    pub fn params(&self) -> &ParamStore {
        self.model.params()
    }
}

/// One training task and the seed that produced it.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub task_seed: u64,
    pub task: AugmentedTask,
}

/// Samples and augments one task from its own seeded stream.
pub fn make_item(spec: &ModelSpec, cfg: &TrainConfig, task_seed: u64) -> Result<BatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let task = sample_task(
        &cfg.generator,
        &mut rng,
        cfg.context_range.0..=cfg.context_range.1,
        cfg.num_targets,
    )?;
    Ok(BatchItem {
        task_seed,
        task: augment_task(&task, &spec.schedule, &mut rng),
    })
}

pub fn sample_batch(state: &mut TrainState, cfg: &TrainConfig) -> Result<Vec<BatchItem>> {
    let seeds: Vec<u64> = (0..cfg.batch_size).map(|_| state.rng.random()).collect();
    let spec = *state.model.spec();
    seeds
        .par_iter()
        .map(|&s| make_item(&spec, cfg, s))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerChoice {
    /// Uniform over `0..=F`, drawn from the training stream.
    Random,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub layer: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub update_norm: f64,
    /// Layer each task was masked to.
    pub masked_layers: Vec<usize>,
}

/// Mean per-target negative log-likelihood of `batch` masked to `layer`, and
/// its gradient.
pub fn batch_loss_and_grad(
    model: &NeuralProcess,
    batch: &[BatchItem],
    layer: usize,
) -> Result<(f64, ParamStore)> {
    let per_task = batch
        .par_iter()
        .map(|item| {
            let masked = mask_task(&item.task, layer)?;
            let (loss, grad) = value_and_grad(model.params(), |tape: &mut Tape<'_>| {
                model.masked_nll(tape, &masked)
            })
            .map_err(|e| diagnose(e, layer, item.task_seed))?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(diagnose(
                    Error::numerical("non-finite loss"),
                    layer,
                    item.task_seed,
                ));
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.params().zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_task {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

fn diagnose(err: Error, layer: usize, task_seed: u64) -> Error {
    match err {
        Error::Numerical(msg) => {
            Error::Numerical(format!("{msg} (layer {layer}, task seed {task_seed})"))
        }
        other => other,
    }
}

/// One Adam update on the batch, masked to a single layer.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[BatchItem],
    choice: LayerChoice,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let levels = state.model.spec().levels();
    let layer = match choice {
        LayerChoice::Random => state.rng.random_range(0..=levels),
        LayerChoice::Fixed(f) if f <= levels => f,
        LayerChoice::Fixed(f) => {
            return Err(Error::invalid(format!(
                "layer {f} out of range 0..={levels}"
            )))
        }
    };
    if let Some(item) = batch
        .iter()
        .find(|i| i.task.schedule != state.model.spec().schedule)
    {
        return Err(Error::invalid(format!(
            "task seed {} was augmented with a different schedule",
            item.task_seed
        )));
    }
    let (loss, mut grad) = batch_loss_and_grad(&state.model, batch, layer)?;
    let grad_norm = grad.global_norm();
    if grad_norm > cfg.clip_norm {
        grad.scale(cfg.clip_norm / grad_norm);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut update_sq = 0.0;
    let mut params = state.model.params().clone();
    for i in 0..params.len() {
        let g = &grad.by_index(i).data;
        let m = &mut state.adam.m.by_index_mut(i).data;
        let v = &mut state.adam.v.by_index_mut(i).data;
        let p = &mut params.by_index_mut(i).data;
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let delta = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            p[j] -= delta;
            update_sq += delta * delta;
        }
    }
    state.model = state.model.with_params(params)?;
    Ok(StepReport {
        step: state.step,
        layer,
        loss,
        grad_norm,
        update_norm: update_sq.sqrt(),
        masked_layers: vec![layer; batch.len()],
    })
}

/// Held-out tasks drawn from the validation stream of the run seed.
pub fn validation_set(spec: &ModelSpec, cfg: &TrainConfig) -> Result<Vec<BatchItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_VALIDATION);
    let seeds: Vec<u64> = (0..cfg.validation_tasks).map(|_| rng.random()).collect();
    seeds.par_iter().map(|&s| make_item(spec, cfg, s)).collect()
}

/// Per-target negative log-likelihood averaged over tasks and layers.
pub fn validation_nll(model: &NeuralProcess, tasks: &[BatchItem]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let levels = model.spec().levels();
    let per_task = tasks
        .par_iter()
        .map(|item| {
            let mut sum = 0.0;
            for layer in 0..=levels {
                let masked = mask_task(&item.task, layer)?;
                let mut tape = Tape::new(model.params());
                let v = model.masked_nll(&mut tape, &masked)?;
                sum += tape.scalar(v);
            }
            Ok(sum / (levels + 1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_task.iter().sum::<f64>() / tasks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRecord {
    pub step: u64,
    pub nll: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_state: TrainState,
    /// Parameters with the lowest validation NLL seen, and when.
    pub best_params: ParamStore,
    pub best: ValidationRecord,
    pub log: Vec<ValidationRecord>,
    /// Set when the stop flag ended the run early.
    pub interrupted: bool,
}

/// Runs `epochs * steps_per_epoch` steps on freshly sampled tasks, validating
/// at step 0 and every `validate_every` epochs.
pub fn train_run(
    spec: ModelSpec,
    cfg: &TrainConfig,
    stop: Option<&AtomicBool>,
    mut on_validation: impl FnMut(&ValidationRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = TrainState::init(spec, cfg.seed)?;
    let val = validation_set(&spec, cfg)?;
    let mut log = Vec::new();
    let mut record =
        |state: &TrainState, log: &mut Vec<ValidationRecord>| -> Result<ValidationRecord> {
            let r = ValidationRecord {
                step: state.step,
                nll: validation_nll(&state.model, &val)?,
            };
            on_validation(&r);
            log.push(r);
            Ok(r)
        };
    let mut best = record(&state, &mut log)?;
    let mut best_params = state.params().clone();
    let mut interrupted = false;
    'epochs: for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch() {
            if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                interrupted = true;
                break 'epochs;
            }
            let batch = sample_batch(&mut state, cfg)?;
            train_step(&mut state, cfg, &batch, LayerChoice::Random)?;
        }
        if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs {
            let r = record(&state, &mut log)?;
            if r.nll < best.nll {
                best = r;
                best_params = state.params().clone();
            }
        }
    }
    Ok(TrainOutcome {
        final_state: state,
        best_params,
        best,
        log,
        interrupted,
    })
}

/// One line per validation event: `step nll`.
pub fn format_log(log: &[ValidationRecord]) -> String {
    log.iter()
        .map(|r| format!("{} {}\n", r.step, r.nll))
        .collect()
}
