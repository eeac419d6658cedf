//! Experiment configuration: a flat TOML file of `key = value` pairs.
//!
//! Every key is optional. Unknown keys are rejected. For noised models give
//! `beta` or `sigma2` (or both, if consistent); without either the
//! generator's preset schedule applies.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::augment::{solve_beta, NoiseSchedule};
use crate::datagen::{GeneratorKind, GeneratorSpec, InputRange, MetaDatasetLayout};
use crate::error::{Error, Result};
use crate::eval::SPolicy;
use crate::models::{BaseHead, DeployConfig, ModelSpec};
use crate::train::TrainConfig;

/// Allowed gap between a given `beta` and the one implied by `sigma2`.
pub const BETA_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Danp,
    ConvCnp,
    ConvGnp,
    ArConvCnp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Danp => "danp",
            ModelKind::ConvCnp => "convcnp",
            ModelKind::ConvGnp => "convgnp",
            ModelKind::ArConvCnp => "ar-convcnp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ModelKind::Danp,
            ModelKind::ConvCnp,
            ModelKind::ConvGnp,
            ModelKind::ArConvCnp,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// Preset `(levels, beta)` per generator.
pub fn preset_schedule(kind: GeneratorKind) -> (usize, f64) {
    match kind {
        GeneratorKind::Sawtooth => (3, 0.08526),
        GeneratorKind::Square => (3, 0.153),
        GeneratorKind::Gp => (2, 0.2115),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    generator: Option<String>,
    input_min: Option<f64>,
    input_max: Option<f64>,
    gp_lengthscale: Option<f64>,

    model: Option<String>,
    base: Option<String>,
    levels: Option<usize>,
    beta: Option<f64>,
    sigma2: Option<f64>,
    rank: Option<usize>,
    unet_levels: Option<usize>,
    unet_channels: Option<usize>,
    kernel_size: Option<usize>,
    stride: Option<usize>,
    points_per_unit: Option<f64>,
    grid_margin: Option<f64>,

    epochs: Option<usize>,
    tasks_per_epoch: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    clip_norm: Option<f64>,
    validate_every: Option<usize>,
    validation_tasks: Option<usize>,
    train_min_context: Option<usize>,
    train_max_context: Option<usize>,
    num_targets: Option<usize>,

    tasks_per_size: Option<usize>,
    eval_max_context: Option<usize>,
    s_threshold: Option<usize>,
    s_small: Option<usize>,
    s_large: Option<usize>,
    aux_points_per_level: Option<usize>,
    joint_aux_sampling: Option<bool>,
    ar_orders: Option<usize>,

    seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub layout: MetaDatasetLayout,
    pub policy: SPolicy,
    pub deploy: DeployConfig,
    pub ar_orders: usize,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ModelKind,
    pub generator: GeneratorSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

fn line_of(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}

fn line_at_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Parses and resolves config text; an empty string yields all defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
        line: e.span().map_or(0, |s| line_at_offset(text, s.start)),
        message: e.message().to_string(),
    })?;
    resolve(&raw, text)
}

fn resolve(raw: &RawConfig, text: &str) -> Result<ExperimentConfig> {
    let err = |key: &str, message: String| Error::Config {
        line: line_of(text, key),
        message,
    };
    let check = |key: &str, r: Result<()>| r.map_err(|e| err(key, e.to_string()));

    let seed = raw.seed.unwrap_or(0);
    let gen_kind = match &raw.generator {
        None => GeneratorKind::Sawtooth,
        Some(s) => GeneratorKind::parse(s)
            .ok_or_else(|| err("generator", format!("unknown generator `{s}`")))?,
    };
    let range = InputRange::new(raw.input_min.unwrap_or(-2.0), raw.input_max.unwrap_or(2.0))
        .map_err(|e| err("input_min", e.to_string()))?;
    let generator = GeneratorSpec::new(gen_kind, range, raw.gp_lengthscale.unwrap_or(0.25), seed)
        .map_err(|e| err("gp_lengthscale", e.to_string()))?;

    let kind = match &raw.model {
        None => ModelKind::Danp,
        Some(s) => {
            ModelKind::parse(s).ok_or_else(|| err("model", format!("unknown model `{s}`")))?
        }
    };
    let head = match (kind, &raw.base) {
        (ModelKind::Danp, None) | (ModelKind::ConvGnp, None) => BaseHead::ConvGnp,
        (ModelKind::ConvCnp, None) | (ModelKind::ArConvCnp, None) => BaseHead::ConvCnp,
        (ModelKind::Danp, Some(s)) => {
            BaseHead::parse(s).ok_or_else(|| err("base", format!("unknown base model `{s}`")))?
        }
        (_, Some(_)) => {
            return Err(err(
                "base",
                "`base` applies only to model = \"danp\"".into(),
            ))
        }
    };
    let schedule = if kind == ModelKind::Danp {
        resolve_schedule(raw, gen_kind).map_err(|(key, msg)| err(key, msg))?
    } else {
        if raw.levels.is_some_and(|l| l > 0) || raw.beta.is_some() || raw.sigma2.is_some() {
            let key = if raw.levels.is_some() {
                "levels"
            } else if raw.beta.is_some() {
                "beta"
            } else {
                "sigma2"
            };
            return Err(err(
                key,
                format!("model `{}` has no noise levels", kind.name()),
            ));
        }
        NoiseSchedule::none()
    };

    let defaults = ModelSpec::danp(schedule, head);
    let model = ModelSpec {
        rank: raw.rank.unwrap_or(defaults.rank),
        unet_levels: raw.unet_levels.unwrap_or(defaults.unet_levels),
        unet_channels: raw.unet_channels.unwrap_or(defaults.unet_channels),
        unet_kernel: raw.kernel_size.unwrap_or(defaults.unet_kernel),
        unet_stride: raw.stride.unwrap_or(defaults.unet_stride),
        input_range: range,
        points_per_unit: raw.points_per_unit.unwrap_or(defaults.points_per_unit),
        grid_margin: raw.grid_margin.unwrap_or(defaults.grid_margin),
        ..defaults
    };
    check("unet_levels", model.validate())?;

    let mut train = TrainConfig::desk_scale(generator.clone(), seed);
    train.epochs = raw.epochs.unwrap_or(train.epochs);
    train.tasks_per_epoch = raw.tasks_per_epoch.unwrap_or(train.tasks_per_epoch);
    train.batch_size = raw.batch_size.unwrap_or(train.batch_size);
    train.learning_rate = raw.learning_rate.unwrap_or(train.learning_rate);
    train.clip_norm = raw.clip_norm.unwrap_or(train.clip_norm);
    train.validate_every = raw.validate_every.unwrap_or(train.validate_every);
    train.validation_tasks = raw.validation_tasks.unwrap_or(train.validation_tasks);
    train.num_targets = raw.num_targets.unwrap_or(train.num_targets);
    let default_max = if kind == ModelKind::ArConvCnp { 80 } else { 30 };
    train.context_range = (
        raw.train_min_context.unwrap_or(0),
        raw.train_max_context.unwrap_or(default_max),
    );
    let key = if raw.batch_size == Some(0) {
        "batch_size"
    } else if raw.learning_rate.is_some() {
        "learning_rate"
    } else {
        "train_max_context"
    };
    check(key, train.validate())?;
    if train.validation_tasks == 0 {
        return Err(err(
            "validation_tasks",
            "validation_tasks must be at least 1".into(),
        ));
    }

    let layout = MetaDatasetLayout {
        max_context: raw.eval_max_context.unwrap_or(30),
        tasks_per_size: raw.tasks_per_size.unwrap_or(10),
        num_targets: raw.num_targets.unwrap_or(50),
    };
    if layout.tasks_per_size == 0 {
        return Err(err(
            "tasks_per_size",
            "tasks_per_size must be at least 1".into(),
        ));
    }
    let policy = SPolicy::two_tier(
        raw.s_threshold
            .unwrap_or(SPolicy::default_threshold(gen_kind)),
        raw.s_small.unwrap_or(256),
        raw.s_large.unwrap_or(32),
        layout.max_context,
    )
    .map_err(|e| {
        err(
            if raw.s_small == Some(0) {
                "s_small"
            } else {
                "s_large"
            },
            e.to_string(),
        )
    })?;
    let deploy = DeployConfig {
        aux_points_per_level: raw.aux_points_per_level.unwrap_or(50),
        aux_range: range,
        joint_aux_sampling: raw.joint_aux_sampling.unwrap_or(true),
    };
    if deploy.aux_points_per_level == 0 {
        return Err(err(
            "aux_points_per_level",
            "aux_points_per_level must be at least 1".into(),
        ));
    }
    let ar_orders = raw.ar_orders.unwrap_or(1);
    if ar_orders == 0 {
        return Err(err("ar_orders", "ar_orders must be at least 1".into()));
    }
    Ok(ExperimentConfig {
        kind,
        generator,
        model,
        train,
        eval: EvalConfig {
            layout,
            policy,
            deploy,
            ar_orders,
        },
        seed,
    })
}

fn resolve_schedule(
    raw: &RawConfig,
    gen: GeneratorKind,
) -> std::result::Result<NoiseSchedule, (&'static str, String)> {
    let (preset_levels, preset_beta) = preset_schedule(gen);
    let levels = raw.levels.unwrap_or(preset_levels);
    if levels == 0 {
        return Err(("levels", "a noised model needs at least one level".into()));
    }
    let msg = |e: Error| e.to_string();
    match (raw.beta, raw.sigma2) {
        (None, None) if levels == preset_levels => {
            NoiseSchedule::from_beta(levels, preset_beta).map_err(|e| ("levels", msg(e)))
        }
        (None, None) => Err((
            "levels",
            "give `beta` or `sigma2` for a non-preset level count".into(),
        )),
        (Some(b), None) => NoiseSchedule::from_beta(levels, b).map_err(|e| ("beta", msg(e))),
        (None, Some(s)) => NoiseSchedule::from_sigma2(levels, s).map_err(|e| ("sigma2", msg(e))),
        (Some(b), Some(s)) => {
            let implied = solve_beta(levels, s).map_err(|e| ("sigma2", msg(e)))?;
            if (implied - b).abs() > BETA_TOLERANCE {
                return Err((
                    "beta",
                    format!("beta = {b} is inconsistent with sigma2 = {s} over {levels} levels (implies beta = {implied})"),
                ));
            }
            NoiseSchedule::from_beta(levels, b).map_err(|e| ("beta", msg(e)))
        }
    }
}

impl ExperimentConfig {
    /// The resolved config as loadable TOML.
    pub fn to_toml(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("generator", format!("\"{}\"", self.generator.kind.name()));
        kv("input_min", fmt_f(self.generator.input_range.lo));
        kv("input_max", fmt_f(self.generator.input_range.hi));
        kv("gp_lengthscale", fmt_f(self.generator.gp_lengthscale));
        kv("model", format!("\"{}\"", self.kind.name()));
        if self.kind == ModelKind::Danp {
            kv("base", format!("\"{}\"", m.head.name()));
            kv("levels", m.levels().to_string());
            kv("beta", fmt_f(m.schedule.beta()));
        }
        kv("rank", m.rank.to_string());
        kv("unet_levels", m.unet_levels.to_string());
        kv("unet_channels", m.unet_channels.to_string());
        kv("kernel_size", m.unet_kernel.to_string());
        kv("stride", m.unet_stride.to_string());
        kv("points_per_unit", fmt_f(m.points_per_unit));
        kv("grid_margin", fmt_f(m.grid_margin));
        kv("epochs", t.epochs.to_string());
        kv("tasks_per_epoch", t.tasks_per_epoch.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", fmt_f(t.learning_rate));
        kv("clip_norm", fmt_f(t.clip_norm));
        kv("validate_every", t.validate_every.to_string());
        kv("validation_tasks", t.validation_tasks.to_string());
        kv("train_min_context", t.context_range.0.to_string());
        kv("train_max_context", t.context_range.1.to_string());
        kv("num_targets", t.num_targets.to_string());
        kv("tasks_per_size", e.layout.tasks_per_size.to_string());
        kv("eval_max_context", e.layout.max_context.to_string());
        let rules = e.policy.rules();
        kv("s_threshold", rules[0].1.to_string());
        kv("s_small", rules[0].2.to_string());
        kv(
            "s_large",
            rules.last().map_or(rules[0].2, |r| r.2).to_string(),
        );
        kv(
            "aux_points_per_level",
            e.deploy.aux_points_per_level.to_string(),
        );
        kv(
            "joint_aux_sampling",
            e.deploy.joint_aux_sampling.to_string(),
        );
        kv("ar_orders", e.ar_orders.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// Replaces the master seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.rng_seed = seed;
        self.train.seed = seed;
        self.train.generator.rng_seed = seed;
        self
    }
}

/// Floats always carry a decimal point or exponent so TOML reads them back as floats.
fn fmt_f(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}
