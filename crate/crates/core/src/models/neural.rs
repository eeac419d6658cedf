//! Convolutional neural processes over a uniform grid, with one context
//! channel per noise level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::predictive::{GaussianPredictive, HeadLayout};
use crate::augment::{FidelityLevel, MaskedTask, NoiseSchedule};
use crate::datagen::{InputRange, Point};
use crate::diffgrid::unet::unet_apply;
use crate::diffgrid::{Array, Grid, ParamStore, Tape, UNetConfig, Var};
use crate::error::{Error, Result};

/// Output head of the base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseHead {
    /// Mean-field Gaussian.
    ConvCnp,
    /// Low-rank plus diagonal Gaussian.
    ConvGnp,
}

impl BaseHead {
    pub fn name(self) -> &'static str {
        match self {
            BaseHead::ConvCnp => "convcnp",
            BaseHead::ConvGnp => "convgnp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "convcnp" => Some(BaseHead::ConvCnp),
            "convgnp" => Some(BaseHead::ConvGnp),
            _ => None,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
///
/// A model with `F` noise levels reads `F + 1` context channels (channel 0 is
/// the context set, channel `k` auxiliary level `k`) and owns one output head
/// per layer `0..=F`. Plain ConvCNP / ConvGNP models are the `F = 0` case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub schedule: NoiseSchedule,
    pub head: BaseHead,
    pub rank: usize,
    pub unet_levels: usize,
    pub unet_channels: usize,
    pub unet_kernel: usize,
    pub unet_stride: usize,
    pub input_range: InputRange,
    pub points_per_unit: f64,
    pub grid_margin: f64,
}

pub type DanpSpec = ModelSpec;

pub const SPEC_FORMAT: &str = "danp-model-spec 1";

impl ModelSpec {
    pub fn danp(schedule: NoiseSchedule, head: BaseHead) -> Self {
        ModelSpec {
            schedule,
            head,
            rank: 64,
            unet_levels: 6,
            unet_channels: 64,
            unet_kernel: 5,
            unet_stride: 2,
            input_range: InputRange::default(),
            points_per_unit: 64.0,
            grid_margin: 0.5,
        }
    }

    pub fn convcnp() -> Self {
        Self::danp(NoiseSchedule::none(), BaseHead::ConvCnp)
    }

    pub fn convgnp() -> Self {
        Self::danp(NoiseSchedule::none(), BaseHead::ConvGnp)
    }

    pub fn levels(&self) -> usize {
        self.schedule.levels()
    }

    pub fn head_layout(&self) -> HeadLayout {
        match self.head {
            BaseHead::ConvCnp => HeadLayout { rank: 0 },
            BaseHead::ConvGnp => HeadLayout { rank: self.rank },
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            levels: self.unet_levels,
            channels: self.unet_channels,
            stride: self.unet_stride,
            kernel: self.unet_kernel,
            in_channels: 2 * (self.levels() + 1),
            out_channels: self.unet_channels,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        let cfg = self.unet_config();
        cfg.validate()?;
        Grid::covering(
            &self.input_range,
            self.points_per_unit,
            self.grid_margin,
            cfg.length_multiple(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.head == BaseHead::ConvGnp && self.rank == 0 {
            return Err(Error::invalid("low-rank head needs rank >= 1"));
        }
        if !(self.points_per_unit > 0.0) || !(self.grid_margin >= 0.0) {
            return Err(Error::invalid(
                "grid density must be positive and margin non-negative",
            ));
        }
        self.grid().map(|_| ())
    }

    /// Canonical text form; its hash identifies the parameter layout.
    pub fn to_text(&self) -> String {
        let r = &self.input_range;
        format!(
            "{SPEC_FORMAT}\nlevels {}\nbeta {}\nsigma2 {}\nhead {}\nrank {}\nunet_levels {}\nunet_channels {}\nunet_kernel {}\nunet_stride {}\ninput_range {} {}\npoints_per_unit {}\ngrid_margin {}\n",
            self.levels(),
            self.schedule.beta(),
            self.schedule.sigma2(),
            self.head.name(),
            self.rank,
            self.unet_levels,
            self.unet_channels,
            self.unet_kernel,
            self.unet_stride,
            r.lo,
            r.hi,
            self.points_per_unit,
            self.grid_margin,
        )
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(SPEC_FORMAT) {
            return Err(format!("expected header `{SPEC_FORMAT}`"));
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| format!("malformed line `{line}`"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| format!("missing `{k}`"))
        };
        let num = |k: &str| -> std::result::Result<f64, String> {
            get(k)?.parse().map_err(|_| format!("bad number for `{k}`"))
        };
        let int = |k: &str| -> std::result::Result<usize, String> {
            get(k)?
                .parse()
                .map_err(|_| format!("bad integer for `{k}`"))
        };
        let levels = int("levels")?;
        let schedule = if levels == 0 {
            NoiseSchedule::none()
        } else {
            NoiseSchedule::validate_recorded(levels, num("beta")?, num("sigma2")?)
                .map_err(|e| e.to_string())?
        };
        let (lo, hi) = get("input_range")?
            .split_once(' ')
            .ok_or("bad input_range")?;
        let input_range = InputRange::new(
            lo.parse().map_err(|_| "bad input_range")?,
            hi.parse().map_err(|_| "bad input_range")?,
        )
        .map_err(|e| e.to_string())?;
        let spec = ModelSpec {
            schedule,
            head: BaseHead::parse(get("head")?).ok_or("unknown head")?,
            rank: int("rank")?,
            unet_levels: int("unet_levels")?,
            unet_channels: int("unet_channels")?,
            unet_kernel: int("unet_kernel")?,
            unet_stride: int("unet_stride")?,
            input_range,
            points_per_unit: num("points_per_unit")?,
            grid_margin: num("grid_margin")?,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

pub const ENCODER_LOG_LS: &str = "encoder.log_lengthscale";
pub const DECODER_LOG_LS: &str = "decoder.log_lengthscale";
const UNET_PREFIX: &str = "unet";

fn head_name(layer: usize) -> String {
    format!("head{layer}")
}

/// Fresh parameters for `spec`.
///
/// Set-convolution lengthscales start at two grid spacings. U-Net weights are
/// fan-in scaled uniform draws; head weights draw from
/// `U(-0.1 sqrt(3 / C), 0.1 sqrt(3 / C))` so initial predictions stay near
/// zero mean and unit-order variance. Biases start at zero.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ParamStore> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let log_ls = (2.0 / spec.points_per_unit).ln();
    let nch = spec.levels() + 1;
    store.insert(ENCODER_LOG_LS, Array::new(vec![nch], vec![log_ls; nch])?)?;
    store.insert(DECODER_LOG_LS, Array::new(vec![1], vec![log_ls])?)?;
    spec.unet_config()
        .register_params(UNET_PREFIX, &mut store, rng)?;
    let c = spec.unet_channels;
    let rows = spec.head_layout().rows();
    let bound = 0.1 * (3.0 / c as f64).sqrt();
    for layer in 0..=spec.levels() {
        let w = (0..rows * c)
            .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        store.insert(
            format!("{}.w", head_name(layer)),
            Array::new(vec![rows, c, 1], w)?,
        )?;
        store.insert(format!("{}.b", head_name(layer)), Array::zeros(&[rows]))?;
    }
    Ok(store)
}

/// A base model: spec plus parameters.
#[derive(Clone, Debug)]
pub struct NeuralProcess {
    spec: ModelSpec,
    grid: Grid,
    params: ParamStore,
}

impl NeuralProcess {
    pub fn new(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let grid = spec.grid()?;
        let expected = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        if !expected.same_layout(&params) {
            return Err(Error::invalid(
                "parameter store does not match the model spec",
            ));
        }
        Ok(NeuralProcess { spec, grid, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let params = init_params(&spec, rng)?;
        Self::new(spec, params)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Raw head outputs `[rows, Q]` for layer `layer` at `query_xs`.
    pub fn layer_outputs(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        context: &[Point],
        aux: &[FidelityLevel],
        query_xs: &[f64],
    ) -> Result<Var> {
        let levels = self.spec.levels();
        if layer > levels {
            return Err(Error::invalid(format!(
                "layer {layer} out of range 0..={levels}"
            )));
        }
        if let Some(x) = query_xs.iter().find(|&&x| !self.grid.covers(x)) {
            return Err(Error::invalid(format!(
                "query input {x} lies outside the grid [{}, {}]",
                self.grid.start,
                self.grid.end()
            )));
        }
        let mut channels: Vec<&[Point]> = vec![&[]; levels + 1];
        channels[0] = context;
        for level in aux {
            if level.level <= layer || level.level > levels {
                return Err(Error::invalid(format!(
                    "auxiliary level {} cannot inform layer {layer} of a {levels}-level model",
                    level.level
                )));
            }
            if !channels[level.level].is_empty() {
                return Err(Error::invalid(format!(
                    "auxiliary level {} given twice",
                    level.level
                )));
            }
            channels[level.level] = &level.points;
        }
        let enc_ls = tape.param(ENCODER_LOG_LS)?;
        let feats = tape.setconv_encode(&channels, &self.grid, enc_ls)?;
        let hidden = unet_apply(tape, &self.spec.unet_config(), UNET_PREFIX, feats)?;
        let dec_ls = tape.param(DECODER_LOG_LS)?;
        let at_query = tape.setconv_decode(hidden, &self.grid, query_xs, dec_ls)?;
        let w = tape.param(&format!("{}.w", head_name(layer)))?;
        let b = tape.param(&format!("{}.b", head_name(layer)))?;
        tape.conv1d(at_query, w, Some(b), 1, 0)
    }

    pub fn predict(
        &self,
        layer: usize,
        context: &[Point],
        aux: &[FidelityLevel],
        query_xs: &[f64],
    ) -> Result<GaussianPredictive> {
        let mut tape = Tape::new(&self.params);
        let out = self.layer_outputs(&mut tape, layer, context, aux, query_xs)?;
        self.spec
            .head_layout()
            .predictive(tape.value(out), query_xs.len())
    }

    /// Per-target negative log-likelihood of a masked task's layer targets.
    pub fn masked_nll(&self, tape: &mut Tape<'_>, masked: &MaskedTask) -> Result<Var> {
        let xs: Vec<f64> = masked.layer_targets.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = masked.layer_targets.iter().map(|p| p.y).collect();
        let out = self.layer_outputs(tape, masked.layer, &masked.context, &masked.aux, &xs)?;
        let (nll, mut grad) = self.spec.head_layout().nll_and_grad(tape.value(out), &ys)?;
        let n = ys.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        tape.custom_scalar(out, nll / n, grad)
    }

    /// Same model with different parameters of the same layout.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::invalid(
                "parameter store does not match the model spec",
            ));
        }
        Ok(NeuralProcess {
            spec: self.spec,
            grid: self.grid,
            params,
        })
    }
}
