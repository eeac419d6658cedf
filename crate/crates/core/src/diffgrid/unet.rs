//! 1D U-Net: an input convolution, `levels` stride-`stride` downsampling
//! blocks, `levels` transposed-convolution upsampling blocks with skip
//! connections, and a linear output convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{Array, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub channels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNetConfig {
    /// Six levels of 64 channels with stride 2 and width-5 kernels.
    pub fn standard(in_channels: usize, out_channels: usize) -> Self {
        UNetConfig {
            levels: 6,
            channels: 64,
            stride: 2,
            kernel: 5,
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels == 0 || self.in_channels == 0 || self.out_channels == 0
        {
            return Err(Error::invalid(
                "U-Net needs at least one level and nonzero channel counts",
            ));
        }
        if self.stride < 1 || self.kernel.is_multiple_of(2) || self.kernel < self.stride {
            return Err(Error::invalid(
                "U-Net kernel must be odd and at least the stride",
            ));
        }
        Ok(())
    }

    /// Grid lengths must be divisible by this.
    pub fn length_multiple(&self) -> usize {
        self.stride.pow(self.levels as u32)
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Adds fan-in scaled uniform weights and zero biases under `prefix`.
    ///
    /// Hidden convolutions draw from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`
    /// (ReLU gain); the linear output layer from `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`.
    pub fn register_params<R: Rng + ?Sized>(
        &self,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        let (c, k) = (self.channels, self.kernel);
        let relu_gain = 6.0;
        conv_params(
            store,
            &format!("{prefix}.in"),
            &[c, self.in_channels, k],
            self.in_channels * k,
            relu_gain,
            rng,
        )?;
        for i in 0..self.levels {
            conv_params(
                store,
                &format!("{prefix}.down{i}"),
                &[c, c, k],
                c * k,
                relu_gain,
                rng,
            )?;
        }
        for i in 0..self.levels {
            let cin = if i + 1 == self.levels { c } else { 2 * c };
            let fan_in = (cin * k).div_ceil(self.stride);
            conv_params(
                store,
                &format!("{prefix}.up{i}"),
                &[cin, c, k],
                fan_in,
                relu_gain,
                rng,
            )?;
        }
        conv_params(
            store,
            &format!("{prefix}.out"),
            &[self.out_channels, 2 * c, k],
            2 * c * k,
            3.0,
            rng,
        )?;
        Ok(())
    }
}

fn conv_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    let bound = (gain / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let w = (0..n)
        .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    store.insert(format!("{name}.w"), Array::new(shape.to_vec(), w)?)?;
    let bias_len = if name.contains(".up") {
        shape[1]
    } else {
        shape[0]
    };
    store.insert(format!("{name}.b"), Array::zeros(&[bias_len]))
}

/// Applies the U-Net to `x: [in_channels, N]`, returning `[out_channels, N]`.
pub fn unet_apply(tape: &mut Tape<'_>, cfg: &UNetConfig, prefix: &str, x: Var) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    let [cin, n] = shape[..] else {
        return Err(Error::invalid(format!(
            "U-Net input must be [channels, length], got {shape:?}"
        )));
    };
    if cin != cfg.in_channels {
        return Err(Error::invalid(format!(
            "U-Net expects {} input channels, got {cin}",
            cfg.in_channels
        )));
    }
    if n == 0 || n % cfg.length_multiple() != 0 {
        return Err(Error::invalid(format!(
            "grid length {n} is not divisible by {}",
            cfg.length_multiple()
        )));
    }
    let pad = cfg.pad();
    let p = |tape: &mut Tape<'_>, name: String| -> Result<(Var, Var)> {
        Ok((
            tape.param(&format!("{name}.w"))?,
            tape.param(&format!("{name}.b"))?,
        ))
    };

    let (w, b) = p(tape, format!("{prefix}.in"))?;
    let h = tape.conv1d(x, w, Some(b), 1, pad)?;
    let mut skips = vec![tape.relu(h)?];
    for i in 0..cfg.levels {
        let (w, b) = p(tape, format!("{prefix}.down{i}"))?;
        let last = *skips.last().expect("nonempty");
        let h = tape.conv1d(last, w, Some(b), cfg.stride, pad)?;
        skips.push(tape.relu(h)?);
    }
    let mut u = skips[cfg.levels];
    for i in (0..cfg.levels).rev() {
        let (w, b) = p(tape, format!("{prefix}.up{i}"))?;
        let out_len = tape.shape(skips[i])[1];
        let t = tape.conv_transpose1d(u, w, Some(b), cfg.stride, pad, out_len)?;
        let t = tape.relu(t)?;
        u = tape.concat_channels(t, skips[i])?;
    }
    let (w, b) = p(tape, format!("{prefix}.out"))?;
    tape.conv1d(u, w, Some(b), 1, pad)
}

/// Evaluates the U-Net on a raw `[in_channels, N]` buffer.
pub fn unet_forward(
    params: &ParamStore,
    cfg: &UNetConfig,
    prefix: &str,
    input: &[f64],
) -> Result<Vec<f64>> {
    if cfg.in_channels == 0 || !input.len().is_multiple_of(cfg.in_channels) {
        return Err(Error::invalid("input buffer does not match channel count"));
    }
    let n = input.len() / cfg.in_channels;
    let mut tape = Tape::new(params);
    let x = tape.constant(vec![cfg.in_channels, n], input.to_vec())?;
    let y = unet_apply(&mut tape, cfg, prefix, x)?;
    Ok(tape.value(y).to_vec())
}
