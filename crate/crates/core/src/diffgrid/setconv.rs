//! Set convolutions between off-grid point sets and a uniform grid.

use crate::datagen::{InputRange, Point};
use crate::error::{Error, Result};

use super::conv::gemm;

/// Added to the density before normalising the value channel, so the value
/// channel decays smoothly to zero where no data are nearby.
pub const DENSITY_EPS: f64 = 1e-8;

/// A uniform 1D grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub start: f64,
    pub spacing: f64,
    pub len: usize,
}

impl Grid {
    pub fn uniform(start: f64, spacing: f64, len: usize) -> Result<Self> {
        if !(spacing > 0.0) || len == 0 {
            return Err(Error::invalid(
                "grid needs positive spacing and at least one node",
            ));
        }
        Ok(Grid {
            start,
            spacing,
            len,
        })
    }

    /// `points_per_unit` nodes per unit input over `range` widened by
    /// `margin` on both sides, node count rounded up to a multiple of
    /// `multiple` and centred on the range.
    pub fn covering(
        range: &InputRange,
        points_per_unit: f64,
        margin: f64,
        multiple: usize,
    ) -> Result<Self> {
        if !(points_per_unit > 0.0) || margin < 0.0 || multiple == 0 {
            return Err(Error::invalid("bad grid discretisation"));
        }
        let width = range.width() + 2.0 * margin;
        let raw = (width * points_per_unit).ceil() as usize;
        let len = raw.div_ceil(multiple).max(1) * multiple;
        let spacing = 1.0 / points_per_unit;
        let centre = 0.5 * (range.lo + range.hi);
        Grid::uniform(centre - 0.5 * (len - 1) as f64 * spacing, spacing, len)
    }

    pub fn x(&self, i: usize) -> f64 {
        self.start + i as f64 * self.spacing
    }

    pub fn end(&self) -> f64 {
        self.x(self.len - 1)
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.x(i)).collect()
    }

    pub fn covers(&self, x: f64) -> bool {
        x >= self.start && x <= self.end()
    }

    pub fn shifted(&self, delta: f64) -> Self {
        Grid {
            start: self.start + delta,
            ..*self
        }
    }
}

fn rbf(d: f64, lengthscale: f64) -> f64 {
    (-0.5 * (d / lengthscale).powi(2)).exp()
}

/// Encoder output plus derivatives of every feature with respect to its
/// channel's log-lengthscale.
pub(crate) struct Encoded {
    pub features: Vec<f64>,
    pub d_log_ls: Vec<f64>,
}

pub(crate) fn encode(channels: &[&[Point]], grid: &Grid, lengthscales: &[f64]) -> Result<Encoded> {
    if channels.len() != lengthscales.len() {
        return Err(Error::invalid(format!(
            "{} point channels but {} lengthscales",
            channels.len(),
            lengthscales.len()
        )));
    }
    if lengthscales.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("encoder lengthscales must be positive"));
    }
    let g = grid.len;
    let mut features = vec![0.0; 2 * channels.len() * g];
    let mut d_log_ls = vec![0.0; 2 * channels.len() * g];
    let xs = grid.xs();
    for (c, (points, &ls)) in channels.iter().zip(lengthscales).enumerate() {
        if points.is_empty() {
            continue;
        }
        // Canonical order makes the sums exactly invariant to input order.
        let mut points = points.to_vec();
        points.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        let inv_l2 = 1.0 / (ls * ls);
        for (i, &xg) in xs.iter().enumerate() {
            // density, weighted sum and their derivatives in log-lengthscale
            let (mut dens, mut sum, mut d_dens, mut d_sum) = (0.0, 0.0, 0.0, 0.0);
            for p in points.iter() {
                let d = xg - p.x;
                let w = rbf(d, ls);
                let a = d * d * inv_l2;
                dens += w;
                sum += w * p.y;
                d_dens += w * a;
                d_sum += w * a * p.y;
            }
            let norm = dens + DENSITY_EPS;
            let value = sum / norm;
            features[2 * c * g + i] = dens;
            features[(2 * c + 1) * g + i] = value;
            d_log_ls[2 * c * g + i] = d_dens;
            d_log_ls[(2 * c + 1) * g + i] = d_sum / norm - value * d_dens / norm;
        }
    }
    Ok(Encoded { features, d_log_ls })
}

/// Encodes each point set into a density channel (sum of RBF weights) and a
/// value channel (RBF-weighted mean of the outputs). Output layout is
/// `[density_0, value_0, density_1, value_1, ...]`, each of length `grid.len`.
pub fn setconv_encode(
    channels: &[&[Point]],
    grid: &Grid,
    lengthscales: &[f64],
) -> Result<Vec<f64>> {
    Ok(encode(channels, grid, lengthscales)?.features)
}

/// `phi[g, q] = exp(-(x_q - x_g)^2 / (2 l^2))` and `a[g, q] = (x_q - x_g)^2 / l^2`.
pub(crate) fn decode_weights(grid: &Grid, query: &[f64], lengthscale: f64) -> (Vec<f64>, Vec<f64>) {
    let q = query.len();
    let mut phi = vec![0.0; grid.len * q];
    let mut a = vec![0.0; grid.len * q];
    for gi in 0..grid.len {
        let xg = grid.x(gi);
        for (qi, &xq) in query.iter().enumerate() {
            let d = xq - xg;
            phi[gi * q + qi] = rbf(d, lengthscale);
            a[gi * q + qi] = d * d / (lengthscale * lengthscale);
        }
    }
    (phi, a)
}

/// RBF-weighted readout of `[C, G]` grid features at `query`, giving `[C, Q]`.
pub fn setconv_decode(
    features: &[f64],
    channels: usize,
    grid: &Grid,
    query: &[f64],
    lengthscale: f64,
) -> Result<Vec<f64>> {
    if features.len() != channels * grid.len {
        return Err(Error::invalid("feature buffer does not match grid"));
    }
    if !(lengthscale > 0.0) {
        return Err(Error::invalid("decoder lengthscale must be positive"));
    }
    let (phi, _) = decode_weights(grid, query, lengthscale);
    let mut out = vec![0.0; channels * query.len()];
    gemm(
        channels,
        grid.len,
        query.len(),
        features,
        false,
        &phi,
        false,
        &mut out,
        0.0,
    );
    Ok(out)
}
