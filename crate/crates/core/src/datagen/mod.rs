//! Synthetic function families and meta-learning task sampling.
//!
//! Three families are supported: sawtooth waves, square waves and draws from
//! a zero-mean Gaussian process with an exponentiated-quadratic kernel.

pub mod io;

use std::fmt;
use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Sawtooth,
    Square,
    Gp,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Sawtooth => "sawtooth",
            GeneratorKind::Square => "square",
            GeneratorKind::Gp => "gp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sawtooth" => Some(GeneratorKind::Sawtooth),
            "square" => Some(GeneratorKind::Square),
            "gp" => Some(GeneratorKind::Gp),
            _ => None,
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed interval of scalar inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRange {
    pub lo: f64,
    pub hi: f64,
}

impl InputRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!(
                "degenerate input range [{lo}, {hi}]"
            )));
        }
        Ok(InputRange { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.lo + self.width() * rng.random::<f64>()
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

impl Default for InputRange {
    fn default() -> Self {
        InputRange { lo: -2.0, hi: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub input_range: InputRange,
    pub gp_lengthscale: f64,
    pub rng_seed: u64,
}

impl GeneratorSpec {
    pub fn new(
        kind: GeneratorKind,
        input_range: InputRange,
        gp_lengthscale: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(gp_lengthscale > 0.0 && gp_lengthscale.is_finite()) {
            return Err(Error::invalid(format!(
                "gp lengthscale must be positive, got {gp_lengthscale}"
            )));
        }
        InputRange::new(input_range.lo, input_range.hi)?;
        Ok(GeneratorSpec {
            kind,
            input_range,
            gp_lengthscale,
            rng_seed,
        })
    }

    /// Default spec for a family: inputs in [-2, 2], lengthscale 0.25.
    pub fn default_for(kind: GeneratorKind, rng_seed: u64) -> Self {
        GeneratorSpec {
            kind,
            input_range: InputRange::default(),
            gp_lengthscale: 0.25,
            rng_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SawtoothParams {
    pub omega: f64,
    pub direction: f64,
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareParams {
    pub omega: f64,
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FunctionParams {
    Sawtooth(SawtoothParams),
    Square(SquareParams),
}

impl FunctionParams {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            FunctionParams::Sawtooth(p) => eval_sawtooth(p, x),
            FunctionParams::Square(p) => eval_square(p, x),
        }
    }
}

/// A scalar input/output observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// A context set and a target set.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Task {
    pub context: Vec<Point>,
    pub targets: Vec<Point>,
}

impl Task {
    pub fn target_xs(&self) -> Vec<f64> {
        self.targets.iter().map(|p| p.x).collect()
    }

    pub fn target_ys(&self) -> Vec<f64> {
        self.targets.iter().map(|p| p.y).collect()
    }
}

/// Draws the parameters of a periodic wave.
///
/// Gaussian-process functions have no finite parameterisation; they are
/// sampled jointly at evaluation points by [`sample_gp_values`].
pub fn sample_function_params<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    rng: &mut R,
) -> Result<FunctionParams> {
    match spec.kind {
        GeneratorKind::Sawtooth => {
            let omega = 2.0 + 2.0 * rng.random::<f64>();
            let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let phase = uniform(rng, 1.0 / omega, 1.0);
            Ok(FunctionParams::Sawtooth(SawtoothParams {
                omega,
                direction,
                phase,
            }))
        }
        GeneratorKind::Square => {
            let omega = 1.0 + 2.0 * rng.random::<f64>();
            let phase = uniform(rng, 1.0 / omega, 1.0);
            Ok(FunctionParams::Square(SquareParams { omega, phase }))
        }
        GeneratorKind::Gp => Err(Error::UnsupportedKind("gp")),
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// `(omega * (d x - phi)) mod 1`, mapped into `[0, 1)`.
pub fn eval_sawtooth(p: &SawtoothParams, x: f64) -> f64 {
    let v = (p.omega * (p.direction * x - p.phase)).rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative arguments.
    if v >= 1.0 {
        0.0
    } else {
        v
    }
}

/// 1 when `floor(omega x - phi)` is even (nonnegative mod 2), else 0.
pub fn eval_square(p: &SquareParams, x: f64) -> f64 {
    let k = (p.omega * x - p.phase).floor();
    if k.rem_euclid(2.0) == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn eq_kernel(x: f64, x2: f64, lengthscale: f64) -> f64 {
    let d = x - x2;
    (-d * d / (2.0 * lengthscale * lengthscale)).exp()
}

/// One joint draw from the zero-mean EQ-kernel GP at `xs`.
pub fn sample_gp_values<R: Rng + ?Sized>(
    xs: &[f64],
    lengthscale: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(lengthscale > 0.0) {
        return Err(Error::invalid(format!(
            "lengthscale must be positive, got {lengthscale}"
        )));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite GP input"));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let n = xs.len();
    let mut k = DMatrix::from_fn(n, n, |i, j| eq_kernel(xs[i], xs[j], lengthscale));
    for i in 0..n {
        k[(i, i)] += linalg::JITTER_START;
    }
    let (chol, _) = linalg::cholesky_with_jitter(&k)?;
    Ok(linalg::sample_with_factor(&vec![0.0; n], &chol.l(), rng))
}

/// Samples one task: context size uniform over `nc_range`, inputs iid uniform.
pub fn sample_task<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    rng: &mut R,
    nc_range: RangeInclusive<usize>,
    nt: usize,
) -> Result<Task> {
    if nt == 0 {
        return Err(Error::invalid("target set size must be at least 1"));
    }
    if nc_range.is_empty() {
        return Err(Error::invalid("empty context-size range"));
    }
    let nc = rng.random_range(nc_range);
    sample_task_with_context_size(spec, rng, nc, nt)
}

pub fn sample_task_with_context_size<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    rng: &mut R,
    nc: usize,
    nt: usize,
) -> Result<Task> {
    let function = match spec.kind {
        GeneratorKind::Gp => None,
        _ => Some(sample_function_params(spec, rng)?),
    };
    let cx = spec.input_range.sample_n(nc, rng);
    let tx = spec.input_range.sample_n(nt, rng);
    let (cy, ty) = match function {
        Some(f) => (
            cx.iter().map(|&x| f.eval(x)).collect::<Vec<_>>(),
            tx.iter().map(|&x| f.eval(x)).collect::<Vec<_>>(),
        ),
        None => {
            let all: Vec<f64> = cx.iter().chain(tx.iter()).copied().collect();
            let ys = sample_gp_values(&all, spec.gp_lengthscale, rng)?;
            (ys[..nc].to_vec(), ys[nc..].to_vec())
        }
    };
    Ok(Task {
        context: cx
            .into_iter()
            .zip(cy)
            .map(|(x, y)| Point::new(x, y))
            .collect(),
        targets: tx
            .into_iter()
            .zip(ty)
            .map(|(x, y)| Point::new(x, y))
            .collect(),
    })
}

/// Layout of a held-out benchmark meta-dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetaDatasetLayout {
    pub max_context: usize,
    pub tasks_per_size: usize,
    pub num_targets: usize,
}

impl Default for MetaDatasetLayout {
    fn default() -> Self {
        MetaDatasetLayout {
            max_context: 30,
            tasks_per_size: 10,
            num_targets: 50,
        }
    }
}

/// Builds the benchmark set: `tasks_per_size` tasks for every context size
/// `0..=max_context`, ordered by context size.
pub fn build_test_metadataset<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    rng: &mut R,
) -> Result<Vec<Task>> {
    build_metadataset(spec, MetaDatasetLayout::default(), rng)
}

pub fn build_metadataset<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    layout: MetaDatasetLayout,
    rng: &mut R,
) -> Result<Vec<Task>> {
    let mut tasks = Vec::with_capacity((layout.max_context + 1) * layout.tasks_per_size);
    for nc in 0..=layout.max_context {
        for _ in 0..layout.tasks_per_size {
            tasks.push(sample_task_with_context_size(
                spec,
                rng,
                nc,
                layout.num_targets,
            )?);
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn saw(omega: f64, direction: f64, phase: f64) -> SawtoothParams {
        SawtoothParams {
            omega,
            direction,
            phase,
        }
    }

    #[test]
    fn sawtooth_hand_values() {
        assert_eq!(eval_sawtooth(&saw(2.0, 1.0, 0.5), 0.75), 0.5);
        assert_eq!(eval_sawtooth(&saw(2.0, 1.0, 0.5), 0.0), 0.0);
        // 3 * (-0.2 - 0.4) = -1.8 -> 0.2
        assert!((eval_sawtooth(&saw(3.0, -1.0, 0.4), 0.2) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn square_hand_values() {
        let p = SquareParams {
            omega: 1.0,
            phase: 0.5,
        };
        assert_eq!(eval_square(&p, 0.6), 1.0);
        assert_eq!(eval_square(&p, 1.6), 0.0);
        assert_eq!(eval_square(&p, 0.4), 0.0);
    }

    #[test]
    fn wave_params_in_range_and_deterministic() {
        let spec = GeneratorSpec::default_for(GeneratorKind::Sawtooth, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let FunctionParams::Sawtooth(p) = sample_function_params(&spec, &mut rng).unwrap()
            else {
                panic!()
            };
            assert!((2.0..=4.0).contains(&p.omega));
            assert!(p.direction == 1.0 || p.direction == -1.0);
            assert!(p.phase >= 1.0 / p.omega && p.phase <= 1.0);
        }
        let a = sample_function_params(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_function_params(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);

        let spec = GeneratorSpec::default_for(GeneratorKind::Square, 0);
        for _ in 0..1000 {
            let FunctionParams::Square(p) = sample_function_params(&spec, &mut rng).unwrap() else {
                panic!()
            };
            assert!((1.0..=3.0).contains(&p.omega));
            assert!(p.phase >= 1.0 / p.omega && p.phase <= 1.0);
        }
    }

    #[test]
    fn omega_mean_matches_uniform_mean() {
        let spec = GeneratorSpec::default_for(GeneratorKind::Sawtooth, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            if let FunctionParams::Sawtooth(p) = sample_function_params(&spec, &mut rng).unwrap() {
                sum += p.omega;
            }
        }
        assert!((sum / n as f64 - 3.0).abs() < 0.02);
    }

    #[test]
    fn gp_kind_has_no_params() {
        let spec = GeneratorSpec::default_for(GeneratorKind::Gp, 0);
        let err = sample_function_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedKind("gp")));
    }

    #[test]
    fn gp_single_point_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        assert!(sample_gp_values(&[], 0.25, &mut rng).unwrap().is_empty());
        let n = 100_000;
        let mut s2 = 0.0;
        for _ in 0..n {
            let y = sample_gp_values(&[0.3], 0.25, &mut rng).unwrap()[0];
            s2 += y * y;
        }
        assert!((s2 / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn gp_three_point_covariance_matches_kernel() {
        let xs = [0.0, 0.25, 0.6];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 100_000;
        let mut acc = [[0.0; 3]; 3];
        for _ in 0..n {
            let y = sample_gp_values(&xs, 0.25, &mut rng).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += y[i] * y[j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let emp = acc[i][j] / n as f64;
                assert!(
                    (emp - eq_kernel(xs[i], xs[j], 0.25)).abs() < 0.02,
                    "({i},{j}) {emp}"
                );
            }
        }
        let corr = acc[0][1] / (acc[0][0] * acc[1][1]).sqrt();
        assert!((corr - (-0.5f64).exp()).abs() < 0.01);
    }

    #[test]
    fn task_sizes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [
            GeneratorKind::Sawtooth,
            GeneratorKind::Square,
            GeneratorKind::Gp,
        ] {
            let spec = GeneratorSpec::default_for(kind, 0);
            for _ in 0..50 {
                let t = sample_task(&spec, &mut rng, 0..=30, 50).unwrap();
                assert_eq!(t.targets.len(), 50);
                assert!(t.context.len() <= 30);
                assert!(t
                    .context
                    .iter()
                    .chain(&t.targets)
                    .all(|p| spec.input_range.contains(p.x)));
            }
        }
        let spec = GeneratorSpec::default_for(GeneratorKind::Sawtooth, 0);
        assert!(sample_task(&spec, &mut rng, 0..=30, 0).is_err());
    }

    #[test]
    fn test_metadataset_layout() {
        let spec = GeneratorSpec::default_for(GeneratorKind::Square, 0);
        let tasks = build_test_metadataset(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(tasks.len(), 310);
        assert_eq!(tasks.iter().filter(|t| t.context.len() == 17).count(), 10);
        let sizes: std::collections::BTreeSet<usize> =
            tasks.iter().map(|t| t.context.len()).collect();
        assert_eq!(sizes, (0..=30).collect());
        let again = build_test_metadataset(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(tasks, again);
    }

    proptest::proptest! {
        #[test]
        fn sawtooth_in_unit_interval_and_periodic(omega in 2.0f64..4.0, phase in 0.25f64..1.0, x in -2.0f64..2.0) {
            let p = saw(omega, 1.0, phase);
            let y = eval_sawtooth(&p, x);
            proptest::prop_assert!((0.0..1.0).contains(&y));
            let y2 = eval_sawtooth(&p, x + 1.0 / omega);
            // Values near the wrap point may land on opposite sides of it.
            let d = (y - y2).abs();
            proptest::prop_assert!(d < 1e-12 || (1.0 - d) < 1e-12);
        }

        #[test]
        fn square_is_binary(omega in 1.0f64..3.0, phase in 0.34f64..1.0, x in -5.0f64..5.0) {
            let y = eval_square(&SquareParams { omega, phase }, x);
            proptest::prop_assert!(y == 0.0 || y == 1.0);
        }
    }
}
