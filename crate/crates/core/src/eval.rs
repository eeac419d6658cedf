//! Benchmark harness: per-context-size joint log-likelihoods, forward-pass
//! accounting and result export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{GeneratorKind, Task};
use crate::error::{Error, Result};
use crate::models::{
    ar_convcnp_loglik, danp_joint_loglik, DeployConfig, ForwardCounter, LayerModel,
};
use crate::oracle::{oracle_joint_loglik, NoisedGpModel};

/// Number of auxiliary samples per context size: `rules` are inclusive
/// `(lo, hi, samples)` ranges partitioning `0..=max_context`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SPolicy {
    rules: Vec<(usize, usize, usize)>,
}

impl SPolicy {
    pub fn new(rules: Vec<(usize, usize, usize)>, max_context: usize) -> Result<Self> {
        let mut next = 0;
        for &(lo, hi, s) in &rules {
            if lo != next || hi < lo || s == 0 {
                return Err(Error::invalid(format!(
                    "sample-count rules must partition 0..={max_context} with positive counts"
                )));
            }
            next = hi + 1;
        }
        if next != max_context + 1 {
            return Err(Error::invalid(format!(
                "sample-count rules must cover 0..={max_context}"
            )));
        }
        Ok(SPolicy { rules })
    }

    /// `small` samples up to `threshold` context points, `large` beyond.
    pub fn two_tier(
        threshold: usize,
        small: usize,
        large: usize,
        max_context: usize,
    ) -> Result<Self> {
        if threshold >= max_context {
            return Self::new(vec![(0, max_context, small)], max_context);
        }
        Self::new(
            vec![(0, threshold, small), (threshold + 1, max_context, large)],
            max_context,
        )
    }

    pub fn constant(samples: usize, max_context: usize) -> Result<Self> {
        Self::new(vec![(0, max_context, samples)], max_context)
    }

    /// Context sizes at or below which the larger sample count applies.
    pub fn default_threshold(kind: GeneratorKind) -> usize {
        match kind {
            GeneratorKind::Gp => 9,
            _ => 5,
        }
    }

    pub fn desk_scale(kind: GeneratorKind) -> Self {
        Self::two_tier(Self::default_threshold(kind), 256, 32, 30).expect("valid policy")
    }

    pub fn full_scale(kind: GeneratorKind) -> Self {
        Self::two_tier(Self::default_threshold(kind), 50_000, 5_000, 30).expect("valid policy")
    }

    /// Sizes beyond the last rule use its count.
    pub fn samples_for(&self, context_size: usize) -> usize {
        self.rules
            .iter()
            .find(|(lo, hi, _)| (*lo..=*hi).contains(&context_size))
            .or(self.rules.last())
            .map(|r| r.2)
            .expect("policy has rules")
    }

    pub fn rules(&self) -> &[(usize, usize, usize)] {
        &self.rules
    }
}

/// What is being scored and how.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    /// Monte-Carlo mixture over sampled auxiliary levels.
    Danp {
        model: &'a dyn LayerModel,
        policy: &'a SPolicy,
        deploy: DeployConfig,
    },
    /// One forward pass: the layer-0 joint density given the context.
    Direct { model: &'a dyn LayerModel },
    /// Chain rule over targets, one forward pass per target and order.
    Autoregressive {
        model: &'a dyn LayerModel,
        n_orders: usize,
    },
    /// Closed-form GP reference; no base-model applications.
    ExactGp { model: &'a NoisedGpModel },
}

impl Scorer<'_> {
    /// Base-model applications this scorer needs for one task.
    pub fn expected_forward_passes(&self, task: &Task) -> u64 {
        match self {
            Scorer::Danp { model, policy, .. } => {
                (policy.samples_for(task.context.len()) * (model.levels() + 1)) as u64
            }
            Scorer::Direct { .. } => 1,
            Scorer::Autoregressive { n_orders, .. } => (task.targets.len() * n_orders) as u64,
            Scorer::ExactGp { .. } => 0,
        }
    }

    fn score<R: Rng + ?Sized>(
        &self,
        task: &Task,
        rng: &mut R,
        counter: &ForwardCounter,
    ) -> Result<(f64, usize)> {
        match self {
            Scorer::Danp {
                model,
                policy,
                deploy,
            } => {
                let s = policy.samples_for(task.context.len());
                Ok((danp_joint_loglik(*model, task, s, deploy, rng, counter)?, s))
            }
            Scorer::Direct { model } => {
                counter.add(1);
                let pred = model.predict_layer(0, &task.context, &[], &task.target_xs())?;
                Ok((pred.log_density(&task.target_ys())?, 0))
            }
            Scorer::Autoregressive { model, n_orders } => {
                Ok((ar_convcnp_loglik(*model, task, *n_orders, rng, counter)?, 0))
            }
            Scorer::ExactGp { model } => Ok((oracle_joint_loglik(model, task)?, 0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub task_index: usize,
    pub context_size: usize,
    pub loglik: f64,
    pub forward_passes: u64,
    /// Auxiliary samples used (0 when not applicable).
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub context_size: usize,
    pub mean_ll: f64,
    pub stderr: f64,
    pub n_tasks: usize,
    pub forward_passes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub model: String,
    pub rows: Vec<ResultRow>,
    pub records: Vec<TaskRecord>,
    /// Free-form `key value` notes written next to the data files.
    pub metadata: Vec<(String, String)>,
}

/// Total base-model applications in a run.
pub fn count_forward_passes(records: &[TaskRecord]) -> u64 {
    records.iter().map(|r| r.forward_passes).sum()
}

/// Scores every task with its own seeded stream and aggregates per context size.
pub fn evaluate<R: Rng + ?Sized>(
    model_name: &str,
    scorer: Scorer<'_>,
    tasks: &[Task],
    rng: &mut R,
) -> Result<ResultTable> {
    if tasks.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let seeds: Vec<u64> = (0..tasks.len()).map(|_| rng.random()).collect();
    let records = tasks
        .par_iter()
        .zip(seeds.par_iter())
        .enumerate()
        .map(|(i, (task, &seed))| {
            let counter = ForwardCounter::new();
            let (loglik, samples) =
                scorer.score(task, &mut ChaCha8Rng::seed_from_u64(seed), &counter)?;
            if !loglik.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite log-likelihood on task {i}"
                )));
            }
            Ok(TaskRecord {
                task_index: i,
                context_size: task.context.len(),
                loglik,
                forward_passes: counter.get(),
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultTable {
        model: model_name.to_string(),
        rows: aggregate(&records),
        records,
        metadata: vec![
            (
                "metric".into(),
                "joint log-likelihood of all targets per task, averaged over tasks".into(),
            ),
            (
                "stderr".into(),
                "sample standard deviation over tasks / sqrt(n)".into(),
            ),
        ],
    })
}

pub fn aggregate(records: &[TaskRecord]) -> Vec<ResultRow> {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.context_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|size| {
            let group: Vec<&TaskRecord> =
                records.iter().filter(|r| r.context_size == size).collect();
            let n = group.len();
            let mean = group.iter().map(|r| r.loglik).sum::<f64>() / n as f64;
            let stderr = if n > 1 {
                let var =
                    group.iter().map(|r| (r.loglik - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            ResultRow {
                context_size: size,
                mean_ll: mean,
                stderr,
                n_tasks: n,
                forward_passes: group.iter().map(|r| r.forward_passes).sum(),
            }
        })
        .collect()
}

pub const TABLE_HEADER: &str = "context_size,mean_ll,stderr,n_tasks,forward_passes";
pub const TASKS_HEADER: &str = "task_index,context_size,loglik,forward_passes,samples";
pub const PLOT_FILE: &str = "loglik_vs_context.svg";

pub fn table_csv(table: &ResultTable) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.context_size, r.mean_ll, r.stderr, r.n_tasks, r.forward_passes
        );
    }
    s
}

pub fn tasks_csv(table: &ResultTable) -> String {
    let mut s = format!("{TASKS_HEADER}\n");
    for r in &table.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.task_index, r.context_size, r.loglik, r.forward_passes, r.samples
        );
    }
    s
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `<model>.csv`, `<model>_tasks.csv` and `<model>_meta.txt` per
/// table, plus one plot with a series per table.
pub fn export_results(tables: &[ResultTable], dir: &Path) -> Result<Vec<PathBuf>> {
    if tables.is_empty() || tables.iter().any(|t| t.rows.is_empty()) {
        return Err(Error::invalid("nothing to export"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for t in tables {
        paths.push(write(dir.join(format!("{}.csv", t.model)), &table_csv(t))?);
        paths.push(write(
            dir.join(format!("{}_tasks.csv", t.model)),
            &tasks_csv(t),
        )?);
        let meta: String = t
            .metadata
            .iter()
            .map(|(k, v)| format!("{k} {v}\n"))
            .collect();
        paths.push(write(dir.join(format!("{}_meta.txt", t.model)), &meta)?);
    }
    paths.push(write(dir.join(PLOT_FILE), &plot_svg(tables))?);
    Ok(paths)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Mean log-likelihood against context size with standard-error bars.
pub fn plot_svg(tables: &[ResultTable]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 70.0, 160.0, 20.0, 50.0);
    let rows = tables.iter().flat_map(|t| t.rows.iter());
    let x_max = rows
        .clone()
        .map(|r| r.context_size)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut y_lo = rows
        .clone()
        .map(|r| r.mean_ll - r.stderr)
        .fold(f64::INFINITY, f64::min);
    let mut y_hi = rows
        .map(|r| r.mean_ll + r.stderr)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(y_hi > y_lo) {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
    let px = |x: f64| left + (w - left - right) * x / x_max;
    let py = |y: f64| top + (h - top - bottom) * (y_hi - y) / (y_hi - y_lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (px(0.0), px(x_max), py(y_lo), py(y_hi));
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y1:.2} V{y0:.2} H{x1:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let xv = x_max * i as f64 / 5.0;
        let yv = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{:.0}</text>"#,
            px(xv),
            y0 + 16.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{:.1}</text>"#,
            x0 - 6.0,
            py(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">context size</text>"#,
        (x0 + x1) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">mean log-likelihood</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, t) in tables.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for r in &t.rows {
            let x = px(r.context_size as f64);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                py(r.mean_ll - r.stderr),
                py(r.mean_ll + r.stderr)
            );
        }
        let points: Vec<String> = t
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.context_size as f64), py(r.mean_ll)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 16.0 * (k as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 12.0,
            w - right + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#,
            w - right + 38.0,
            ly + 4.0,
            t.model
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Parses a per-task data file back into records.
pub fn read_tasks_csv(text: &str) -> Result<Vec<TaskRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(TASKS_HEADER) {
        return Err(Error::invalid("unexpected per-task header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("malformed per-task line `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(TaskRecord {
                task_index: f[0].parse().map_err(|_| bad())?,
                context_size: f[1].parse().map_err(|_| bad())?,
                loglik: f[2].parse().map_err(|_| bad())?,
                forward_passes: f[3].parse().map_err(|_| bad())?,
                samples: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
