//! Line-based text format for meta-datasets.
//!
//! ```text
//! danp-metadataset 1
//! kind sawtooth
//! input_range -2 2
//! gp_lengthscale 0.25
//! seed 7
//! tasks 310
//! task 0 17 50
//! <x> <y>        (17 context lines, then 50 target lines)
//! ...
//! ```
//!
//! Floats use the shortest representation that parses back to the same bits.

use std::fmt::Write as _;
use std::path::Path;

use super::{GeneratorKind, GeneratorSpec, InputRange, Point, Task};
use crate::error::{Error, Result};

pub const METADATASET_MAGIC: &str = "danp-metadataset";
pub const METADATASET_VERSION: u32 = 1;

pub fn write_metadataset_string(spec: &GeneratorSpec, tasks: &[Task]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{METADATASET_MAGIC} {METADATASET_VERSION}");
    let _ = writeln!(out, "kind {}", spec.kind);
    let _ = writeln!(
        out,
        "input_range {} {}",
        spec.input_range.lo, spec.input_range.hi
    );
    let _ = writeln!(out, "gp_lengthscale {}", spec.gp_lengthscale);
    let _ = writeln!(out, "seed {}", spec.rng_seed);
    let _ = writeln!(out, "tasks {}", tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let _ = writeln!(
            out,
            "task {i} {} {}",
            task.context.len(),
            task.targets.len()
        );
        for p in task.context.iter().chain(&task.targets) {
            let _ = writeln!(out, "{} {}", p.x, p.y);
        }
    }
    out
}

pub fn write_metadataset(path: &Path, spec: &GeneratorSpec, tasks: &[Task]) -> Result<()> {
    std::fs::write(path, write_metadataset_string(spec, tasks)).map_err(|e| Error::io(path, e))
}

pub fn read_metadataset(path: &Path) -> Result<(GeneratorSpec, Vec<Task>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadataset(&text).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse_metadataset(text: &str) -> std::result::Result<(GeneratorSpec, Vec<Task>), String> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| format!("unexpected end of file, expected {what}"))
    };

    let (ln, header) = next("header")?;
    let version = field(header, METADATASET_MAGIC, ln)?;
    if version != METADATASET_VERSION.to_string() {
        return Err(format!("line {ln}: unsupported version {version}"));
    }
    let (ln, l) = next("kind")?;
    let kind_s = field(l, "kind", ln)?;
    let kind =
        GeneratorKind::parse(&kind_s).ok_or_else(|| format!("line {ln}: unknown kind {kind_s}"))?;
    let (ln, l) = next("input_range")?;
    let range = nums(&field(l, "input_range", ln)?, ln)?;
    if range.len() != 2 {
        return Err(format!("line {ln}: input_range needs two values"));
    }
    let (ln, l) = next("gp_lengthscale")?;
    let ls = num(&field(l, "gp_lengthscale", ln)?, ln)?;
    let (ln, l) = next("seed")?;
    let seed: u64 = field(l, "seed", ln)?
        .parse()
        .map_err(|_| format!("line {ln}: bad seed"))?;
    let (ln, l) = next("tasks")?;
    let n_tasks: usize = field(l, "tasks", ln)?
        .parse()
        .map_err(|_| format!("line {ln}: bad task count"))?;

    let input_range = InputRange::new(range[0], range[1]).map_err(|e| e.to_string())?;
    let spec = GeneratorSpec::new(kind, input_range, ls, seed).map_err(|e| e.to_string())?;

    let mut tasks = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let (ln, l) = next("task header")?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "task" || parts[1] != i.to_string() {
            return Err(format!("line {ln}: expected `task {i} <nc> <nt>`"));
        }
        let nc: usize = parts[2]
            .parse()
            .map_err(|_| format!("line {ln}: bad context size"))?;
        let nt: usize = parts[3]
            .parse()
            .map_err(|_| format!("line {ln}: bad target size"))?;
        let mut points = Vec::with_capacity(nc + nt);
        for _ in 0..nc + nt {
            let (ln, l) = next("point")?;
            let v = nums(l, ln)?;
            if v.len() != 2 {
                return Err(format!("line {ln}: expected `x y`"));
            }
            points.push(Point::new(v[0], v[1]));
        }
        let targets = points.split_off(nc);
        tasks.push(Task {
            context: points,
            targets,
        });
    }
    if let Some((ln, l)) = lines.next() {
        if !l.trim().is_empty() {
            return Err(format!("line {ln}: trailing content"));
        }
    }
    Ok((spec, tasks))
}

fn field(line: &str, key: &str, ln: usize) -> std::result::Result<String, String> {
    match line.split_once(' ') {
        Some((k, rest)) if k == key => Ok(rest.trim().to_string()),
        _ => Err(format!("line {ln}: expected `{key} ...`")),
    }
}

fn num(s: &str, ln: usize) -> std::result::Result<f64, String> {
    s.parse()
        .map_err(|_| format!("line {ln}: bad number `{s}`"))
}

fn nums(s: &str, ln: usize) -> std::result::Result<Vec<f64>, String> {
    s.split_whitespace().map(|t| num(t, ln)).collect()
}
