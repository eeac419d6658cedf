//! `danp`: generate meta-datasets, train, evaluate and sample models.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use danp::augment::solve_beta;
use danp::checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, MAGIC, VERSION};
use danp::config::{load_config, parse_config, ExperimentConfig, ModelKind};
use danp::datagen::io::{
    read_metadataset, write_metadataset, METADATASET_MAGIC, METADATASET_VERSION,
};
use danp::datagen::{build_metadataset, sample_task_with_context_size, GeneratorKind, Point, Task};
use danp::eval::{evaluate, export_results, ResultTable, SPolicy, Scorer};
use danp::models::{danp_layer_marginals, BaseHead, ForwardCounter, LayerModel};
use danp::oracle::{oracle_as_denoiser, pipeline_errors, NoisedGpModel, OracleDenoiser};
use danp::train::{format_log, train_run};
use danp::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_FORMAT: u8 = 5;
const EXIT_CHECK_FAILED: u8 = 6;
const EXIT_INTERRUPTED: u8 = 130;

const METADATASET_FILE: &str = "metadataset.txt";
const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(
    name = "danp",
    version,
    about = "Noise-augmented neural processes on synthetic 1D regression"
)]
struct Cli {
    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the benchmark meta-dataset.
    Gen,
    /// Train the configured model and write checkpoints.
    Train,
    /// Score models on the benchmark meta-dataset.
    Eval(EvalArgs),
    /// Write per-layer predictive marginals for one task.
    Sample(SampleArgs),
    /// Print the per-step noise parameter for a level count and final variance.
    SolveBeta {
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        sigma2: f64,
    },
    /// Check the sampling pipeline against the exact GP reference.
    OracleCheck {
        #[arg(long, default_value_t = 10)]
        tasks: usize,
        #[arg(long, default_value_t = 10)]
        context_size: usize,
        #[arg(long, default_value_t = 4)]
        small_samples: usize,
        #[arg(long, default_value_t = 1024)]
        large_samples: usize,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// `[MODE:]PATH` with MODE one of danp, direct, ar. Defaults to danp for
    /// noised models and direct otherwise. Repeatable.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<String>,
    /// Add the oracle-backed DANP (GP meta-dataset only).
    #[arg(long)]
    oracle: bool,
    /// Add the exact GP reference (GP meta-dataset only).
    #[arg(long)]
    exact: bool,
    /// Read tasks from this file instead of regenerating them.
    #[arg(long)]
    metadataset: Option<PathBuf>,
    /// Use one sample count for every context size.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the oracle denoiser (GP meta-dataset only).
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long)]
    metadataset: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Query points per unit of input range.
    #[arg(long, default_value_t = 50)]
    resolution: usize,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::UnsupportedKind(_) | Error::Config { .. } => {
                EXIT_CONFIG
            }
            Error::Numerical(_) => EXIT_NUMERICAL,
            Error::Format { .. } | Error::Checkpoint { .. } => EXIT_FORMAT,
            Error::Io { .. } => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    if let Command::SolveBeta { levels, sigma2 } = cli.command {
        println!("{:.6}", solve_beta(levels, sigma2)?);
        return Ok(());
    }
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => parse_config("")?,
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    match &cli.command {
        Command::Gen => gen(cli, &cfg),
        Command::Train => train(cli, &cfg),
        Command::Eval(args) => eval(cli, &cfg, args),
        Command::Sample(args) => sample(cli, &cfg, args),
        Command::OracleCheck {
            tasks,
            context_size,
            small_samples,
            large_samples,
        } => oracle_check(
            cli,
            &cfg,
            *tasks,
            *context_size,
            *small_samples,
            *large_samples,
        ),
        Command::SolveBeta { .. } => unreachable!(),
    }
}

fn write_manifest(
    cli: &Cli,
    cfg: &ExperimentConfig,
    command: &str,
    extra: &[(&str, String)],
) -> CliResult {
    let mut s = String::from("danp-manifest 1\n");
    let _ = writeln!(s, "command {command}");
    let _ = writeln!(s, "seed {}", cfg.seed);
    let _ = writeln!(
        s,
        "metadataset_format {METADATASET_MAGIC} {METADATASET_VERSION}"
    );
    let _ = writeln!(
        s,
        "checkpoint_format {} {VERSION}",
        String::from_utf8_lossy(MAGIC)
    );
    let _ = writeln!(s, "results_format {}", danp::eval::TABLE_HEADER);
    for (k, v) in extra {
        let _ = writeln!(s, "{k} {v}");
    }
    s.push_str("[config]\n");
    s.push_str(&cfg.to_toml());
    write_file(&cli.out.join(MANIFEST_FILE), &s)
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn benchmark_tasks(cfg: &ExperimentConfig) -> CliResult<Vec<Task>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(build_metadataset(
        &cfg.generator,
        cfg.eval.layout,
        &mut rng,
    )?)
}

fn load_tasks(cfg: &ExperimentConfig, path: Option<&Path>) -> CliResult<Vec<Task>> {
    match path {
        Some(p) => Ok(read_metadataset(p)?.1),
        None => benchmark_tasks(cfg),
    }
}

fn gen(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let tasks = benchmark_tasks(cfg)?;
    let path = cli.out.join(METADATASET_FILE);
    write_metadataset(&path, &cfg.generator, &tasks)?;
    write_manifest(cli, cfg, "gen", &[])?;
    println!("wrote {} tasks to {}", tasks.len(), path.display());
    Ok(())
}

fn train(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    // A second handler registration (e.g. in tests) is harmless.
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed));

    let steps = cfg.train.epochs * cfg.train.steps_per_epoch();
    eprintln!("training {} for {steps} steps", cfg.kind.name());
    let out = train_run(cfg.model, &cfg.train, Some(&stop), |r| {
        eprintln!("step {} validation_nll {}", r.step, r.nll)
    })?;
    write_file(&cli.out.join("train_log.txt"), &format_log(&out.log))?;
    let extra = [("model", cfg.kind.name().to_string())];
    if out.interrupted {
        checkpoint_save(&out.final_state, &cli.out.join("partial.ckpt"))?;
        write_manifest(cli, cfg, "train (interrupted)", &extra)?;
        return Err(fail(
            EXIT_INTERRUPTED,
            format!(
                "interrupted at step {}; wrote partial.ckpt",
                out.final_state.step
            ),
        ));
    }
    checkpoint_save(&out.final_state, &cli.out.join("final.ckpt"))?;
    let mut best = out.final_state.clone();
    best.model = best.model.with_params(out.best_params)?;
    checkpoint_save(&best, &cli.out.join("best.ckpt"))?;
    write_manifest(
        cli,
        cfg,
        "train",
        &[extra[0].clone(), ("best_step", out.best.step.to_string())],
    )?;
    println!(
        "final validation NLL {}; best {} at step {}",
        out.log.last().map_or(f64::NAN, |r| r.nll),
        out.best.nll,
        out.best.step
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Danp,
    Direct,
    Ar,
}

fn parse_checkpoint_arg(arg: &str) -> CliResult<(Option<Mode>, PathBuf)> {
    let modes = [
        ("danp:", Mode::Danp),
        ("direct:", Mode::Direct),
        ("ar:", Mode::Ar),
    ];
    for (prefix, mode) in modes {
        if let Some(path) = arg.strip_prefix(prefix) {
            return Ok((Some(mode), PathBuf::from(path)));
        }
    }
    if arg.is_empty() {
        return Err(fail(EXIT_CONFIG, "empty checkpoint argument"));
    }
    Ok((None, PathBuf::from(arg)))
}

fn gp_oracle(cfg: &ExperimentConfig) -> CliResult<OracleDenoiser> {
    if cfg.generator.kind != GeneratorKind::Gp {
        return Err(fail(
            EXIT_CONFIG,
            "the oracle is only defined for generator = \"gp\"",
        ));
    }
    Ok(oracle_as_denoiser(NoisedGpModel::new(
        cfg.generator.gp_lengthscale,
        cfg.model.schedule,
    )?))
}

fn eval(cli: &Cli, cfg: &ExperimentConfig, args: &EvalArgs) -> CliResult {
    if args.checkpoints.is_empty() && !args.oracle && !args.exact {
        return Err(fail(
            EXIT_CONFIG,
            "nothing to evaluate: pass --checkpoint, --oracle or --exact",
        ));
    }
    let tasks = load_tasks(cfg, args.metadataset.as_deref())?;
    let policy = match args.samples {
        Some(s) => SPolicy::constant(s, cfg.eval.layout.max_context)?,
        None => cfg.eval.policy.clone(),
    };
    let mut loaded: Vec<(String, Mode, PathBuf, Checkpoint)> = Vec::new();
    for arg in &args.checkpoints {
        let (mode, path) = parse_checkpoint_arg(arg)?;
        let ck = checkpoint_load(&path)?;
        let spec = ck.model().spec();
        let mode = mode.unwrap_or(if spec.levels() > 0 {
            Mode::Danp
        } else {
            Mode::Direct
        });
        let mut name = match mode {
            Mode::Danp => "danp".to_string(),
            Mode::Direct => spec.head.name().to_string(),
            Mode::Ar => "ar-convcnp".to_string(),
        };
        if loaded.iter().any(|(n, ..)| *n == name) {
            name = format!("{name}-{}", loaded.len() + 1);
        }
        loaded.push((name, mode, path, ck));
    }
    let oracle = if args.oracle || args.exact {
        Some(gp_oracle(cfg)?)
    } else {
        None
    };

    let mut tables: Vec<ResultTable> = Vec::new();
    let mut score = |name: &str, scorer: Scorer<'_>, notes: Vec<(String, String)>| -> CliResult {
        // Each model gets its own stream so adding models leaves others unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + tables.len() as u64);
        eprintln!("evaluating {name} on {} tasks", tasks.len());
        let mut table = evaluate(name, scorer, &tasks, &mut rng)?;
        table.metadata.extend(notes);
        tables.push(table);
        Ok(())
    };
    let policy_note = || {
        let rules: Vec<String> = policy
            .rules()
            .iter()
            .map(|(lo, hi, s)| format!("{lo}-{hi}:{s}"))
            .collect();
        ("samples".to_string(), rules.join(" "))
    };
    for (name, mode, path, ck) in &loaded {
        let model = ck.model();
        let head = match model.spec().head {
            BaseHead::ConvGnp => "joint low-rank Gaussian",
            BaseHead::ConvCnp => "mean-field Gaussian",
        };
        let mut notes = vec![
            ("checkpoint".to_string(), path.display().to_string()),
            ("layer0_head".to_string(), head.to_string()),
        ];
        let scorer = match mode {
            Mode::Danp => {
                notes.push(policy_note());
                notes.push((
                    "aux_points_per_level".into(),
                    cfg.eval.deploy.aux_points_per_level.to_string(),
                ));
                notes.push((
                    "joint_aux_sampling".into(),
                    cfg.eval.deploy.joint_aux_sampling.to_string(),
                ));
                Scorer::Danp {
                    model,
                    policy: &policy,
                    deploy: cfg.eval.deploy,
                }
            }
            Mode::Direct => Scorer::Direct { model },
            Mode::Ar => {
                notes.push(("orders".into(), cfg.eval.ar_orders.to_string()));
                Scorer::Autoregressive {
                    model,
                    n_orders: cfg.eval.ar_orders,
                }
            }
        };
        score(name, scorer, notes)?;
    }
    if let Some(oracle) = &oracle {
        let reference = (
            "reference".to_string(),
            "exact GP under the noising model; constructed by this tool, not a published model"
                .to_string(),
        );
        if args.oracle {
            let notes = vec![reference.clone(), policy_note()];
            score(
                "oracle-danp",
                Scorer::Danp {
                    model: oracle,
                    policy: &policy,
                    deploy: cfg.eval.deploy,
                },
                notes,
            )?;
        }
        if args.exact {
            score(
                "gp-exact",
                Scorer::ExactGp {
                    model: &oracle.model,
                },
                vec![reference],
            )?;
        }
    }
    export_results(&tables, &cli.out)?;
    let names: Vec<&str> = tables.iter().map(|t| t.model.as_str()).collect();
    write_manifest(cli, cfg, "eval", &[("models", names.join(" "))])?;
    for t in &tables {
        let total: u64 = t.rows.iter().map(|r| r.forward_passes).sum();
        let mean = t
            .rows
            .iter()
            .map(|r| r.mean_ll * r.n_tasks as f64)
            .sum::<f64>()
            / t.records.len() as f64;
        println!(
            "{}: mean joint log-likelihood {mean:.3} over {} tasks, {total} forward passes",
            t.model,
            t.records.len()
        );
    }
    Ok(())
}

fn sample(cli: &Cli, cfg: &ExperimentConfig, args: &SampleArgs) -> CliResult {
    let tasks = load_tasks(cfg, args.metadataset.as_deref())?;
    let task = tasks.get(args.task_index).ok_or_else(|| {
        fail(
            EXIT_CONFIG,
            format!(
                "task index {} out of range ({} tasks)",
                args.task_index,
                tasks.len()
            ),
        )
    })?;
    let checkpoint;
    let oracle;
    let model: &dyn LayerModel = match (&args.checkpoint, args.oracle) {
        (Some(path), _) => {
            checkpoint = checkpoint_load(path)?;
            checkpoint.model()
        }
        (None, true) => {
            oracle = gp_oracle(cfg)?;
            &oracle
        }
        (None, false) => return Err(fail(EXIT_CONFIG, "pass --checkpoint or --oracle")),
    };
    if args.samples == 0 || args.resolution == 0 {
        return Err(fail(
            EXIT_CONFIG,
            "--samples and --resolution must be positive",
        ));
    }
    let range = cfg.generator.input_range;
    let n = (range.width() * args.resolution as f64).ceil() as usize + 1;
    let xs: Vec<f64> = (0..n)
        .map(|i| range.lo + range.width() * i as f64 / (n - 1) as f64)
        .collect();
    let points_text =
        |pts: &[Point]| -> String { pts.iter().map(|p| format!("{} {}\n", p.x, p.y)).collect() };
    write_file(&cli.out.join("context.txt"), &points_text(&task.context))?;
    write_file(&cli.out.join("targets.txt"), &points_text(&task.targets))?;
    for layer in 0..=model.levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(layer as u64);
        let counter = ForwardCounter::new();
        let (mean, var) = danp_layer_marginals(
            model,
            &task.context,
            layer,
            args.samples,
            &xs,
            &cfg.eval.deploy,
            &mut rng,
            &counter,
        )?;
        let text: String = xs
            .iter()
            .zip(&mean)
            .zip(&var)
            .map(|((x, m), v)| format!("{x} {m} {v}\n"))
            .collect();
        write_file(&cli.out.join(format!("layer{layer}.txt")), &text)?;
    }
    let source = match &args.checkpoint {
        Some(p) => p.display().to_string(),
        None => "oracle".to_string(),
    };
    write_manifest(
        cli,
        cfg,
        "sample",
        &[
            ("model", source),
            ("task_index", args.task_index.to_string()),
            ("samples", args.samples.to_string()),
        ],
    )?;
    println!(
        "wrote marginals for layers 0..={} to {}",
        model.levels(),
        cli.out.display()
    );
    Ok(())
}

fn oracle_check(
    cli: &Cli,
    cfg: &ExperimentConfig,
    n_tasks: usize,
    context_size: usize,
    small: usize,
    large: usize,
) -> CliResult {
    let oracle = gp_oracle(cfg)?;
    if cfg.kind != ModelKind::Danp {
        return Err(fail(
            EXIT_CONFIG,
            "oracle-check needs a noised (danp) schedule",
        ));
    }
    if small == 0 || large <= small {
        return Err(fail(
            EXIT_CONFIG,
            "need 0 < --small-samples < --large-samples",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = String::from("task small_error large_error\n");
    let mut improved = 0;
    for i in 0..n_tasks {
        let task = sample_task_with_context_size(
            &cfg.generator,
            &mut rng,
            context_size,
            cfg.eval.layout.num_targets,
        )?;
        let errs = pipeline_errors(
            &oracle.model,
            &task,
            &[small, large],
            &cfg.eval.deploy,
            cfg.seed.wrapping_add(i as u64),
        )?;
        let ok = errs[1] < errs[0];
        improved += ok as usize;
        let _ = writeln!(report, "{i} {} {}", errs[0], errs[1]);
        println!(
            "task {i}: |error| at S={small}: {:.4}, at S={large}: {:.4} {}",
            errs[0],
            errs[1],
            if ok { "ok" } else { "not improved" }
        );
    }
    write_file(&cli.out.join("oracle_check.txt"), &report)?;
    write_manifest(cli, cfg, "oracle-check", &[("tasks", n_tasks.to_string())])?;
    let needed = (9 * n_tasks).div_ceil(10);
    if improved >= needed {
        println!("PASS: error shrank on {improved}/{n_tasks} tasks");
        Ok(())
    } else {
        Err(fail(
            EXIT_CHECK_FAILED,
            format!("error shrank on only {improved}/{n_tasks} tasks (need {needed})"),
        ))
    }
}
