use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use polyformer::experiment::{compile_check, reproduce, run_model, ExperimentConfig, ModelKind, ModelRun, TargetSpec, TrainedModel};
use polyformer::polynomials::{BuiltinTarget, Polynomial};
use polyformer::training::{EpochRecord, RunHistory};

#[derive(Parser)]
#[command(name = "polyformer", about = "Compile and train hardmax attention polynomial regressors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a polynomial into an attention model and check it against direct evaluation.
    CompileCheck {
        /// f1, f2, or a polynomial JSON file.
        #[arg(long, default_value = "f1")]
        target: String,
        /// Radius of the input ball the model must be exact on.
        #[arg(long, default_value_t = 5.0)]
        bound: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        points: usize,
        /// Writes the compiled model here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model.
    Train(TrainArgs),
    /// Train all three models on f1 or f2 and compare them.
    Reproduce {
        experiment: String,
        #[command(flatten)]
        args: TrainArgs,
    },
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// f1, f2, or a polynomial JSON file.
    #[arg(long)]
    target: Option<String>,
    /// attention, nn_depth or nn_width.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// JSON file with any of the flag names (underscored) plus
    /// warmup_fraction, count, train_count, covariance, attention_tokens.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print one line per epoch.
    #[arg(long)]
    verbose: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    target: Option<String>,
    model: Option<String>,
    scale: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr_init: Option<f64>,
    lr_max: Option<f64>,
    clip_norm: Option<f64>,
    warmup_fraction: Option<f64>,
    out_dir: Option<PathBuf>,
    count: Option<usize>,
    train_count: Option<usize>,
    covariance: Option<Vec<f64>>,
    attention_tokens: Option<usize>,
}

struct Resolved {
    cfg: ExperimentConfig,
    model: ModelKind,
    out_dir: PathBuf,
    verbose: bool,
}

fn parse_target(s: &str) -> Result<TargetSpec> {
    if let Ok(t) = s.parse::<BuiltinTarget>() {
        return Ok(TargetSpec::Builtin(t));
    }
    let text = fs::read_to_string(s).with_context(|| format!("target {s:?} is neither f1, f2 nor a readable file"))?;
    Ok(TargetSpec::Custom(Polynomial::from_json(&text)?))
}

/// Flags override the config file, which overrides the benchmark defaults.
fn resolve(args: &TrainArgs, forced_target: Option<&str>) -> Result<Resolved> {
    let file: FileConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => FileConfig::default(),
    };
    let target_name = forced_target
        .map(str::to_string)
        .or_else(|| args.target.clone())
        .or(file.target)
        .unwrap_or_else(|| "f1".into());
    let target = parse_target(&target_name)?;
    let mut cfg = match &target {
        TargetSpec::Builtin(t) => ExperimentConfig::preset(*t),
        TargetSpec::Custom(p) => {
            let mut c = ExperimentConfig::preset(BuiltinTarget::F1);
            c.data.covariance = vec![1.0; p.dim()];
            c.target = target.clone();
            c
        }
    };
    let pick = |flag: Option<f64>, file: Option<f64>, dst: &mut f64| {
        if let Some(v) = flag.or(file) {
            *dst = v;
        }
    };
    pick(args.scale, file.scale, &mut cfg.scale);
    pick(args.lr_init, file.lr_init, &mut cfg.train.lr_init);
    pick(args.lr_max, file.lr_max, &mut cfg.train.lr_max);
    pick(args.clip_norm, file.clip_norm, &mut cfg.train.clip_norm);
    pick(None, file.warmup_fraction, &mut cfg.train.warmup_fraction);
    if let Some(v) = args.seed.or(file.seed) {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs.or(file.epochs) {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size.or(file.batch_size) {
        cfg.train.batch_size = v;
    }
    if let Some(v) = file.count {
        cfg.data.count = v;
    }
    if let Some(v) = file.train_count {
        cfg.data.train_count = v;
    }
    if let Some(v) = file.covariance {
        cfg.data.covariance = v;
    }
    if file.attention_tokens.is_some() {
        cfg.attention_tokens = file.attention_tokens;
    }
    let model = args
        .model
        .clone()
        .or(file.model)
        .unwrap_or_else(|| "attention".into())
        .parse::<ModelKind>()?;
    let out_dir = args
        .out_dir
        .clone()
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.scaled()?;
    Ok(Resolved {
        cfg,
        model,
        out_dir,
        verbose: args.verbose,
    })
}

fn write_history(path: &Path, h: &RunHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mse", "test_mse", "lr", "seconds"])?;
    for r in &h.records {
        w.write_record([
            r.epoch.to_string(),
            r.train_mse_noisy.to_string(),
            r.test_mse_clean.to_string(),
            r.lr.to_string(),
            r.wall_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const GRID: usize = 101;

/// Predictions on a 101 x 101 grid spanning three standard deviations per axis.
fn write_surface(path: &Path, model: &TrainedModel, covariance: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x1", "x2", "prediction"])?;
    let half: Vec<f64> = covariance.iter().map(|v| 3.0 * v.sqrt()).collect();
    let coord = |axis: usize, i: usize| -half[axis] + 2.0 * half[axis] * i as f64 / (GRID - 1) as f64;
    for i in 0..GRID {
        for j in 0..GRID {
            let x = [coord(0, i), coord(1, j)];
            let y = model.predict(&x)?;
            w.write_record([x[0].to_string(), x[1].to_string(), y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_run(dir: &Path, run: &ModelRun, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_history(&dir.join("history.csv"), &run.history)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&run.summary)?)?;
    fs::write(dir.join("model.json"), run.model.to_json()?)?;
    if cfg.target.polynomial().dim() == 2 {
        write_surface(&dir.join("surface.csv"), &run.model, &cfg.data.covariance)?;
    }
    Ok(())
}

fn progress(verbose: bool, kind: ModelKind, r: &EpochRecord) {
    if verbose {
        eprintln!(
            "{:<9} epoch {:>5} train {:.6} test {:.6} lr {:.2e} {:.1}s",
            kind.name(),
            r.epoch,
            r.train_mse_noisy,
            r.test_mse_clean,
            r.lr,
            r.wall_time
        );
    }
}

fn cmd_compile_check(target: &str, bound: f64, seed: u64, points: usize, out: Option<PathBuf>) -> Result<bool> {
    let p = parse_target(target)?.polynomial();
    if p.actual_degree() == 0 {
        bail!(
            "degenerate input: constant polynomial {} needs no blocks, the readout bias alone represents it",
            p.constant_term()
        );
    }
    let (model, report) = compile_check(&p, bound, seed, points)?;
    println!("{report}");
    if let Some(path) = out {
        fs::write(&path, model.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report.passed())
}

fn cmd_train(args: &TrainArgs) -> Result<bool> {
    let r = resolve(args, None)?;
    let (train_ds, test_ds) = r.cfg.generate()?;
    let run = run_model(&r.cfg, r.model, &train_ds, &test_ds, |e| progress(r.verbose, r.model, e))?;
    write_run(&r.out_dir, &run, &r.cfg)?;
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    Ok(true)
}

fn cmd_reproduce(experiment: &str, args: &TrainArgs) -> Result<bool> {
    if experiment.parse::<BuiltinTarget>().is_err() {
        bail!("reproduce takes f1 or f2, got {experiment:?}");
    }
    let r = resolve(args, Some(experiment))?;
    let (report, runs) = reproduce(&r.cfg, |k, e| progress(r.verbose, k, e))?;
    for run in &runs {
        write_run(&r.out_dir.join(run.kind.name()), run, &r.cfg)?;
    }
    fs::write(r.out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(r.out_dir.join("report.txt"), report.to_string())?;
    print!("{report}");
    if report.attention_wins() {
        println!("ordering: attention has the lowest test MSE");
        Ok(true)
    } else {
        println!("ordering violated: attention does not have the lowest test MSE");
        Ok(false)
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POLYFORMER_THREADS") {
        let n: usize = v.parse().with_context(|| format!("POLYFORMER_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::CompileCheck {
            target,
            bound,
            seed,
            points,
            out,
        } => cmd_compile_check(&target, bound, seed, points, out),
        Command::Train(args) => cmd_train(&args),
        Command::Reproduce { experiment, args } => cmd_reproduce(&experiment, &args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
