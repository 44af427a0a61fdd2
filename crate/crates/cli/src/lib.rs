//! Command implementations behind the `ppou` binary.
//!
//! Every command writes fixed file names into its `--out` directory:
//!
//! | command    | files                                                              |
//! |------------|--------------------------------------------------------------------|
//! | `generate` | `<dataset>.csv`, `<dataset>.provenance.json`                       |
//! | `train`    | `model.ppou`, `metrics.jsonl`, `summary.json`, `timing.json`, `config.toml` |
//! | `predict`  | `predictions.csv`                                                  |
//! | `eval`     | `eval.json`                                                        |
//! | `crossval` | `crossval.json`                                                    |
//! | `baseline` | `baseline.json`                                                    |

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ppou_core::config::{DataSource, RunConfig};
use ppou_core::data::{self, fmt_f64, CsvSchema};
use ppou_core::model_file;
use ppou_core::trainer::{self, JsonlSink};

#[derive(Debug, Parser)]
#[command(name = "ppou", version, about = "Probabilistic partition-of-unity network regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to CSV.
    Generate(RunArgs),
    /// Train a model and write it with its metrics.
    Train(RunArgs),
    /// Predict mean, variance and 95% interval for every row of a CSV file.
    Predict(PredictArgs),
    /// Score a trained model on a labelled CSV file.
    Eval(EvalArgs),
    /// k-fold cross-validation.
    Crossval(CrossvalArgs),
    /// Global Chebyshev least-squares fit of 1D data.
    Baseline(BaselineArgs),
}

/// Flags shared by commands that build a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sine, trefoil, swissroll or rings.
    #[arg(long)]
    pub dataset: Option<String>,
    /// CSV dataset (columns x1..xd, y).
    #[arg(long, conflicts_with = "dataset")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub rings: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Column holding the noise-free signal to use as the error reference.
    #[arg(long)]
    pub clean_column: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
}

/// Run configuration for a named benchmark dataset.
pub fn preset(name: &str) -> Result<RunConfig> {
    Ok(match name {
        "sine" => RunConfig::sine_benchmark(),
        "trefoil" => RunConfig::trefoil_benchmark(),
        "swissroll" => RunConfig::swissroll_benchmark(),
        "rings" => RunConfig::rings_benchmark(10),
        other => bail!("unknown dataset `{other}` (expected sine, trefoil, swissroll or rings)"),
    })
}

fn csv_source(path: PathBuf) -> DataSource {
    DataSource::Csv {
        path,
        inputs: None,
        target: "y".into(),
        group: None,
        noise_floor: None,
        clean: None,
    }
}

/// Merges the config file, the dataset preset and the flag overrides.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.dataset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => preset("sine")?,
    };
    if let Some(name) = &args.dataset {
        if cfg.dataset.name() != name {
            cfg.dataset = preset(name)?.dataset;
        }
    }
    if let Some(path) = &args.data {
        cfg.dataset = csv_source(path.clone());
    }
    let unused = |flag: &str, kind: &str| anyhow::anyhow!("--{flag} does not apply to the {kind} dataset");
    let kind = cfg.dataset.name();
    match &mut cfg.dataset {
        DataSource::Sine { n, alpha } => {
            *n = args.n.unwrap_or(*n);
            *alpha = args.alpha.unwrap_or(*alpha);
            if args.dim.is_some() {
                return Err(unused("dim", kind));
            }
            if args.rings.is_some() {
                return Err(unused("rings", kind));
            }
        }
        DataSource::Trefoil { n } | DataSource::Swissroll { n, .. } => {
            *n = args.n.unwrap_or(*n);
            for (flag, set) in [("alpha", args.alpha.is_some()), ("dim", args.dim.is_some()), ("rings", args.rings.is_some())] {
                if set {
                    return Err(unused(flag, kind));
                }
            }
        }
        DataSource::Rings { dim, rings, n, .. } => {
            *n = args.n.unwrap_or(*n);
            *dim = args.dim.unwrap_or(*dim);
            *rings = args.rings.unwrap_or(*rings);
            if args.alpha.is_some() {
                return Err(unused("alpha", kind));
            }
        }
        DataSource::Csv { .. } => {
            for (flag, set) in [
                ("n", args.n.is_some()),
                ("alpha", args.alpha.is_some()),
                ("dim", args.dim.is_some()),
                ("rings", args.rings.is_some()),
            ] {
                if set {
                    return Err(unused(flag, kind));
                }
            }
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    if let Some(m) = args.max_iters {
        cfg.train.max_em_iters = m;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(0) => bail!("--workers must be >= 1"),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .context("building worker pool")?
            .install(f),
        None => f(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_generate(args: &RunArgs) -> Result<PathBuf> {
    let cfg = resolve_config(args)?;
    if matches!(cfg.dataset, DataSource::Csv { .. }) {
        bail!("generate needs a synthetic dataset, not a CSV file");
    }
    let ds = data::generate(&cfg.dataset, cfg.seed)?;
    ensure_dir(&cfg.out)?;
    let name = cfg.dataset.name();
    let csv = cfg.out.join(format!("{name}.csv"));
    data::save_csv(&csv, &ds)?;
    let provenance = json!({
        "dataset": cfg.dataset,
        "seed": cfg.seed,
        "rows": ds.len(),
        "inputs": ds.dim(),
        "generator": ds.provenance,
    });
    write_json(&cfg.out.join(format!("{name}.provenance.json")), &provenance)?;
    log::info!("wrote {} rows to {}", ds.len(), csv.display());
    Ok(csv)
}

pub fn cmd_train(args: &RunArgs) -> Result<trainer::Summary> {
    let cfg = resolve_config(args)?;
    cfg.validate()?;
    let ds = data::generate(&cfg.dataset, cfg.seed)?;
    ensure_dir(&cfg.out)?;
    let metrics_path = cfg.out.join("metrics.jsonl");
    let metrics = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut sink = JsonlSink::new(BufWriter::new(metrics));
    let fit = with_workers(cfg.workers, || Ok(trainer::train_run(&cfg, &ds, None, Some(&mut sink))?))?;
    model_file::save(&cfg.out.join("model.ppou"), &fit.model, Some(&cfg))?;
    write_json(&cfg.out.join("summary.json"), &fit.summary)?;
    write_json(
        &cfg.out.join("timing.json"),
        &json!({ "wall_seconds": fit.wall_seconds, "workers": cfg.workers.unwrap_or_else(rayon::current_num_threads) }),
    )?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml_string()?)?;
    log::info!(
        "trained {} iterations; train rel l2 {:.4e}",
        fit.summary.iterations,
        fit.summary.train.rel_l2
    );
    Ok(fit.summary)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<PathBuf> {
    let (model, _) = model_file::load(&args.model)?;
    let x = data::load_csv_inputs(&args.input, None)?;
    if x.ncols() != model.input_dim() {
        bail!(
            "input file has {} input columns but the model expects {}",
            x.ncols(),
            model.input_dim()
        );
    }
    let preds = with_workers(args.workers, || Ok(model.predict_batch(x.view())?))?;
    ensure_dir(&args.out)?;
    let path = args.out.join("predictions.csv");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "mean,variance,ci_lo,ci_hi,argmax_partition")?;
    for p in &preds {
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt_f64(p.mean),
            fmt_f64(p.var),
            fmt_f64(p.lower),
            fmt_f64(p.upper),
            p.argmax_partition
        )?;
    }
    w.flush()?;
    Ok(path)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<serde_json::Value> {
    let (model, _) = model_file::load(&args.model)?;
    let ds = data::load_csv(
        &args.data,
        &CsvSchema {
            clean: args.clean_column.clone(),
            ..CsvSchema::default()
        },
    )?;
    if ds.dim() != model.input_dim() {
        bail!("data has {} input columns but the model expects {}", ds.dim(), model.input_dim());
    }
    let m = with_workers(args.workers, || {
        Ok(trainer::evaluate(&model, ds.x.view(), &ds.y, ds.clean.as_deref())?)
    })?;
    let reference = if ds.clean.is_some() { "clean" } else { "y" };
    let report = json!({
        "reference": reference,
        "rel_l2": m.rel_l2_clean.unwrap_or(m.rel_l2),
        "metrics": m,
    });
    ensure_dir(&args.out)?;
    write_json(&args.out.join("eval.json"), &report)?;
    Ok(report)
}

pub fn cmd_crossval(args: &CrossvalArgs) -> Result<trainer::CvReport> {
    let cfg = resolve_config(&args.run)?;
    cfg.validate()?;
    let ds = data::generate(&cfg.dataset, cfg.seed)?;
    let report = with_workers(cfg.workers, || Ok(trainer::cross_validate(&ds, &cfg, args.k)?))?;
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join("crossval.json"), &report)?;
    Ok(report)
}

pub fn cmd_baseline(args: &BaselineArgs) -> Result<trainer::BaselineFit> {
    let cfg = resolve_config(&args.run)?;
    let ds = data::generate(&cfg.dataset, cfg.seed)?;
    if ds.dim() != 1 {
        bail!("the baseline is defined for 1D inputs; data has {} input columns", ds.dim());
    }
    let x: Vec<f64> = ds.x.column(0).to_vec();
    let fit = trainer::fit_global_poly(&x, &ds.y, args.degree)?;
    let clean_rel_l2 = match &ds.clean {
        Some(c) => {
            let pred: Vec<f64> = x.iter().map(|v| fit.predict(*v)).collect::<ppou_core::Result<_>>()?;
            let num: f64 = pred.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = c.iter().map(|b| b * b).sum::<f64>().sqrt();
            Some(if den > 0.0 { num / den } else { num })
        }
        None => None,
    };
    ensure_dir(&cfg.out)?;
    write_json(
        &cfg.out.join("baseline.json"),
        &json!({ "fit": fit, "rel_l2_clean": clean_rel_l2, "rows": ds.len() }),
    )?;
    Ok(fit)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Crossval(a) => cmd_crossval(&a).map(|_| ()),
        Command::Baseline(a) => cmd_baseline(&a).map(|_| ()),
    }
}
