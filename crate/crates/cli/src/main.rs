//! `ssod`: generate data, train in any mode, evaluate, sweep, and report.

mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ssod_core::checkpoint::Checkpoint;
use ssod_core::eval::evaluate;
use ssod_core::report::{report_runs, sweep_plot, RunLogs};
use ssod_core::sample::ImageSample;
use ssod_core::synthdata::{dataset_hash, Dataset, GenConfig};
use ssod_core::trainer::{read_metrics, TrainConfig, TrainMode};
use ssod_core::Error;

use crate::run::{read_pseudo_quality, train_run, CliError, TrainArgs};

/// Environment variable naming the default dataset directory.
pub const DATA_ROOT_ENV: &str = "SSOD_DATA_ROOT";

#[derive(Parser)]
#[command(name = "ssod", version, about = "Semi-supervised object detection with instant pseudo labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train a detector in one of the three modes.
    Train(TrainCmd),
    /// Evaluate a checkpoint (model a) on a dataset split.
    Eval(EvalArgs),
    /// Train once per value of one hyperparameter and summarize.
    Sweep(SweepArgs),
    /// Plot metrics logs of one or more runs (and sweep summaries).
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    max_shapes: usize,
    #[arg(long, default_value_t = 0.1)]
    labeled_frac: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Supervised,
    Instant,
    InstantStar,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => TrainMode::Supervised,
            ModeArg::Instant => TrainMode::Instant,
            ModeArg::InstantStar => TrainMode::InstantStar,
        }
    }
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Dataset directory (defaults to $SSOD_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-key override, repeatable: `--set tau=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Score pseudo labels of this many unlabeled images (withheld ground
    /// truth) at each checkpoint into pseudo_quality.jsonl.
    #[arg(long, default_value_t = 0)]
    pseudo_quality: usize,
}

#[derive(clap::Args)]
struct TrainCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed steps (checkpointing first).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// Human-labeled images.
    Labeled,
    /// Unlabeled images scored against their withheld annotations.
    Heldout,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Labeled)]
    split: SplitArg,
    #[arg(long, default_value_t = 0.001)]
    score_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// Also write the result JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// tau, lambda_u or unlabeled-mult.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset scored for the summary (its labeled split); defaults to the
    /// training data's held-out split.
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Run or sweep directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory (defaults to <first run>/plots).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn data_dir(arg: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    match arg {
        Some(p) => Ok(p.clone()),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::usage(format!("--data not given and ${DATA_ROOT_ENV} is unset"))),
    }
}

/// Print to stdout, ignoring a closed pipe (e.g. `ssod eval ... | head`).
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn print_json(v: &serde_json::Value) {
    emit(&serde_json::to_string_pretty(v).expect("json"));
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if !(a.labeled_frac > 0.0 && a.labeled_frac <= 1.0) {
        return Err(CliError::usage(format!("--labeled-frac {} must lie in (0, 1]", a.labeled_frac)));
    }
    let non_empty = a.out.is_dir() && a.out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !a.force {
        return Err(CliError::usage(format!("{} exists and is not empty (use --force)", a.out.display())));
    }
    if non_empty {
        std::fs::remove_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    }
    let cfg = GenConfig {
        seed: a.seed,
        count: a.count,
        image_size: a.image_size,
        classes: a.classes,
        max_shapes: a.max_shapes,
    };
    let ds = Dataset::generate(&cfg, a.labeled_frac)?;
    ds.save(&a.out)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "count": ds.samples.len(),
        "n_labeled": ds.split.n_l(),
        "n_unlabeled": ds.split.n_u(),
        "classes": ds.classes,
        "dataset_hash": dataset_hash(&a.out)?,
    }));
    Ok(())
}

/// Defaults, then the config file, then `--mode`, then `--set` overrides.
fn build_config(c: &ConfigArgs, dataset: &Dataset) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    cfg.arch.num_classes = dataset.num_classes();
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(CliError::from_config)?;
    }
    if let Some(m) = c.mode {
        cfg.mode = m.into();
    }
    for kv in &c.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(CliError::from_config)?;
    }
    cfg.validate().map_err(CliError::from_config)?;
    Ok(cfg.resolved())
}

fn load_data(arg: &Option<PathBuf>) -> Result<(PathBuf, Dataset), CliError> {
    let dir = data_dir(arg)?;
    if !dir.join("annotations.json").exists() {
        return Err(CliError::usage(format!("{} is not a dataset directory (no annotations.json)", dir.display())));
    }
    let ds = Dataset::load(&dir)?;
    Ok((dir, ds))
}

fn cmd_train(a: &TrainCmd) -> Result<(), CliError> {
    let (dir, ds) = load_data(&a.cfg.data)?;
    let cfg = build_config(&a.cfg, &ds)?;
    let summary = train_run(
        &TrainArgs {
            data_dir: &dir,
            dataset: &ds,
            config: &cfg,
            out: &a.out,
            resume: a.resume,
            stop_after: a.stop_after,
            pseudo_quality_images: a.cfg.pseudo_quality,
        },
    )?;
    print_json(&summary);
    Ok(())
}

fn eval_samples(ds: &Dataset, split: SplitArg) -> Vec<&ImageSample> {
    match split {
        SplitArg::Labeled => ds.labeled_samples(),
        SplitArg::Heldout => ds.oracle().samples(),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    if !a.checkpoint.is_file() {
        return Err(CliError::usage(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (_, ds) = load_data(&a.data)?;
    let samples = eval_samples(&ds, a.split);
    let res = evaluate(ck.primary(), &samples, &ds.classes, a.score_threshold, a.nms_iou).map_err(CliError::from_config)?;
    let v = serde_json::to_value(&res).expect("json");
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&v).expect("json")).map_err(|e| Error::io(out, e))?;
    }
    print_json(&v);
    Ok(())
}

fn sweep_key(param: &str) -> Result<&'static str, CliError> {
    match param {
        "tau" => Ok("tau"),
        "lambda_u" | "lambda-u" => Ok("lambda_u"),
        "unlabeled-mult" | "unlabeled_mult" => Ok("unlabeled_mult"),
        other => Err(CliError::usage(format!(
            "unknown sweep parameter {other:?} (expected tau, lambda_u or unlabeled-mult)"
        ))),
    }
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let key = sweep_key(&a.param)?;
    let (dir, ds) = load_data(&a.cfg.data)?;
    let base = build_config(&a.cfg, &ds)?;
    let eval_ds = match &a.eval_data {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let mut configs = Vec::new();
    for v in &a.values {
        let mut cfg = base.clone();
        cfg.set(key, v).map_err(CliError::from_config)?;
        cfg.validate().map_err(CliError::from_config)?;
        configs.push((v.clone(), cfg));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rows = Vec::new();
    for (v, cfg) in &configs {
        let run_dir = a.out.join(format!("{key}={v}"));
        train_run(&TrainArgs {
            data_dir: &dir,
            dataset: &ds,
            config: cfg,
            out: &run_dir,
            resume: false,
            stop_after: None,
            pseudo_quality_images: a.cfg.pseudo_quality,
        })?;
        let ck = Checkpoint::load(&run_dir.join("checkpoints").join(format!("step_{:08}.ckpt", cfg.total_steps)))?;
        let (samples, classes) = match &eval_ds {
            Some(e) => (e.labeled_samples(), &e.classes),
            None => (ds.oracle().samples(), &ds.classes),
        };
        let res = evaluate(ck.primary(), &samples, classes, 0.001, cfg.nms_iou)?;
        rows.push(serde_json::json!({"value": v, "ap50": res.ap50, "ap75": res.ap75, "map": res.map_5095}));
    }
    let summary = serde_json::json!({"param": key, "rows": rows});
    let path = a.out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("json")).map_err(|e| Error::io(&path, e))?;
    let mut table = format!("{key}\tAP50\tAP75\tmAP\n");
    for r in &rows {
        table.push_str(&format!("{}\t{:.4}\t{:.4}\t{:.4}\n", r["value"].as_str().unwrap_or(""), r["ap50"], r["ap75"], r["map"]));
    }
    let tpath = a.out.join("summary.tsv");
    std::fs::write(&tpath, &table).map_err(|e| Error::io(&tpath, e))?;
    emit(table.trim_end());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let out = a.out.clone().unwrap_or_else(|| a.runs[0].join("plots"));
    let mut logs = Vec::new();
    let mut written = Vec::new();
    for dir in &a.runs {
        let summary = dir.join("summary.json");
        if summary.exists() {
            written.push(report_sweep(&summary, &out)?);
            continue;
        }
        let metrics = dir.join("metrics.jsonl");
        if !metrics.exists() {
            return Err(CliError::usage(format!("{} has no metrics.jsonl or summary.json", dir.display())));
        }
        logs.push(RunLogs {
            label: run_label(dir),
            metrics: read_metrics(&metrics)?,
            pseudo_quality: read_pseudo_quality(&dir.join("pseudo_quality.jsonl"))?,
        });
    }
    if !logs.is_empty() {
        written.extend(report_runs(&logs, &out)?);
    }
    for p in &written {
        emit(&p.display().to_string());
    }
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn report_sweep(summary: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let text = std::fs::read_to_string(summary).map_err(|e| Error::io(summary, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(summary.display().to_string(), e.to_string()))?;
    let param = v["param"].as_str().unwrap_or("value").to_string();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in v["rows"].as_array().cloned().unwrap_or_default() {
        let x: f64 = r["value"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(summary.display().to_string(), "non-numeric sweep value"))?;
        xs.push(x);
        ys.push(r["ap50"].as_f64().unwrap_or(f64::NAN));
    }
    Ok(sweep_plot(out, &param, &xs, &ys)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
