use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use ssod_core::synthdata::{blob_hash, dataset_hash, Dataset};
use ssod_core::trainer::{run_training, PseudoQualityRecord, RunOptions, RunPaths, TrainConfig};
use ssod_core::Error;

/// Error with the process exit code it maps to: 2 for usage/configuration
/// problems, 1 for runtime failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// Configuration-class core errors keep exit code 2.
    pub fn from_config(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Core(other),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).map_err(|e| Error::io(&path, e))?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Core(Error::Internal(format!(
                "{} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            )))),
            Err(e) => Err(Error::io(&path, e).into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct TrainArgs<'a> {
    pub data_dir: &'a Path,
    pub dataset: &'a Dataset,
    pub config: &'a TrainConfig,
    pub out: &'a Path,
    pub resume: bool,
    pub stop_after: Option<usize>,
    pub pseudo_quality_images: usize,
}

fn artifact_hashes(root: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut files = vec![root.join("metrics.jsonl"), root.join("pseudo_quality.jsonl")];
    let ck_dir = root.join("checkpoints");
    if ck_dir.is_dir() {
        let mut cks: Vec<PathBuf> = fs::read_dir(&ck_dir)
            .map_err(|e| Error::io(&ck_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        cks.sort();
        files.extend(cks);
    }
    for f in files.into_iter().filter(|f| f.is_file()) {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        out.insert(rel, blob_hash(&bytes));
    }
    Ok(out)
}

fn write_manifest(args: &TrainArgs<'_>, data_hash: &str, status: &str, step: usize) -> Result<(), CliError> {
    let config_json = serde_json::to_value(args.config).expect("config serializes");
    let id_src = format!("{}\n{}", serde_json::to_string(&config_json).expect("json"), data_hash);
    let run_id = format!(
        "{}-seed{}-{}",
        args.config.mode,
        args.config.seed,
        &blob_hash(id_src.as_bytes())[..12]
    );
    let manifest = serde_json::json!({
        "run_id": run_id,
        "status": status,
        "steps_completed": step,
        "config": config_json,
        "config_flat": args.config.to_flat(),
        "dataset": {"path": args.data_dir, "hash": data_hash},
        "artifacts": artifact_hashes(args.out)?,
    });
    let path = args.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json")).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Train into a run directory with manifest, lock, metrics and checkpoints.
pub fn train_run(args: &TrainArgs<'_>) -> Result<serde_json::Value, CliError> {
    let paths = RunPaths::new(args.out);
    if !args.resume && paths.metrics().exists() {
        return Err(CliError::usage(format!(
            "{} already holds a run (use --resume or a fresh --out)",
            args.out.display()
        )));
    }
    fs::create_dir_all(args.out).map_err(|e| Error::io(args.out, e))?;
    fs::create_dir_all(paths.plots()).map_err(|e| Error::io(paths.plots(), e))?;
    let _lock = RunLock::acquire(args.out)?;
    let data_hash = dataset_hash(args.data_dir)?;
    write_manifest(args, &data_hash, "running", 0)?;
    let options = RunOptions {
        resume: args.resume,
        stop_after: args.stop_after,
        pseudo_quality_images: args.pseudo_quality_images,
    };
    match run_training(args.dataset, &args.dataset.split, args.config, &paths, &options) {
        Ok(trainer) => {
            let step = trainer.step();
            let status = if trainer.is_done() { "finished" } else { "stopped" };
            write_manifest(args, &data_hash, status, step)?;
            Ok(serde_json::json!({
                "run_dir": args.out,
                "status": status,
                "steps_completed": step,
                "checkpoint": paths.checkpoint_at(step),
            }))
        }
        Err(e) => {
            let step = paths.latest_checkpoint().ok().flatten().map(|c| c.0).unwrap_or(0);
            let status = if matches!(e, Error::NonFinite { .. }) { "diverged" } else { "failed" };
            write_manifest(args, &data_hash, status, step)?;
            Err(CliError::from_config(e))
        }
    }
}

/// Read `pseudo_quality.jsonl` if present; malformed lines name their number.
pub fn read_pseudo_quality(path: &Path) -> Result<Vec<PseudoQualityRecord>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}
