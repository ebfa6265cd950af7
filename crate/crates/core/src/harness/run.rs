use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{MetricsRecord, TrainConfig, TrainLog};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::zoo::Model;

pub const RUN_CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const MODEL_FILE: &str = "model.ckpt";

pub fn save_model(model: &Model<f32>, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
    model.to_checkpoint(extra)?.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

/// Snapshot of what a run was asked to do, written next to its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: String,
    pub train: TrainConfig,
    /// Seed used to initialize the model.
    pub init_seed: u64,
    #[serde(default)]
    pub source_checkpoint: Option<PathBuf>,
}

/// Writes config, metrics, timing and final parameters into `dir`. All files
/// except the timing one are reproducible byte for byte.
pub fn save_run(dir: impl AsRef<Path>, config: &RunConfig, log: &TrainLog, model: &Model<f32>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_vec_pretty(config)?)?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_vec_pretty(log)?)?;
    fs::write(dir.join(TIMING_FILE), serde_json::to_vec_pretty(&serde_json::json!({ "wall_time_s": log.metrics.wall_time_s }))?)?;
    save_model(model, dir.join(MODEL_FILE), serde_json::json!({ "arch": config.arch, "seed": config.train.seed }))
}

pub fn load_log(dir: impl AsRef<Path>) -> Result<TrainLog> {
    Ok(serde_json::from_slice(&fs::read(dir.as_ref().join(METRICS_FILE))?)?)
}

/// Every run directory below `root` holding a metrics file, sorted by path.
pub fn find_runs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.as_ref().to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join(METRICS_FILE).is_file() {
            out.push(d.clone());
        }
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub const REPORT_HEADER: &str =
    "run,arch,phase,seed,params,steps,max_val_accuracy,final_val_accuracy,sample_efficiency,zero_shot_accuracy";

fn csv_row(name: &str, m: &MetricsRecord) -> String {
    let zs = m.zero_shot_accuracy.map(|z| format!("{z:.6}")).unwrap_or_default();
    format!(
        "{name},{},{},{},{},{},{:.6},{:.6},{:.6},{zs}",
        m.arch, m.phase, m.seed, m.param_count, m.steps, m.max_val_accuracy, m.final_val_accuracy, m.sample_efficiency
    )
}

/// One CSV line per run under `root`: accuracy, sample efficiency,
/// parameter count and, for transfer runs, the zero-shot baseline.
pub fn report(root: impl AsRef<Path>) -> Result<String> {
    let root = root.as_ref();
    let runs = find_runs(root)?;
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!("no runs under {}", root.display())));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{REPORT_HEADER}");
    for dir in runs {
        let log = load_log(&dir)?;
        let name = dir.strip_prefix(root).unwrap_or(&dir).to_string_lossy().replace(',', "_");
        let name = if name.is_empty() { ".".to_string() } else { name };
        let _ = writeln!(out, "{}", csv_row(&name, &log.metrics));
    }
    Ok(out)
}
