use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::LabeledSet;
use super::run::{save_run, RunConfig};
use super::train::{epoch_order, evaluate, train, train_step, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::zoo::{build_model, Arch, ModelSpec};

/// Architectures times seeds under one training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub archs: Vec<Arch>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Wall-clock budget for the whole grid, in seconds.
    pub budget_s: f64,
    /// Optimizer steps timed per architecture when projecting runtime.
    pub probe_steps: usize,
    /// Validation images timed per architecture; the full evaluation time
    /// is scaled up from them.
    pub eval_probe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchTiming {
    pub arch: Arch,
    pub step_s: f64,
    pub eval_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub timings: Vec<ArchTiming>,
    /// Projected wall time of the full grid.
    pub total_s: f64,
}

impl Projection {
    pub fn fits(&self, budget_s: f64) -> bool {
        self.total_s <= budget_s
    }
}

/// Seconds per optimizer step, measured over `n` steps on fresh batches.
pub fn time_train_steps(arch: Arch, set: &LabeledSet, cfg: &TrainConfig, n: usize) -> Result<f64> {
    let mut model = build_model::<f32>(&ModelSpec::for_arch(arch, set.shape[0]), cfg.seed)?;
    let trainable = model.trainable(cfg.scope);
    let lens: Vec<usize> = trainable.iter().map(|&i| model.params[i].tensor.len()).collect();
    let mut adam = AdamState::new(cfg.adam(), &lens);
    let order = epoch_order(set.len(), cfg.seed, 0);
    let n = n.max(1);
    let start = Instant::now();
    for s in 0..n {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|j| order[(s * cfg.batch_size + j) % order.len()]).collect();
        let (x, labels) = set.batch::<f32>(&idx);
        train_step(&mut model, &mut adam, &trainable, x, &labels, cfg)?;
    }
    Ok(start.elapsed().as_secs_f64() / n as f64)
}

/// Measures each architecture and projects the grid's total wall time,
/// evaluations included.
pub fn project(cfg: &ExperimentConfig, train_set: &LabeledSet, val_set: &LabeledSet) -> Result<Projection> {
    let evals = (cfg.train.max_steps / cfg.train.eval_interval + 1) as f64;
    let mut timings = Vec::new();
    let mut total = 0.0;
    for &arch in &cfg.archs {
        let step_s = time_train_steps(arch, train_set, &cfg.train, cfg.probe_steps)?;
        let model = build_model::<f32>(&ModelSpec::for_arch(arch, train_set.shape[0]), cfg.train.seed)?;
        let probe = cfg.eval_probe.clamp(1, val_set.len());
        let sample = val_set.subset(&(0..probe).collect::<Vec<_>>());
        let start = Instant::now();
        evaluate(&model, &sample, cfg.train.eval_batch)?;
        let eval_s = start.elapsed().as_secs_f64() * val_set.len() as f64 / probe as f64;
        total += cfg.seeds.len() as f64 * (cfg.train.max_steps as f64 * step_s + evals * eval_s);
        timings.push(ArchTiming { arch, step_s, eval_s });
    }
    Ok(Projection { timings, total_s: total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arch: Arch,
    pub seed: u64,
    pub log: TrainLog,
}

/// Trains every (architecture, seed) pair; the seed drives both the
/// initialization and the shuffle. Runs are saved under `out/{arch}/seed{s}`
/// when `out` is given.
pub fn run_grid(cfg: &ExperimentConfig, train_set: &LabeledSet, val_set: &LabeledSet, out: Option<&Path>) -> Result<Vec<RunResult>> {
    let mut results = Vec::new();
    for &arch in &cfg.archs {
        for &seed in &cfg.seeds {
            let mut model = build_model::<f32>(&ModelSpec::for_arch(arch, train_set.shape[0]), seed)?;
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let log = train(&mut model, train_set, val_set, &tc)?;
            if let Some(root) = out {
                let rc = RunConfig { arch: arch.id().to_string(), train: tc, init_seed: seed, source_checkpoint: None };
                save_run(root.join(arch.id()).join(format!("seed{seed}")), &rc, &log, &model)?;
            }
            results.push(RunResult { arch, seed, log });
        }
    }
    Ok(results)
}

/// Seeds on which `target` has strictly higher sample efficiency than every
/// architecture in `others`.
pub fn ordering_wins(results: &[RunResult], target: Arch, others: &[Arch]) -> Result<usize> {
    let se = |arch: Arch, seed: u64| {
        results
            .iter()
            .find(|r| r.arch == arch && r.seed == seed)
            .map(|r| r.log.metrics.sample_efficiency)
            .ok_or_else(|| Error::InvalidArgument(format!("no {arch} run for seed {seed}")))
    };
    let mut wins = 0;
    let seeds: Vec<u64> = results.iter().filter(|r| r.arch == target).map(|r| r.seed).collect();
    for seed in seeds {
        let t = se(target, seed)?;
        let mut beat = true;
        for &o in others {
            beat &= t > se(o, seed)?;
        }
        wins += beat as usize;
    }
    Ok(wins)
}
