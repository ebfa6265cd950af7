use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::LabeledSet;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::seed;
use crate::stimulus::DatasetKind;
use crate::tensor::Tensor;
use crate::zoo::{count_params, Mode, Model, ParamGroup, TrainScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Full validation pass every this many steps (and at step 0).
    pub eval_interval: usize,
    pub seed: u64,
    /// Batch size used for evaluation; has no effect on results.
    pub eval_batch: usize,
    pub scope: TrainScope,
    /// Fold batch statistics into the running averages while training.
    pub update_norm_stats: bool,
    /// Where the last good parameters are written at every evaluation.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 32, 5000 steps, evaluation every 200.
    pub fn for_dataset(kind: DatasetKind) -> Self {
        let lr = match kind {
            DatasetKind::MarkedLong => 5e-4,
            DatasetKind::PathFinder => 1e-3,
        };
        let adam = AdamConfig::default();
        Self {
            lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 32,
            max_steps: 5000,
            eval_interval: 200,
            seed: 0,
            eval_batch: 64,
            scope: TrainScope::All,
            update_norm_stats: true,
            checkpoint: None,
            data: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.eval_interval == 0 || self.max_steps % self.eval_interval != 0 {
            return bad(format!("eval interval {} must divide max steps {}", self.eval_interval, self.max_steps));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("bad Adam moments".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
}

/// Summary of one run. Wall time is kept out of the serialized form so that
/// metrics files are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub arch: String,
    pub phase: String,
    pub seed: u64,
    pub param_count: usize,
    pub trained_tensors: usize,
    pub steps: usize,
    pub max_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub sample_efficiency: f64,
    #[serde(default)]
    pub zero_shot_accuracy: Option<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    pub metrics: MetricsRecord,
}

/// Normalized area under the validation curve: trapezoids in step, divided
/// by the horizon. A single record is its own mean.
pub fn sample_efficiency(records: &[EvalRecord]) -> Result<f64> {
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidArgument("empty training log".into())),
    };
    if records.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::InvalidArgument("log steps must increase".into()));
    }
    let horizon = (last.step - first.step) as f64;
    if horizon == 0.0 {
        return Ok(first.val_accuracy);
    }
    let area: f64 = records
        .windows(2)
        .map(|w| 0.5 * (w[0].val_accuracy + w[1].val_accuracy) * (w[1].step - w[0].step) as f64)
        .sum();
    Ok(area / horizon)
}

/// Index of the larger of two scores; ties go to class 0.
fn argmax2(p: &[f32]) -> usize {
    (p[1] > p[0]) as usize
}

/// Fraction of correctly classified images, evaluated in chunks of
/// `batch` with running normalization statistics.
pub fn evaluate(model: &Model<f32>, set: &LabeledSet, batch: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let order: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0usize;
    for chunk in order.chunks(batch.max(1)) {
        let (x, labels) = set.batch::<f32>(chunk);
        let probs = model.predict(&x)?;
        correct += probs.data().chunks_exact(2).zip(&labels).filter(|(p, &l)| argmax2(p) == l).count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Accuracy of externally produced `(n, 2)` scores.
pub fn accuracy_of(scores: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let [n, k] = scores.dims2()?;
    if k != 2 || n != labels.len() || n == 0 {
        return Err(Error::InvalidArgument(format!("{n}x{k} scores for {} labels", labels.len())));
    }
    let correct = scores.data().chunks_exact(2).zip(labels).filter(|(p, &l)| argmax2(p) == l).count();
    Ok(correct as f64 / n as f64)
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, epoch)));
    order
}

fn snapshot(model: &Model<f32>) -> Vec<Tensor<f32>> {
    model.params.iter().map(|p| p.tensor.clone()).collect()
}

fn restore(model: &mut Model<f32>, snap: Vec<Tensor<f32>>) {
    for (p, t) in model.params.iter_mut().zip(snap) {
        p.tensor = t;
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub(crate) fn train_step(model: &mut Model<f32>, adam: &mut AdamState<f32>, trainable: &[usize], x: Tensor<f32>, labels: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Some(cfg.scope))?;
    let xv = g.input(x)?;
    let out = model.forward(&mut g, &vars, xv, Mode::Train)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "softmax_cross_entropy" });
    }
    let grads = g.backward(loss)?;
    let grad_list: Vec<Tensor<f32>> = trainable.iter().map(|&i| grads.get(vars[i])).collect();
    if grad_list.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "backward" });
    }
    let mut slots: Vec<&mut Tensor<f32>> = model
        .params
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| trainable.binary_search(i).is_ok())
        .map(|(_, p)| &mut p.tensor)
        .collect();
    adam.step(&mut slots, &grad_list)?;
    if cfg.update_norm_stats {
        model.apply_batch_stats(&out.batch_stats);
    }
    Ok(value)
}

/// Trains with Adam on softmax cross-entropy, evaluating on the full
/// validation set at step 0 and every `eval_interval` steps. Batches come
/// from a per-epoch shuffle derived from `cfg.seed`.
///
/// A non-finite loss or gradient restores the parameters of the last
/// evaluation and returns [`Error::Diverged`].
pub fn train(model: &mut Model<f32>, train_set: &LabeledSet, val_set: &LabeledSet, cfg: &TrainConfig) -> Result<TrainLog> {
    run(model, train_set, val_set, cfg, "train")
}

fn run(model: &mut Model<f32>, train_set: &LabeledSet, val_set: &LabeledSet, cfg: &TrainConfig, phase: &str) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let [h, w, c] = train_set.shape;
    if [h, w, c] != model.spec.input {
        return Err(Error::shape("train", format!("{:?} images for a {:?} model", train_set.shape, model.spec.input)));
    }
    let started = Instant::now();
    let trainable = model.trainable(cfg.scope);
    let lens: Vec<usize> = trainable.iter().map(|&i| model.params[i].tensor.len()).collect();
    let mut adam = AdamState::new(cfg.adam(), &lens);

    let save_good = |m: &Model<f32>, step: usize| -> Result<()> {
        if let Some(path) = &cfg.checkpoint {
            m.to_checkpoint(serde_json::json!({ "step": step, "seed": cfg.seed }))?.save(path)?;
        }
        Ok(())
    };

    let mut records = vec![EvalRecord { step: 0, train_loss: None, val_accuracy: evaluate(model, val_set, cfg.eval_batch)? }];
    let mut last_good = snapshot(model);
    save_good(model, 0)?;

    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let (mut epoch, mut order) = (0u64, epoch_order(train_set.len(), cfg.seed, 0));
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 1..=cfg.max_steps {
        let slot = (step - 1) % per_epoch;
        if step > 1 && slot == 0 {
            epoch += 1;
            order = epoch_order(train_set.len(), cfg.seed, epoch);
        }
        let idx = &order[slot * cfg.batch_size..((slot + 1) * cfg.batch_size).min(order.len())];
        let (x, labels) = train_set.batch::<f32>(idx);
        match train_step(model, &mut adam, &trainable, x, &labels, cfg) {
            Ok(l) => {
                loss_sum += l;
                loss_n += 1;
            }
            Err(e) if e.is_non_finite() => {
                restore(model, last_good);
                return Err(Error::Diverged { step, last_good: cfg.checkpoint.clone() });
            }
            Err(e) => return Err(e),
        }
        if step % cfg.eval_interval == 0 {
            let acc = evaluate(model, val_set, cfg.eval_batch)?;
            records.push(EvalRecord { step, train_loss: Some(loss_sum / loss_n as f64), val_accuracy: acc });
            loss_sum = 0.0;
            loss_n = 0;
            last_good = snapshot(model);
            save_good(model, step)?;
        }
    }
    let metrics = MetricsRecord {
        arch: model.spec.arch.id().to_string(),
        phase: phase.to_string(),
        seed: cfg.seed,
        param_count: count_params(model),
        trained_tensors: trainable.len(),
        steps: cfg.max_steps,
        max_val_accuracy: records.iter().map(|r| r.val_accuracy).fold(0.0, f64::max),
        final_val_accuracy: records.last().expect("step 0 recorded").val_accuracy,
        sample_efficiency: sample_efficiency(&records)?,
        zero_shot_accuracy: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainLog { records, metrics })
}

/// Fine-tunes readout and normalization parameters only; every convolution
/// and recurrent kernel stays frozen. The zero-shot accuracy of the incoming
/// model is recorded alongside.
pub fn transfer_finetune(model: &mut Model<f32>, target_train: &LabeledSet, target_val: &LabeledSet, cfg: &TrainConfig) -> Result<TrainLog> {
    let has = |g: ParamGroup| model.params.iter().any(|p| p.group == g);
    if !has(ParamGroup::Readout) || !has(ParamGroup::Norm) {
        return Err(Error::InvalidArgument("model lacks a readout / normalization partition".into()));
    }
    let cfg = TrainConfig { scope: TrainScope::Transfer, ..cfg.clone() };
    let mut log = run(model, target_train, target_val, &cfg, "transfer")?;
    log.metrics.zero_shot_accuracy = Some(log.records[0].val_accuracy);
    Ok(log)
}

/// Indices of parameters whose values differ between two snapshots of the
/// same model.
pub fn changed_params(before: &Model<f32>, after: &Model<f32>) -> Vec<usize> {
    before
        .params
        .iter()
        .zip(&after.params)
        .enumerate()
        .filter(|(_, (a, b))| a.tensor.data().iter().zip(b.tensor.data()).any(|(x, y)| x.to_bits() != y.to_bits()))
        .map(|(i, _)| i)
        .collect()
}
