//! Training loop, evaluation and the prune-then-retrain phase.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{GateMatrix, StructureReport};
use crate::data::TaskBatch;
use crate::error::{Error, Result};
use crate::model::AdaptedModel;
use crate::optim::{Adam, AdamConfig};
use crate::params::Graph;

const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lambda: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Train and validation examples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: TaskBatch,
    pub val: TaskBatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub task_loss: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub penalty: f64,
    pub total: f64,
    /// Indexed by task id.
    pub val_accuracy: Vec<f64>,
    pub gates: Vec<GateMatrix>,
    pub trainable_ratio: f64,
}

/// Epoch 0 holds the metrics of the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("a report always holds the initial record")
    }
}

/// One forward, backward and optimizer update.
pub fn train_step(model: &mut AdaptedModel, batch: &TaskBatch, lambda: f64, optim: &mut Adam) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let obj = model.objective(&mut g, batch, lambda)?;
    let metrics = StepMetrics {
        task_loss: g.scalar(obj.task_loss),
        penalty: g.scalar(obj.penalty),
        total: g.scalar(obj.total),
    };
    if !metrics.total.is_finite() {
        return Err(Error::Divergence {
            step: optim.updates() + 1,
            lambda,
            lr: optim.config.lr,
        });
    }
    let touched = g.backward_into(obj.total, &mut model.store)?;
    optim.step(&mut model.store, &touched);
    Ok(metrics)
}

fn epoch_seed(seed: u64, epoch: usize, task: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 16)
        .wrapping_add(task as u64 + 1)
}

/// Shuffled mini-batches of every task for one epoch, interleaved
/// round-robin; tasks with fewer batches drop out once exhausted.
pub fn epoch_schedule(data: &[TaskData], batch_size: usize, seed: u64, epoch: usize) -> Vec<TaskBatch> {
    let per_task: Vec<Vec<TaskBatch>> = data
        .iter()
        .map(|d| {
            let mut order: Vec<usize> = (0..d.train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch, d.train.task()));
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(|c| d.train.select(c)).collect()
        })
        .collect();
    let rounds = per_task.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..rounds {
        for batches in &per_task {
            if let Some(b) = batches.get(i) {
                out.push(b.clone());
            }
        }
    }
    out
}

fn check_data(model: &AdaptedModel, data: &[TaskData], batch_size: usize) -> Result<()> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Contract("training needs at least one task and batch_size >= 1".into()));
    }
    for d in data {
        if d.train.is_empty() || d.val.is_empty() {
            return Err(Error::Contract(format!("task {} has an empty split", d.train.task())));
        }
        if d.train.task() != d.val.task() {
            return Err(Error::Contract("train and val splits belong to different tasks".into()));
        }
        model.num_classes(d.train.task())?;
    }
    Ok(())
}

fn record(model: &AdaptedModel, data: &[TaskData], epoch: usize, sums: [f64; 3], steps: usize) -> Result<EpochRecord> {
    let n = steps.max(1) as f64;
    let mut val_accuracy = vec![0.0; model.num_tasks()];
    for d in data {
        val_accuracy[d.val.task()] = evaluate(model, &d.val)?;
    }
    let tau = model.hard.unwrap_or(0.5);
    Ok(EpochRecord {
        epoch,
        task_loss: sums[0] / n,
        penalty: sums[1] / n,
        total: sums[2] / n,
        val_accuracy,
        gates: model.gate_matrices(),
        trainable_ratio: model.structure_report(tau)?.ratio,
    })
}

/// Trains for `cfg.epochs` epochs. Losses are averaged over the epoch's
/// steps; the initial record averages the same quantities forward-only over
/// the first epoch's batches.
pub fn fit(model: &mut AdaptedModel, data: &[TaskData], cfg: &TrainConfig) -> Result<TrainReport> {
    check_data(model, data, cfg.batch_size)?;
    let mut optim = Adam::new(cfg.adam)?;

    let mut sums = [0.0; 3];
    let first = epoch_schedule(data, cfg.batch_size, cfg.seed, 1);
    for batch in &first {
        let mut g = Graph::new();
        let obj = model.objective(&mut g, batch, cfg.lambda)?;
        sums[0] += g.scalar(obj.task_loss);
        sums[1] += g.scalar(obj.penalty);
        sums[2] += g.scalar(obj.total);
    }
    let mut epochs = vec![record(model, data, 0, sums, first.len())?];

    for epoch in 1..=cfg.epochs {
        let schedule = epoch_schedule(data, cfg.batch_size, cfg.seed, epoch);
        let mut sums = [0.0; 3];
        for batch in &schedule {
            let m = train_step(model, batch, cfg.lambda, &mut optim)?;
            sums[0] += m.task_loss;
            sums[1] += m.penalty;
            sums[2] += m.total;
        }
        epochs.push(record(model, data, epoch, sums, schedule.len())?);
    }
    Ok(TrainReport {
        epochs,
        steps: optim.updates(),
    })
}

/// Argmax class per example; ties resolve to the lowest class index.
pub fn predict(model: &AdaptedModel, batch: &TaskBatch) -> Result<Vec<usize>> {
    let classes = model.num_classes(batch.task())?;
    let s = batch.seq_len();
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.tokens().chunks(EVAL_CHUNK * s) {
        let logits = model.predict_logits(batch.task(), chunk)?;
        for row in logits.chunks(classes) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &AdaptedModel, batch: &TaskBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let hits = predict(model, batch)?
        .iter()
        .zip(batch.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainReport {
    pub before: StructureReport,
    pub after: StructureReport,
    pub removed: usize,
    pub report: TrainReport,
    pub warnings: Vec<String>,
}

/// Discretizes the gates at `tau`, drops inactive adapters and keeps
/// training the survivors and heads without the penalty.
pub fn hard_retrain(model: &mut AdaptedModel, tau: f64, data: &[TaskData], cfg: &TrainConfig) -> Result<RetrainReport> {
    let before = model.structure_report(tau)?;
    let removed = model.prune(tau)?;
    let after = model.structure_report(tau)?;
    let mut warnings = Vec::new();
    if after.active.is_empty() {
        warnings.push(format!("no adapter reaches tau = {tau}; retraining heads only"));
    }
    let cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let report = fit(model, data, &cfg)?;
    Ok(RetrainReport {
        before,
        after,
        removed,
        report,
        warnings,
    })
}
