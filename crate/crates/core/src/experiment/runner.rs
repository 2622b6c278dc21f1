use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::results::ResultRecord;
use crate::adapter::StructureReport;
use crate::data::{inject_noise, make_multitask_suite, TaskBatch};
use crate::error::{Error, Result};
use crate::model::AdaptedModel;
use crate::train::{evaluate, fit, hard_retrain, TaskData, TrainConfig, TrainReport};

/// Metric recorded for a cell that failed.
pub const FAILED_METRIC: &str = "failed";

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub model: AdaptedModel,
    pub report: TrainReport,
    pub structure: StructureReport,
    pub test_accuracy: Vec<f64>,
    pub warnings: Vec<String>,
}

fn noise_seed(seed: u64, task: usize, split: u64) -> u64 {
    seed.wrapping_mul(0xD1B5_4A32_D192_ED03)
        .wrapping_add(((task as u64) << 8) | split)
}

/// Generated splits with noise applied: always to train, and to val/test
/// when `eval_noise` is set.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<TaskData>, Vec<TaskBatch>)> {
    let suite = make_multitask_suite(&cfg.suite(seed))?;
    let mut data = Vec::with_capacity(suite.len());
    let mut test = Vec::with_capacity(suite.len());
    for (t, s) in suite.into_iter().enumerate() {
        let noisy = |b: &TaskBatch, split: u64, on: bool| {
            if on && cfg.noise > 0.0 {
                inject_noise(b, cfg.vocab_size, cfg.noise, noise_seed(seed, t, split))
            } else {
                Ok(b.clone())
            }
        };
        data.push(TaskData {
            train: noisy(&s.train, 0, true)?,
            val: noisy(&s.val, 1, cfg.eval_noise)?,
        });
        test.push(noisy(&s.test, 2, cfg.eval_noise)?);
    }
    Ok((data, test))
}

fn mean_test_accuracy(model: &AdaptedModel, test: &[TaskBatch]) -> Result<Vec<f64>> {
    test.iter().map(|b| evaluate(model, b)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Trains one seed and collects every metric of the run.
pub fn run_cell(cfg: &ExperimentConfig, seed: u64) -> Result<CellOutcome> {
    let (data, test) = prepare_data(cfg, seed)?;
    let fresh = AdaptedModel::new(cfg.model(seed))?;
    let train_cfg = cfg.train(seed);
    let mut model = fresh.clone();
    let report = fit(&mut model, &data, &train_cfg)?;

    let mut metrics: Vec<(String, f64)> = Vec::new();
    let mut push = |name: String, value: f64| metrics.push((name, value));
    for e in &report.epochs {
        let p = format!("epoch{}", e.epoch);
        push(format!("{p}.task_loss"), e.task_loss);
        push(format!("{p}.penalty"), e.penalty);
        push(format!("{p}.total_loss"), e.total);
        for (t, acc) in e.val_accuracy.iter().enumerate() {
            push(format!("{p}.val_acc.t{t}"), *acc);
        }
        let gates: Vec<f64> = e.gates.iter().flat_map(|g| g.values.iter().copied()).collect();
        push(format!("{p}.mean_gate"), mean(&gates));
    }

    let last = report.last();
    let test_accuracy = mean_test_accuracy(&model, &test)?;
    for (t, d) in data.iter().enumerate() {
        push(format!("val_acc.t{t}"), last.val_accuracy[t]);
        push(format!("test_acc.t{t}"), test_accuracy[t]);
        push(format!("majority.t{t}"), d.val.majority_frequency());
    }
    let structure = model.structure_report(cfg.tau)?;
    push("mean_gate".into(), structure.mean_gate());
    push("active_adapters".into(), structure.active.len() as f64);
    push("trainable_params".into(), structure.trainable as f64);
    push("total_params".into(), structure.total as f64);
    push("trainable_ratio".into(), structure.ratio);
    for g in &structure.gates {
        for r in 0..g.rows {
            for k in 0..g.cols {
                push(format!("gate.t{}.r{r}.k{k}", g.task), g.values[r * g.cols + k]);
            }
        }
    }

    let mut warnings = Vec::new();
    let variant = |name: &str, m: &AdaptedModel, metrics: &mut Vec<(String, f64)>| -> Result<()> {
        let acc = mean_test_accuracy(m, &test)?;
        metrics.push((format!("variant.{name}.test_acc"), mean(&acc)));
        metrics.push((format!("variant.{name}.ratio"), m.structure_report(cfg.tau)?.ratio));
        Ok(())
    };
    variant("learned_soft", &model, &mut metrics)?;
    let mut discrete = model.discretized(cfg.tau)?;
    if cfg.hard_retrain {
        let retrain_cfg = TrainConfig {
            epochs: cfg.retrain_epochs,
            ..train_cfg.clone()
        };
        let mut soft = model.clone();
        let r = hard_retrain(&mut soft, cfg.tau, &data, &retrain_cfg)?;
        warnings.extend(r.warnings);
        metrics.push(("retrain.ratio_before".into(), r.before.ratio));
        metrics.push(("retrain.ratio_after".into(), r.after.ratio));
        discrete = soft;
    }
    variant("learned_discretized", &discrete, &mut metrics)?;
    if cfg.baselines {
        let baseline_cfg = TrainConfig {
            lambda: 0.0,
            ..train_cfg
        };
        for (name, mut m) in [("gates_off", fresh.gates_off()?), ("gates_on", fresh.gates_on()?)] {
            fit(&mut m, &data, &baseline_cfg)?;
            variant(name, &m, &mut metrics)?;
        }
    }

    Ok(CellOutcome {
        seed,
        metrics,
        model,
        report,
        structure,
        test_accuracy,
        warnings,
    })
}

pub fn unix_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn records_for(cfg: &ExperimentConfig, seed: u64, outcome: &Result<CellOutcome>) -> Vec<ResultRecord> {
    let millis = unix_millis();
    let record = |metric: &str, value: f64| ResultRecord {
        config_hash: cfg.hash(),
        seed,
        coordinate: cfg.coordinate(),
        metric: metric.to_string(),
        value,
        unix_millis: millis,
    };
    match outcome {
        Ok(o) => o.metrics.iter().map(|(m, v)| record(m, *v)).collect(),
        Err(_) => vec![record(FAILED_METRIC, 1.0)],
    }
}

/// One sweep cell: a config with the swept value applied, and a seed.
#[derive(Debug, Clone)]
pub struct Cell {
    pub config: ExperimentConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Noise,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Noise => "noise",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![0.0, 0.5, 1.0, 2.0, 5.0],
            SweepParam::Noise => vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
        }
    }
}

/// Cells in value-major, seed-minor order; every value is validated up front.
pub fn sweep_cells(base: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<Cell>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut cells = Vec::new();
    for &v in values {
        let mut config = base.clone();
        match param {
            SweepParam::Lambda => config.lambda = v,
            SweepParam::Noise => config.noise = v,
        }
        config.validate()?;
        cells.extend(base.seeds.iter().map(|&seed| Cell {
            config: config.clone(),
            seed,
        }));
    }
    Ok(cells)
}

/// Runs cells concurrently (at most `workers`, 0 = all cores) and returns
/// outcomes in cell order.
pub fn run_cells(cells: &[Cell], workers: usize) -> Result<Vec<Result<CellOutcome>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("workers: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(|c| run_cell(&c.config, c.seed)).collect()))
}
