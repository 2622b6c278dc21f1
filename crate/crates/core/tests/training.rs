mod common;

use common::{model_config, randomize_adapters, tokens};
use structadapt::data::TaskBatch;
use structadapt::experiment::runner::prepare_data;
use structadapt::experiment::ExperimentConfig;
use structadapt::model::{AdaptedModel, Mode, SATURATED};
use structadapt::optim::{Adam, AdamConfig};
use structadapt::params::{Graph, ParamKind};
use structadapt::train::{evaluate, fit, hard_retrain, train_step, TaskData, TrainConfig};

fn small_experiment(mode: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(&format!("mode = \"{mode}\"")).unwrap();
    cfg.train_size = 400;
    cfg.val_size = 200;
    cfg.test_size = 200;
    cfg.epochs = 3;
    cfg.baselines = false;
    cfg
}

fn setup(cfg: &ExperimentConfig, seed: u64) -> (AdaptedModel, Vec<TaskData>, TrainConfig) {
    let (data, _) = prepare_data(cfg, seed).unwrap();
    (AdaptedModel::new(cfg.model(seed)).unwrap(), data, cfg.train(seed))
}

fn total_loss(m: &AdaptedModel, batch: &TaskBatch, lambda: f64) -> f64 {
    let mut g = Graph::new();
    let obj = m.objective(&mut g, batch, lambda).unwrap();
    g.scalar(obj.total)
}

#[test]
fn first_step_matches_finite_difference_adam() {
    for (mode, tasks) in [(Mode::SingleTask, 1), (Mode::Multitask, 2)] {
        let mut m = AdaptedModel::new(model_config(mode, tasks, (4, 2, 2, 2, 3), 4)).unwrap();
        randomize_adapters(&mut m, 9, 0.4);
        let batch = TaskBatch::new(0, 3, tokens(5, 3, 2), vec![1, 0, 0, 1, 1]).unwrap();
        let (lambda, lr, eps, h) = (0.7, 1e-2, 1e-8, 1e-5);

        let mut expected = m.store.clone();
        let ids: Vec<_> = m.store.iter().filter(|(_, p)| p.tensor.requires_grad()).map(|(id, _)| id).collect();
        for &id in &ids {
            if matches!(m.store.param(id).kind, ParamKind::Head { task } | ParamKind::Gate { task } if task != 0) {
                continue;
            }
            for i in 0..m.store.tensor(id).numel() {
                let mut probe = m.clone();
                let x = probe.store.tensor(id).values()[i];
                probe.store.tensor_mut(id).values_mut()[i] = x + h;
                let up = total_loss(&probe, &batch, lambda);
                probe.store.tensor_mut(id).values_mut()[i] = x - h;
                let down = total_loss(&probe, &batch, lambda);
                let g = (up - down) / (2.0 * h);
                // One bias-corrected Adam step: m̂ = g, v̂ = g².
                expected.tensor_mut(id).values_mut()[i] = x - lr * g / (g.abs() + eps);
            }
        }

        let mut adam = Adam::new(AdamConfig { lr, eps, ..AdamConfig::default() }).unwrap();
        train_step(&mut m, &batch, lambda, &mut adam).unwrap();
        for (id, p) in m.store.iter() {
            let want = expected.tensor(id).values();
            for (i, (a, b)) in p.tensor.values().iter().zip(want).enumerate() {
                assert!((a - b).abs() <= 1e-4, "{mode:?} {}[{i}]: {a} vs {b}", p.name);
            }
        }
    }
}

#[test]
fn pinned_closed_gates_leave_adapters_still() {
    let cfg = small_experiment("single_task");
    let (mut m, data, mut train) = setup(&cfg, 0);
    randomize_adapters(&mut m, 1, 0.3);
    m.set_gate_logits(-SATURATED);
    let gate_id = m.store.find("gates").unwrap();
    m.store.tensor_mut(gate_id).set_requires_grad(false);
    let before = m.store.clone();
    train.lambda = 0.0;
    train.epochs = 1;
    fit(&mut m, &data, &train).unwrap();
    for (id, p) in m.store.iter().filter(|(_, p)| p.kind == ParamKind::Adapter) {
        let moved = common::max_abs_diff(p.tensor.values(), before.tensor(id).values());
        assert!(moved <= 1e-12, "{} moved by {moved:e}", p.name);
    }
    assert_eq!(m.store.tensor(gate_id).values(), before.tensor(gate_id).values());
}

#[test]
fn training_lowers_the_loss_for_most_seeds() {
    let mut cfg = small_experiment("single_task");
    cfg.epochs = 5;
    let improved = (0..10)
        .filter(|&seed| {
            let (mut m, data, train) = setup(&cfg, seed);
            let r = fit(&mut m, &data, &train).unwrap();
            r.last().task_loss < r.epochs[0].task_loss
        })
        .count();
    assert!(improved >= 9, "loss fell for only {improved}/10 seeds");
}

#[test]
fn identical_seeds_train_bitwise_identically() {
    for mode in ["single_task", "multitask"] {
        let cfg = small_experiment(mode);
        let (mut a, data, train) = setup(&cfg, 3);
        let mut b = a.clone();
        let ra = fit(&mut a, &data, &train).unwrap();
        let rb = fit(&mut b, &data, &train).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.store, b.store);
    }
}

#[test]
fn heavy_penalty_closes_gates() {
    let cfg = small_experiment("single_task");
    let (fresh, data, train) = setup(&cfg, 1);
    let mean_gate = |lambda: f64| {
        let mut m = fresh.clone();
        fit(&mut m, &data, &TrainConfig { lambda, ..train.clone() }).unwrap();
        m.structure_report(0.5).unwrap().mean_gate()
    };
    let (free, heavy) = (mean_gate(0.0), mean_gate(50.0));
    assert!(heavy < free, "λ=50 mean gate {heavy} vs λ=0 {free}");
    assert!(heavy < 0.5);
}

#[test]
fn constant_head_scores_the_majority_rate() {
    let cfg = small_experiment("single_task");
    let (mut m, data, _) = setup(&cfg, 2);
    let val = &data[0].val;
    let counts = val.label_counts(2);
    let major = if counts[1] > counts[0] { 1 } else { 0 };
    let w = m.store.find("head0.weight").unwrap();
    m.store.tensor_mut(w).values_mut().fill(0.0);
    let b = m.store.find("head0.bias").unwrap();
    m.store.tensor_mut(b).values_mut()[major] = 1.0;
    assert_eq!(evaluate(&m, val).unwrap(), val.majority_frequency());
}

#[test]
fn retraining_prunes_closed_adapters() {
    let cfg = small_experiment("single_task");
    let (mut m, data, mut train) = setup(&cfg, 0);
    train.epochs = 1;
    let gates = m.store.find("gates").unwrap();
    m.store.tensor_mut(gates).values_mut().copy_from_slice(&[2.0, -2.0]);
    let r = hard_retrain(&mut m, 0.5, &data, &train).unwrap();
    assert_eq!(r.removed, 1);
    assert!(r.after.ratio < r.before.ratio);
    assert!(r.warnings.is_empty());
    assert!(m.store.find("adapter1.w_down").is_none());
    assert!(m.store.find("adapter0.w_down").is_some());
    assert!(r.report.epochs.iter().all(|e| e.penalty == 0.0));
    // Gates are out of the graph once the structure is hard.
    assert_eq!(m.store.tensor(gates).values(), &[2.0, -2.0]);
}

#[test]
fn retraining_with_no_survivors_warns() {
    let cfg = small_experiment("multitask");
    let (mut m, data, mut train) = setup(&cfg, 0);
    train.epochs = 1;
    m.set_gate_logits(-3.0);
    let r = hard_retrain(&mut m, 0.5, &data, &train).unwrap();
    assert_eq!(r.removed, 4);
    assert_eq!(r.after.adapter_params, 0);
    assert_eq!(r.warnings.len(), 1);
    assert!(r.report.last().val_accuracy.iter().all(|a| a.is_finite()));
}

#[test]
fn multitask_pool_member_survives_if_any_task_keeps_it() {
    let cfg = small_experiment("multitask");
    let (mut m, _, _) = setup(&cfg, 0);
    m.set_gate_logits(-3.0);
    let t1 = m.store.find("gates.task1").unwrap();
    m.store.tensor_mut(t1).values_mut()[1] = 0.0; // exactly at the threshold
    let pruned = m.discretized(0.5).unwrap();
    assert!(pruned.store.find("pool0.adapter1.w_up").is_some());
    assert!(pruned.store.find("pool0.adapter0.w_up").is_none());
    assert_eq!(pruned.structure_report(0.5).unwrap().active.len(), 1);
}
