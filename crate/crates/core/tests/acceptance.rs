//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{max_abs_diff, model_config, oracle_encode, randomize_adapters, tokens, NaiveBayes};
use structadapt::data::TaskBatch;
use structadapt::experiment::gradcheck::{run_suite, SuiteOptions};
use structadapt::experiment::runner::prepare_data;
use structadapt::experiment::ExperimentConfig;
use structadapt::model::{AdaptedModel, Mode};
use structadapt::optim::{Adam, AdamConfig};
use structadapt::params::{Graph, ParamKind};
use structadapt::train::{epoch_schedule, evaluate, fit, train_step, TaskData};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let results = run_suite(&SuiteOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all_20 = results.iter().all(|r| r.instances == 20);
    ensure(
        failed.is_empty() && all_20 && elapsed <= Duration::from_secs(30),
        format!(
            "{} cases, worst rel err {worst:.2e}, {:.2}s, failed {failed:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn limit_identities() -> Check {
    let (mut off_gap, mut on_gap, mut k1_gap) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5 {
        for (mode, tasks) in [(Mode::SingleTask, 1), (Mode::Multitask, 2)] {
            let mut m = AdaptedModel::new(model_config(mode, tasks, (4, 2, 2, 2, 3), seed)).unwrap();
            randomize_adapters(&mut m, seed + 50, 0.5);
            let x = tokens(4, 3, seed);
            let off = m.gates_off().unwrap();
            let on = m.gates_on().unwrap();
            for t in 0..tasks {
                m.set_gate_logits(-30.0);
                off_gap = off_gap.max(max_abs_diff(&m.predict_logits(t, &x).unwrap(), &off.predict_logits(t, &x).unwrap()));
                m.set_gate_logits(30.0);
                on_gap = on_gap.max(max_abs_diff(&m.predict_logits(t, &x).unwrap(), &on.predict_logits(t, &x).unwrap()));
            }
        }
        // One-member pool against the gated stack with the same weights.
        let mut routed = AdaptedModel::new(model_config(Mode::Multitask, 1, (6, 3, 2, 1, 4), seed)).unwrap();
        randomize_adapters(&mut routed, seed + 90, 0.5);
        let gid = routed.store.find("gates.task0").unwrap();
        routed.store.tensor_mut(gid).values_mut().copy_from_slice(&[0.4 - seed as f64, 1.7]);
        let mut cfg = routed.config.clone();
        cfg.mode = Mode::SingleTask;
        let mut gated = AdaptedModel::new(cfg).unwrap();
        for l in 0..2 {
            for part in ["w_down", "b_down", "w_up", "b_up"] {
                let src = routed.store.find(&format!("pool{l}.adapter0.{part}")).unwrap();
                let dst = gated.store.find(&format!("adapter{l}.{part}")).unwrap();
                let v = routed.store.tensor(src).values().to_vec();
                gated.store.tensor_mut(dst).values_mut().copy_from_slice(&v);
            }
        }
        let v = routed.store.tensor(gid).values().to_vec();
        let dst = gated.store.find("gates").unwrap();
        gated.store.tensor_mut(dst).values_mut().copy_from_slice(&v);
        let x = tokens(3, 4, seed + 7);
        k1_gap = k1_gap.max(max_abs_diff(
            &routed.predict_logits(0, &x).unwrap(),
            &gated.predict_logits(0, &x).unwrap(),
        ));
    }
    ensure(
        off_gap <= 1e-9 && on_gap <= 1e-9 && k1_gap <= 1e-12,
        format!("gate-off {off_gap:.1e}, gate-on {on_gap:.1e}, K=1 {k1_gap:.1e}"),
    )
}

fn zero_init_transparency() -> Check {
    let mut checked = 0;
    for seed in 0..5 {
        for (mode, tasks) in [(Mode::SingleTask, 1), (Mode::Multitask, 3)] {
            let m = AdaptedModel::new(model_config(mode, tasks, (8, 2, 3, 3, 5), seed)).unwrap();
            let x = tokens(6, 5, seed);
            for t in 0..tasks {
                let mut g = Graph::new();
                let pooled = m.backbone.encode_plain(&mut g, &m.store, &x).unwrap();
                let plain = m.backbone.head_forward(&mut g, &m.store, t, pooled).unwrap();
                if g.value(plain) != m.predict_logits(t, &x).unwrap().as_slice() {
                    return Err(format!("{mode:?} seed {seed} task {t} differs from the plain backbone"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} model/task pairs bitwise equal"))
}

fn small_data(mode: &str, seed: u64) -> (ExperimentConfig, Vec<TaskData>) {
    let mut cfg = ExperimentConfig::from_toml(&format!("mode = \"{mode}\"\nbatch_size = 8")).unwrap();
    cfg.train_size = 200;
    cfg.val_size = 20;
    cfg.test_size = 20;
    let (data, _) = prepare_data(&cfg, seed).unwrap();
    (cfg, data)
}

fn freeze_contract() -> Check {
    let mut variants: Vec<(String, AdaptedModel, Vec<TaskData>, f64)> = Vec::new();
    for mode in ["single_task", "multitask"] {
        let (cfg, data) = small_data(mode, 0);
        let m = AdaptedModel::new(cfg.model(0)).unwrap();
        variants.push((format!("{mode}/soft"), m.clone(), data.clone(), 0.5));
        if mode == "multitask" {
            let mut last_only = cfg.model(0);
            last_only.single_insertion_layer = true;
            variants.push((format!("{mode}/last-layer"), AdaptedModel::new(last_only).unwrap(), data.clone(), 0.5));
        }
        let mut mixed = m.clone();
        mixed.set_gate_logits(1.0);
        let gid = mixed.store.iter().find(|(_, p)| matches!(p.kind, ParamKind::Gate { .. })).unwrap().0;
        mixed.store.tensor_mut(gid).values_mut()[0] = -1.0;
        variants.push((format!("{mode}/hard"), mixed.discretized(0.5).unwrap(), data.clone(), 0.0));
        variants.push((format!("{mode}/gates-on"), m.gates_on().unwrap(), data, 0.0));
    }
    let mut notes = Vec::new();
    for (name, mut m, data, lambda) in variants {
        let before = m.frozen_checksum();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut steps = 0;
        let mut epoch = 1;
        while steps < 100 {
            for batch in epoch_schedule(&data, 8, 0, epoch) {
                if steps == 100 {
                    break;
                }
                train_step(&mut m, &batch, lambda, &mut adam).map_err(|e| format!("{name}: {e}"))?;
                steps += 1;
            }
            epoch += 1;
        }
        if m.frozen_checksum() != before {
            return Err(format!("{name}: frozen checksum changed"));
        }
        notes.push(name);
    }
    Ok(format!("100 steps, checksum stable in {}", notes.join(", ")))
}

fn parameter_accounting() -> Check {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let configs = 12;
    for i in 0..configs {
        let half = rng.random_range(2..=8);
        let d = 2 * half;
        let r = rng.random_range(1..=half);
        let layers = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let (mode, tasks) = if i % 2 == 0 { (Mode::SingleTask, 1) } else { (Mode::Multitask, 2 + i % 3) };
        let m = AdaptedModel::new(model_config(mode, tasks, (d, r, layers, k, 3), i as u64)).unwrap();
        let report = m.structure_report(0.5).unwrap();
        let mut trainable = 0;
        let mut total = 0;
        let mut adapters = 0;
        for (_, p) in m.store.iter() {
            total += p.tensor.numel();
            if p.tensor.requires_grad() {
                trainable += p.tensor.numel();
            }
            if p.kind == ParamKind::Adapter {
                adapters += p.tensor.numel();
            }
        }
        let slots = if mode == Mode::Multitask { layers * k } else { layers };
        if report.trainable != trainable
            || report.total != total
            || report.adapter_params != adapters
            || adapters != slots * (2 * d * r + r + d)
        {
            return Err(format!("config d={d} r={r} L={layers} K={k} {mode:?}: report {report:?}"));
        }
    }
    let mut cfg = model_config(Mode::SingleTask, 1, (64, 8, 4, 1, 2), 0);
    cfg.backbone.vocab_size = 30;
    let reference = AdaptedModel::new(cfg).unwrap().adapter_param_count();
    let expected = 4 * (2 * 64 * 8 + 8 + 64);
    ensure(
        reference == expected && expected == 4384,
        format!("{configs} random configs exact; d=64 r=8 L=4 → {reference} adapter weights"),
    )
}

fn learning_works() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.baselines = false;
    let mut lines = Vec::new();
    let mut passed = 0;
    let mut slowest = Duration::ZERO;
    for seed in 0..10 {
        let start = Instant::now();
        let (data, _) = prepare_data(&cfg, seed).map_err(|e| e.to_string())?;
        let mut m = AdaptedModel::new(cfg.model(seed)).unwrap();
        let report = fit(&mut m, &data, &cfg.train(seed)).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);
        let majority = data[0].val.majority_frequency();
        let best = report.epochs.iter().map(|e| e.val_accuracy[0]).fold(0.0, f64::max);
        let ok = best >= majority + 0.2 && elapsed <= Duration::from_secs(60);
        passed += ok as usize;
        lines.push(format!("{best:.3}/{majority:.3}"));
    }
    ensure(
        passed >= 9,
        format!(
            "{passed}/10 seeds reach majority+0.2 [{}], slowest run {:.1}s",
            lines.join(" "),
            slowest.as_secs_f64()
        ),
    )
}

fn sparsity_direction() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.baselines = false;
    let mut strict = 0;
    let mut fewer = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let (data, _) = prepare_data(&cfg, seed).map_err(|e| e.to_string())?;
        let fresh = AdaptedModel::new(cfg.model(seed)).unwrap();
        let run = |lambda: f64| {
            let mut m = fresh.clone();
            let train = structadapt::train::TrainConfig { lambda, ..cfg.train(seed) };
            fit(&mut m, &data, &train).map(|_| m.structure_report(cfg.tau).unwrap())
        };
        let free = run(0.0).map_err(|e| e.to_string())?;
        let heavy = run(5.0).map_err(|e| e.to_string())?;
        strict += (heavy.mean_gate() < free.mean_gate()) as usize;
        fewer += (heavy.active.len() <= free.active.len()) as usize;
        pairs.push(format!(
            "{:.3}/{:.3} ({}→{})",
            free.mean_gate(),
            heavy.mean_gate(),
            free.active.len(),
            heavy.active.len()
        ));
    }
    ensure(
        strict == 5 && fewer >= 4,
        format!("σ lower in {strict}/5, active ≤ in {fewer}/5: {}", pairs.join(" ")),
    )
}

fn noise_direction() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.baselines = false;
    let levels = [0.0, 0.1, 0.2, 0.3];
    let mut model_medians = Vec::new();
    let mut nb_medians = Vec::new();
    for &p in &levels {
        cfg.noise = p;
        let mut model_acc = Vec::new();
        let mut nb_acc = Vec::new();
        for seed in 0..5 {
            let (data, test) = prepare_data(&cfg, seed).map_err(|e| e.to_string())?;
            let mut m = AdaptedModel::new(cfg.model(seed)).unwrap();
            fit(&mut m, &data, &cfg.train(seed)).map_err(|e| e.to_string())?;
            model_acc.push(evaluate(&m, &test[0]).map_err(|e| e.to_string())?);
            nb_acc.push(NaiveBayes::fit(&data[0].train, 2, cfg.vocab_size).accuracy(&test[0]));
        }
        model_medians.push(median(model_acc));
        nb_medians.push(median(nb_acc));
    }
    let monotone = |xs: &[f64]| xs.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let fmt = |xs: &[f64]| xs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
    ensure(
        monotone(&model_medians) && monotone(&nb_medians),
        format!("model medians [{}], naive Bayes [{}]", fmt(&model_medians), fmt(&nb_medians)),
    )
}

fn multitask_isolation() -> Check {
    let (cfg, data) = small_data("multitask", 1);
    let mut m = AdaptedModel::new(cfg.model(1)).unwrap();
    let mut adam = Adam::new(cfg.adam()).unwrap();
    let mut steps = 0;
    let mut epoch = 1;
    while steps < 50 {
        for batch in epoch_schedule(&data, 8, 1, epoch) {
            if steps == 50 {
                break;
            }
            train_step(&mut m, &batch, cfg.lambda, &mut adam).map_err(|e| e.to_string())?;
            steps += 1;
        }
        epoch += 1;
    }
    for task in 0..2 {
        let other = 1 - task;
        let batch: &TaskBatch = &epoch_schedule(&data, 8, 1, epoch).into_iter().find(|b| b.task() == task).unwrap();
        let mut after = m.clone();
        let mut opt = adam.clone();
        train_step(&mut after, batch, cfg.lambda, &mut opt).map_err(|e| e.to_string())?;
        for (id, p) in m.store.iter() {
            let changed = after.store.tensor(id).values() != p.tensor.values();
            let allowed = match p.kind {
                ParamKind::Backbone => false,
                ParamKind::Adapter => true,
                ParamKind::Head { task: t } | ParamKind::Gate { task: t } => t == task,
            };
            if changed && !allowed {
                return Err(format!("step on task {task} changed {}", p.name));
            }
            let must_change = matches!(p.kind, ParamKind::Gate { task: t } | ParamKind::Head { task: t } if t == task);
            if must_change && !changed {
                return Err(format!("step on task {task} left {} unchanged", p.name));
            }
        }
        let untouched = |name: &str| after.store.tensor(after.store.find(name).unwrap()).values()
            == m.store.tensor(m.store.find(name).unwrap()).values();
        if !untouched(&format!("gates.task{other}")) || !untouched(&format!("head{other}.weight")) {
            return Err(format!("task {other} parameters moved"));
        }
    }
    Ok("after 50 round-robin steps, a step on either task leaves the other's gates and head bitwise unchanged".into())
}

fn sweep_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = "mode = \"multitask\"\nmodel_dim = 8\nnum_layers = 2\nrank = 2\nepochs = 2\nbatch_size = 16\n\
                  train_size = 80\nval_size = 40\ntest_size = 40\nseeds = [0, 1]\nhard_retrain = true\nretrain_epochs = 1\n";
    fs::write(dir.path().join("run.toml"), config).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for out in ["first.tsv", "second.tsv"] {
        let status = Command::new(env!("CARGO_BIN_EXE_structadapt"))
            .current_dir(dir.path())
            .args(["--config", "run.toml", "--out", out, "sweep", "--param", "lambda", "--values", "0,1"])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("sweep exited with {:?}", status.status.code()));
        }
        let text = fs::read_to_string(dir.path().join(out)).map_err(|e| e.to_string())?;
        let stripped: Vec<String> = text
            .lines()
            .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head).to_string())
            .collect();
        outputs.push(stripped);
    }
    ensure(
        !outputs[0].is_empty() && outputs[0] == outputs[1],
        format!("{} records identical apart from the wall-clock column", outputs[0].len()),
    )
}

fn oracle_equivalence() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut m = AdaptedModel::new(model_config(Mode::Multitask, 2, (4, 2, 2, 2, 3), seed)).unwrap();
        randomize_adapters(&mut m, seed + 3, 0.6);
        for t in 0..2 {
            let id = m.store.find(&format!("gates.task{t}")).unwrap();
            for (j, v) in m.store.tensor_mut(id).values_mut().iter_mut().enumerate() {
                *v = 0.9 * j as f64 - 1.2 + 0.5 * t as f64 - 0.3 * seed as f64;
            }
        }
        let x = tokens(4, 3, seed + 100);
        for t in 0..2 {
            let mut g = Graph::new();
            let v = m.encode(&mut g, t, &x).unwrap();
            worst = worst.max(max_abs_diff(g.value(v), &oracle_encode(&m, t, &x)));
        }
    }
    ensure(worst <= 1e-10, format!("max |encode − straight-line| = {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("gradient suite", gradient_suite),
        ("limit identities", limit_identities),
        ("zero-init transparency", zero_init_transparency),
        ("freeze contract", freeze_contract),
        ("parameter accounting", parameter_accounting),
        ("learning works", learning_works),
        ("sparsity direction", sparsity_direction),
        ("noise direction", noise_direction),
        ("multitask isolation", multitask_isolation),
        ("sweep determinism", sweep_determinism),
        ("oracle forward equivalence", oracle_equivalence),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
