//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use structadapt::data::TaskBatch;
use structadapt::model::{AdaptedModel, Structure};
use structadapt::params::ParamKind;

/// Multinomial naive Bayes over token counts with add-one smoothing.
pub struct NaiveBayes {
    log_prior: Vec<f64>,
    log_likelihood: Vec<Vec<f64>>,
}

impl NaiveBayes {
    pub fn fit(batch: &TaskBatch, classes: usize, vocab: usize) -> Self {
        let mut counts = vec![vec![1.0; vocab]; classes];
        let mut docs = vec![1.0; classes];
        for (i, &label) in batch.labels().iter().enumerate() {
            docs[label] += 1.0;
            for &t in batch.sequence(i) {
                counts[label][t as usize] += 1.0;
            }
        }
        let total_docs: f64 = docs.iter().sum();
        let log_likelihood = counts
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                row.iter().map(|c| (c / total).ln()).collect()
            })
            .collect();
        Self {
            log_prior: docs.iter().map(|d| (d / total_docs).ln()).collect(),
            log_likelihood,
        }
    }

    pub fn predict(&self, seq: &[u32]) -> usize {
        let scores: Vec<f64> = self
            .log_prior
            .iter()
            .zip(&self.log_likelihood)
            .map(|(p, ll)| p + seq.iter().map(|&t| ll[t as usize]).sum::<f64>())
            .collect();
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, batch: &TaskBatch) -> f64 {
        let hits = (0..batch.len())
            .filter(|&i| self.predict(batch.sequence(i)) == batch.labels()[i])
            .count();
        hits as f64 / batch.len() as f64
    }
}

// ---- straight-line forward pass on plain nested vectors ----

type Mat = Vec<Vec<f64>>;

fn tensor(model: &AdaptedModel, name: &str) -> (Vec<usize>, Vec<f64>) {
    let id = model.store.find(name).unwrap_or_else(|| panic!("no tensor {name}"));
    let t = model.store.tensor(id);
    (t.shape().to_vec(), t.values().to_vec())
}

fn matrix(model: &AdaptedModel, name: &str) -> Mat {
    let (shape, values) = tensor(model, name);
    let cols = *shape.last().unwrap();
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vector(model: &AdaptedModel, name: &str) -> Vec<f64> {
    tensor(model, name).1
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (p, x) in row.iter().enumerate() {
                        s += x * b[p][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = matmul(x, w);
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn layer_norm(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().map(|v| (v - mean) * inv).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn block(model: &AdaptedModel, l: usize, h: &Mat, seq_len: usize) -> Mat {
    let p = |s: &str| format!("backbone.layer{l}.{s}");
    let m = |s: &str| matrix(model, &p(s));
    let v = |s: &str| vector(model, &p(s));
    let x = layer_norm(h);
    let q = linear(&x, &m("w_q"), &v("b_q"));
    let k = linear(&x, &m("w_k"), &v("b_k"));
    let vv = linear(&x, &m("w_v"), &v("b_v"));
    let d = h[0].len() as f64;
    let mut attn = Vec::new();
    for start in (0..h.len()).step_by(seq_len) {
        for i in start..start + seq_len {
            let scores: Vec<f64> = (start..start + seq_len)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let probs = softmax(&scores);
            let mut out = vec![0.0; h[0].len()];
            for (pj, j) in probs.iter().zip(start..start + seq_len) {
                for (o, x) in out.iter_mut().zip(&vv[j]) {
                    *o += pj * x;
                }
            }
            attn.push(out);
        }
    }
    let attn = linear(&attn, &m("w_o"), &v("b_o"));
    let h = add(h, &attn);
    let x = layer_norm(&h);
    let f: Mat = linear(&x, &m("w_1"), &v("b_1"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f = linear(&f, &m("w_2"), &v("b_2"));
    add(&h, &f)
}

fn bias_or_zero(model: &AdaptedModel, name: &str, len: usize) -> Vec<f64> {
    match model.store.find(name) {
        Some(id) => model.store.tensor(id).values().to_vec(),
        None => vec![0.0; len],
    }
}

fn adapter_delta(model: &AdaptedModel, prefix: &str, h: &Mat) -> Mat {
    let down = matrix(model, &format!("{prefix}.w_down"));
    let up = matrix(model, &format!("{prefix}.w_up"));
    let z = linear(h, &down, &bias_or_zero(model, &format!("{prefix}.b_down"), down[0].len()));
    let z: Mat = z.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(&z, &up, &bias_or_zero(model, &format!("{prefix}.b_up"), up[0].len()))
}

/// Gate weight as the model applies it: `σ` when soft, 1 or 0 when hard.
fn gate_weight(model: &AdaptedModel, logit: f64) -> f64 {
    match model.hard {
        None => sigmoid(logit),
        Some(tau) if sigmoid(logit) >= tau => 1.0,
        Some(_) => 0.0,
    }
}

/// Pooled `[n × d]` representation recomputed from the stored tensors alone.
pub fn oracle_encode(model: &AdaptedModel, task: usize, tokens: &[u32]) -> Vec<f64> {
    let cfg = &model.config.backbone;
    let emb = matrix(model, "backbone.embedding");
    let mut h: Mat = tokens.iter().map(|&t| emb[t as usize].clone()).collect();
    for l in 0..cfg.num_layers {
        h = block(model, l, &h, cfg.seq_len);
        match &model.structure {
            Structure::Gated { adapters, .. } => {
                if adapters[l].is_some() {
                    let s = gate_weight(model, vector(model, "gates")[l]);
                    let delta = adapter_delta(model, &format!("adapter{l}"), &h);
                    let adapted = add(&h, &delta);
                    h = h
                        .iter()
                        .zip(&adapted)
                        .map(|(r, a)| r.iter().zip(a).map(|(x, y)| (1.0 - s) * x + s * y).collect())
                        .collect();
                }
            }
            Structure::Routed { pools, .. } => {
                if let Some(row) = pools.iter().position(|p| p.layer == l) {
                    let gates = vector(model, &format!("gates.task{task}"));
                    let k = pools[row].slots.len();
                    let mut out = h.clone();
                    for slot in 0..k {
                        if pools[row].slots[slot].is_none() {
                            continue;
                        }
                        let s = gate_weight(model, gates[row * k + slot]);
                        let delta = adapter_delta(model, &format!("pool{l}.adapter{slot}"), &h);
                        for (o, dr) in out.iter_mut().zip(&delta) {
                            for (x, dv) in o.iter_mut().zip(dr) {
                                *x += s * dv;
                            }
                        }
                    }
                    h = out;
                }
            }
        }
    }
    let h = layer_norm(&h);
    let pooled: Mat = h
        .chunks(cfg.seq_len)
        .map(|rows| {
            (0..rows[0].len())
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / cfg.seq_len as f64)
                .collect()
        })
        .collect();
    pooled.concat()
}

pub fn oracle_logits(model: &AdaptedModel, task: usize, tokens: &[u32]) -> Vec<f64> {
    let d = model.config.backbone.model_dim;
    let pooled: Mat = oracle_encode(model, task, tokens).chunks(d).map(<[f64]>::to_vec).collect();
    linear(
        &pooled,
        &matrix(model, &format!("head{task}.weight")),
        &vector(model, &format!("head{task}.bias")),
    )
    .concat()
}

/// Overwrites every adapter tensor with seeded uniform values so identities
/// are exercised away from the zero initialization.
pub fn randomize_adapters(model: &mut AdaptedModel, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Adapter)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in model.store.tensor_mut(id).values_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Small model description shared by the property tests.
pub fn model_config(
    mode: structadapt::model::Mode,
    tasks: usize,
    (d, r, layers, k, seq_len): (usize, usize, usize, usize, usize),
    seed: u64,
) -> structadapt::model::ModelConfig {
    structadapt::model::ModelConfig {
        backbone: structadapt::backbone::BackboneConfig {
            vocab_size: 20,
            model_dim: d,
            num_layers: layers,
            seq_len,
            task_classes: (0..tasks).map(|t| 2 + t % 2).collect(),
            seed: seed.wrapping_add(1000),
        },
        mode,
        rank: r,
        pool_size: k,
        adapter_bias: true,
        single_insertion_layer: false,
        seed,
    }
}

/// `n` sequences of seeded tokens below 20.
pub fn tokens(n: usize, seq_len: usize, seed: u64) -> Vec<u32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n * seq_len).map(|_| rng.random_range(0..20)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
