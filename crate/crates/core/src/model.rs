//! A frozen backbone with either a gated adapter stack (one adapter per
//! layer) or per-task routing over shared adapter pools.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    adapter_delta, adapter_forward, check_lambda, check_tau, gated_layer_forward, sparsity_penalty, AdapterParams,
    AdapterSlot, GateMatrix, GateVector, StructureReport,
};
use crate::autodiff::{sigmoid_scalar, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::TaskBatch;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::router::{multitask_penalty, routed_forward, AdapterPool, TaskGates};

/// Logit used to pin a gate fully on or off.
pub const SATURATED: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleTask,
    Multitask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mode: Mode,
    pub rank: usize,
    /// Adapters per pool (multitask mode only).
    pub pool_size: usize,
    pub adapter_bias: bool,
    /// Route only after the last layer instead of after every layer.
    pub single_insertion_layer: bool,
    /// Seed for adapter and gate initialization.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    Gated {
        adapters: Vec<Option<AdapterParams>>,
        gates: GateVector,
    },
    Routed {
        pools: Vec<AdapterPool>,
        gates: Vec<TaskGates>,
    },
}

/// Loss terms of one forward pass, all on the same graph.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub logits: Var,
    pub task_loss: Var,
    pub penalty: Var,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub structure: Structure,
    /// Discretization threshold once the model runs with hard structure.
    pub hard: Option<f64>,
}

impl AdaptedModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&config.backbone, &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, r, layers) = (config.backbone.model_dim, config.rank, config.backbone.num_layers);
        let structure = match config.mode {
            Mode::SingleTask => {
                if config.backbone.task_classes.len() != 1 {
                    return Err(Error::Config(format!(
                        "single_task mode needs exactly one task, got {}",
                        config.backbone.task_classes.len()
                    )));
                }
                let adapters = (0..layers)
                    .map(|l| {
                        AdapterParams::init(&mut store, &format!("adapter{l}"), d, r, config.adapter_bias, &mut rng)
                            .map(Some)
                    })
                    .collect::<Result<_>>()?;
                let gates = GateVector::init(&mut store, "gates", 0, &[layers], 0.0)?;
                Structure::Gated { adapters, gates }
            }
            Mode::Multitask => {
                let insertion: Vec<usize> = if config.single_insertion_layer {
                    vec![layers - 1]
                } else {
                    (0..layers).collect()
                };
                let pools = insertion
                    .iter()
                    .map(|&l| AdapterPool::init(&mut store, l, config.pool_size, d, r, config.adapter_bias, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let gates = (0..config.backbone.task_classes.len())
                    .map(|t| TaskGates::init(&mut store, t, pools.len(), config.pool_size, 0.0))
                    .collect::<Result<_>>()?;
                Structure::Routed { pools, gates }
            }
        };
        Ok(Self {
            config,
            store,
            backbone,
            structure,
            hard: None,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.backbone.heads.len()
    }

    pub fn num_classes(&self, task: usize) -> Result<usize> {
        self.backbone.heads.get(task).map(|h| h.classes).ok_or(Error::UnknownTask(task))
    }

    fn gate_vector(&self, task: usize) -> &GateVector {
        match &self.structure {
            Structure::Gated { gates, .. } => gates,
            Structure::Routed { gates, .. } => &gates[task].gates,
        }
    }

    /// Pooled `[n × d]` representation of the batch for `task`.
    pub fn encode(&self, g: &mut Graph, task: usize, tokens: &[u32]) -> Result<Var> {
        self.num_classes(task)?;
        let store = &self.store;
        let soft_gates = match self.hard {
            None => Some(g.param(store, self.gate_vector(task).logits)),
            Some(_) => None,
        };
        let logits = self.gate_vector(task).values(store).to_vec();
        let active = |i: usize, tau: f64| sigmoid_scalar(logits[i]) >= tau;
        match &self.structure {
            Structure::Gated { adapters, .. } => self.backbone.encode(g, store, tokens, |g, l, h| {
                let Some(a) = &adapters[l] else { return Ok(h) };
                match (self.hard, soft_gates) {
                    (Some(tau), _) if !active(l, tau) => Ok(h),
                    (Some(_), _) => {
                        let v = a.bind(g, store);
                        adapter_forward(g, &v, h)
                    }
                    (None, Some(gv)) => {
                        let v = a.bind(g, store);
                        let s = g.select(gv, l)?;
                        gated_layer_forward(g, s, h, &v)
                    }
                    (None, None) => unreachable!(),
                }
            }),
            Structure::Routed { pools, gates } => {
                let tg = &gates[task];
                self.backbone.encode(g, store, tokens, |g, l, h| {
                    let Some(row) = pools.iter().position(|p| p.layer == l) else {
                        return Ok(h);
                    };
                    let pool = pools[row].bind(g, store);
                    match (self.hard, soft_gates) {
                        (Some(tau), _) => {
                            let mut out = h;
                            for (k, a) in pool.iter().enumerate() {
                                if let Some(a) = a.filter(|_| active(row * tg.k + k, tau)) {
                                    let delta = adapter_delta(g, &a, h)?;
                                    out = g.add(out, delta)?;
                                }
                            }
                            Ok(out)
                        }
                        (None, Some(gv)) => {
                            let gates_row = tg.row(g, gv, row)?;
                            routed_forward(g, h, &pool, &gates_row)
                        }
                        (None, None) => unreachable!(),
                    }
                })
            }
        }
    }

    pub fn logits(&self, g: &mut Graph, task: usize, tokens: &[u32]) -> Result<Var> {
        let pooled = self.encode(g, task, tokens)?;
        self.backbone.head_forward(g, &self.store, task, pooled)
    }

    /// Logit values for a flattened token matrix, outside of any training step.
    pub fn predict_logits(&self, task: usize, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.logits(&mut g, task, tokens)?;
        Ok(g.value(v).to_vec())
    }

    /// Task cross-entropy plus `λ·Σσ` over the gates of the batch's task.
    /// With hard structure the gates are out of the graph and the penalty is 0.
    pub fn objective(&self, g: &mut Graph, batch: &TaskBatch, lambda: f64) -> Result<Objective> {
        check_lambda(lambda)?;
        let task = batch.task();
        let logits = self.logits(g, task, batch.tokens())?;
        let task_loss = g.softmax_cross_entropy(logits, batch.labels())?;
        let penalty = match self.hard {
            Some(_) => g.constant(&[1], vec![0.0])?,
            None => {
                let gv = g.param(&self.store, self.gate_vector(task).logits);
                match self.structure {
                    Structure::Gated { .. } => sparsity_penalty(g, gv, lambda)?,
                    Structure::Routed { .. } => multitask_penalty(g, gv, lambda)?,
                }
            }
        };
        let total = g.add(task_loss, penalty)?;
        Ok(Objective {
            logits,
            task_loss,
            penalty,
            total,
        })
    }

    /// `σ` of every gate, one matrix per task (a gated stack reports `L × 1`).
    pub fn gate_matrices(&self) -> Vec<GateMatrix> {
        match &self.structure {
            Structure::Gated { gates, .. } => vec![GateMatrix {
                task: 0,
                rows: gates.len,
                cols: 1,
                values: gates.activations(&self.store),
            }],
            Structure::Routed { gates, .. } => gates
                .iter()
                .map(|tg| GateMatrix {
                    task: tg.task,
                    rows: tg.rows,
                    cols: tg.k,
                    values: tg.gates.activations(&self.store),
                })
                .collect(),
        }
    }

    /// Present adapters whose gate reaches `tau`; a pool member counts as
    /// active when any task's gate for it does.
    pub fn active_slots(&self, tau: f64) -> Result<Vec<AdapterSlot>> {
        check_tau(tau)?;
        let on = |gates: &GateVector, i: usize| sigmoid_scalar(gates.values(&self.store)[i]) >= tau;
        Ok(match &self.structure {
            Structure::Gated { adapters, gates } => adapters
                .iter()
                .enumerate()
                .filter(|(l, a)| a.is_some() && on(gates, *l))
                .map(|(layer, _)| AdapterSlot { layer, slot: 0 })
                .collect(),
            Structure::Routed { pools, gates } => {
                let mut out = Vec::new();
                for (row, pool) in pools.iter().enumerate() {
                    for (k, a) in pool.slots.iter().enumerate() {
                        if a.is_some() && gates.iter().any(|tg| on(&tg.gates, row * tg.k + k)) {
                            out.push(AdapterSlot { layer: pool.layer, slot: k });
                        }
                    }
                }
                out
            }
        })
    }

    pub fn adapter_param_count(&self) -> usize {
        match &self.structure {
            Structure::Gated { adapters, .. } => adapters.iter().flatten().map(AdapterParams::param_count).sum(),
            Structure::Routed { pools, .. } => pools.iter().map(AdapterPool::param_count).sum(),
        }
    }

    pub fn gate_param_count(&self) -> usize {
        match &self.structure {
            Structure::Gated { gates, .. } => gates.len,
            Structure::Routed { gates, .. } => gates.iter().map(|g| g.gates.len).sum(),
        }
    }

    /// Counts for the model as it currently stands (use [`Self::discretized`]
    /// for the pruned structure).
    pub fn structure_report(&self, tau: f64) -> Result<StructureReport> {
        let active = self.active_slots(tau)?;
        let adapter_params = self.adapter_param_count();
        let gate_params = self.gate_param_count();
        let head_params = self.backbone.head_param_count(&self.store);
        let trainable = adapter_params + gate_params + head_params;
        let backbone_params = self.backbone.param_count(&self.store);
        let total = backbone_params + trainable;
        Ok(StructureReport {
            tau,
            gates: self.gate_matrices(),
            active,
            adapter_params,
            gate_params,
            head_params,
            trainable,
            backbone_params,
            total,
            ratio: trainable as f64 / total as f64,
        })
    }

    /// Drops every adapter that is not active at `tau` and switches to hard
    /// structure. Returns the number of adapters removed.
    pub fn prune(&mut self, tau: f64) -> Result<usize> {
        let keep = self.active_slots(tau)?;
        let mut removed = 0;
        let store = &mut self.store;
        let mut drop_slot = |slot: &mut Option<AdapterParams>, key: AdapterSlot| {
            if slot.is_some() && !keep.contains(&key) {
                slot.take().expect("checked").remove_from(store);
                removed += 1;
            }
        };
        match &mut self.structure {
            Structure::Gated { adapters, .. } => {
                for (layer, a) in adapters.iter_mut().enumerate() {
                    drop_slot(a, AdapterSlot { layer, slot: 0 });
                }
            }
            Structure::Routed { pools, .. } => {
                for pool in pools.iter_mut() {
                    let layer = pool.layer;
                    for (slot, a) in pool.slots.iter_mut().enumerate() {
                        drop_slot(a, AdapterSlot { layer, slot });
                    }
                }
            }
        }
        self.hard = Some(tau);
        Ok(removed)
    }

    pub fn discretized(&self, tau: f64) -> Result<Self> {
        let mut m = self.clone();
        m.prune(tau)?;
        Ok(m)
    }

    pub fn set_gate_logits(&mut self, value: f64) {
        let ids: Vec<_> = match &self.structure {
            Structure::Gated { gates, .. } => vec![gates.logits],
            Structure::Routed { gates, .. } => gates.iter().map(|g| g.gates.logits).collect(),
        };
        for id in ids {
            self.store.tensor_mut(id).values_mut().fill(value);
        }
    }

    /// Baseline without adapters: every gate pinned off and pruned away.
    pub fn gates_off(&self) -> Result<Self> {
        let mut m = self.clone();
        m.set_gate_logits(-SATURATED);
        m.prune(0.5)?;
        Ok(m)
    }

    /// Baseline with every adapter inserted at full weight.
    pub fn gates_on(&self) -> Result<Self> {
        let mut m = self.clone();
        m.set_gate_logits(SATURATED);
        m.hard = Some(0.5);
        Ok(m)
    }

    pub fn frozen_checksum(&self) -> String {
        self.store.frozen_checksum()
    }
}
