//! Per-task routing over a shared pool of adapters.

use rand::Rng;

use crate::adapter::{adapter_delta, sparsity_penalty, AdapterParams, AdapterVars, GateVector};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};

/// `K` adapters inserted after one encoder layer. Pruned members become `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPool {
    pub layer: usize,
    pub slots: Vec<Option<AdapterParams>>,
}

impl AdapterPool {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layer: usize,
        k: usize,
        dim: usize,
        rank: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("pool_size must be >= 1".into()));
        }
        let slots = (0..k)
            .map(|i| AdapterParams::init(store, &format!("pool{layer}.adapter{i}"), dim, rank, bias, rng).map(Some))
            .collect::<Result<_>>()?;
        Ok(Self { layer, slots })
    }

    pub fn size(&self) -> usize {
        self.slots.len()
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Vec<Option<AdapterVars>> {
        self.slots
            .iter()
            .map(|s| s.as_ref().map(|a| a.bind(g, store)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().flatten().map(AdapterParams::param_count).sum()
    }
}

/// Gate logits of one task, `[rows × K]` with one row per insertion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGates {
    pub task: usize,
    pub rows: usize,
    pub k: usize,
    pub gates: GateVector,
}

impl TaskGates {
    pub fn init(store: &mut ParamStore, task: usize, rows: usize, k: usize, value: f64) -> Result<Self> {
        let gates = GateVector::init(store, &format!("gates.task{task}"), task, &[rows, k], value)?;
        Ok(Self { task, rows, k, gates })
    }

    /// One-element logit views of a row of the bound gate tensor.
    pub fn row(&self, t: &mut Tape, bound: Var, row: usize) -> Result<Vec<Var>> {
        (0..self.k).map(|k| t.select(bound, row * self.k + k)).collect()
    }
}

/// `h + Σ_k σ(a_k)·Δ_k(h)`, where `Δ_k` is pool member `k`'s residual delta.
/// Members that were pruned contribute nothing.
pub fn routed_forward(t: &mut Tape, h: Var, pool: &[Option<AdapterVars>], gates_row: &[Var]) -> Result<Var> {
    if pool.len() != gates_row.len() {
        return Err(Error::shape("routed_forward", &[pool.len()], &[gates_row.len()]));
    }
    let mut out = h;
    for (adapter, &logit) in pool.iter().zip(gates_row) {
        let Some(a) = adapter else { continue };
        let delta = adapter_delta(t, a, h)?;
        let s = t.sigmoid(logit)?;
        let weighted = t.mul_scalar(delta, s)?;
        out = t.add(out, weighted)?;
    }
    Ok(out)
}

/// Sparsity penalty over the gates of the task whose batch is being trained.
pub fn multitask_penalty(t: &mut Tape, task_gates: Var, lambda: f64) -> Result<Var> {
    sparsity_penalty(t, task_gates, lambda)
}
