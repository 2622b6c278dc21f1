//! Bottleneck adapters, sigmoid insertion gates, the structural sparsity
//! penalty and gate discretization.

use rand::Rng;

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::backbone::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Handles to one adapter's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w_down: ParamId,
    pub b_down: Option<ParamId>,
    pub w_up: ParamId,
    pub b_up: Option<ParamId>,
    pub dim: usize,
    pub rank: usize,
}

/// An adapter's tensors bound onto a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Option<Var>,
    pub w_up: Var,
    pub b_up: Option<Var>,
}

pub fn validate_rank(dim: usize, rank: usize) -> Result<()> {
    if rank == 0 || 2 * rank > dim {
        return Err(Error::Config(format!(
            "adapter rank must satisfy 1 <= r <= d/2, got r = {rank}, d = {dim}"
        )));
    }
    Ok(())
}

/// `2·d·r`, plus `r + d` when the adapter carries biases.
pub fn adapter_param_count(dim: usize, rank: usize, bias: bool) -> usize {
    2 * dim * rank + if bias { rank + dim } else { 0 }
}

impl AdapterParams {
    /// `W_down ~ N(0, 0.02²)`, `W_up = 0` and zero biases, so a fresh adapter
    /// is an exact identity.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rank: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        validate_rank(dim, rank)?;
        let mut add = |name: &str, t: Tensor| {
            store.insert(format!("{prefix}.{name}"), ParamKind::Adapter, t.with_requires_grad(true))
        };
        let w_down = add("w_down", Tensor::randn(&[dim, rank], INIT_STD, rng)?);
        let b_down = bias.then(|| Tensor::zeros(&[rank])).transpose()?.map(|t| add("b_down", t));
        let w_up = add("w_up", Tensor::zeros(&[rank, dim])?);
        let b_up = bias.then(|| Tensor::zeros(&[dim])).transpose()?.map(|t| add("b_up", t));
        Ok(Self {
            w_down,
            b_down,
            w_up,
            b_up,
            dim,
            rank,
        })
    }

    pub fn has_bias(&self) -> bool {
        self.b_down.is_some()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [Some(self.w_down), self.b_down, Some(self.w_up), self.b_up]
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn param_count(&self) -> usize {
        adapter_param_count(self.dim, self.rank, self.has_bias())
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> AdapterVars {
        AdapterVars {
            w_down: g.param(store, self.w_down),
            b_down: self.b_down.map(|id| g.param(store, id)),
            w_up: g.param(store, self.w_up),
            b_up: self.b_up.map(|id| g.param(store, id)),
        }
    }

    pub fn remove_from(&self, store: &mut ParamStore) {
        for id in self.ids() {
            store.remove(id);
        }
    }
}

/// Residual contribution `f(h·W_down + b_down)·W_up + b_up`, without the skip.
pub fn adapter_delta(t: &mut Tape, a: &AdapterVars, h: Var) -> Result<Var> {
    let width = t.shape(h).last().copied().unwrap_or(0);
    let dim = t.shape(a.w_down)[0];
    if width != dim || t.shape(h).len() != 2 {
        return Err(Error::shape("adapter_forward", t.shape(h), t.shape(a.w_down)));
    }
    let mut z = t.matmul(h, a.w_down)?;
    if let Some(b) = a.b_down {
        z = t.add_bias(z, b)?;
    }
    let z = t.gelu(z)?;
    let mut up = t.matmul(z, a.w_up)?;
    if let Some(b) = a.b_up {
        up = t.add_bias(up, b)?;
    }
    Ok(up)
}

/// `h + adapter_delta(h)`
pub fn adapter_forward(t: &mut Tape, a: &AdapterVars, h: Var) -> Result<Var> {
    let delta = adapter_delta(t, a, h)?;
    t.add(h, delta)
}

/// `(1 − σ(a))·h + σ(a)·Adapter(h)` for a one-element gate logit `a`.
pub fn gated_layer_forward(t: &mut Tape, gate_logit: Var, h: Var, a: &AdapterVars) -> Result<Var> {
    let adapted = adapter_forward(t, a, h)?;
    let s = t.sigmoid(gate_logit)?;
    let keep = t.affine(s, -1.0, 1.0)?;
    let skip = t.mul_scalar(h, keep)?;
    let through = t.mul_scalar(adapted, s)?;
    t.add(skip, through)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    Ok(())
}

/// `λ · Σ σ(a)` over every entry of `gate_logits`.
pub fn sparsity_penalty(t: &mut Tape, gate_logits: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let s = t.sigmoid(gate_logits)?;
    let total = t.sum(s)?;
    t.scale(total, lambda)
}

/// Task loss plus the sparsity penalty.
pub fn total_loss(t: &mut Tape, task_loss: Var, gate_logits: Var, lambda: f64) -> Result<Var> {
    let penalty = sparsity_penalty(t, gate_logits, lambda)?;
    t.add(task_loss, penalty)
}

/// Structural control variables, one logit per insertion point.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub logits: ParamId,
    pub len: usize,
}

impl GateVector {
    pub fn init(store: &mut ParamStore, name: &str, task: usize, shape: &[usize], value: f64) -> Result<Self> {
        let t = Tensor::filled(shape, value)?.with_requires_grad(true);
        let len = t.numel();
        Ok(Self {
            logits: store.insert(name, ParamKind::Gate { task }, t),
            len,
        })
    }

    pub fn values<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.tensor(self.logits).values()
    }

    pub fn activations(&self, store: &ParamStore) -> Vec<f64> {
        self.values(store).iter().map(|&a| sigmoid_scalar(a)).collect()
    }
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// Indices whose gate activation is at least `tau`; ties count as active.
pub fn discretize(gate_logits: &[f64], tau: f64) -> Result<Vec<usize>> {
    check_tau(tau)?;
    Ok(gate_logits
        .iter()
        .enumerate()
        .filter(|(_, &a)| sigmoid_scalar(a) >= tau)
        .map(|(i, _)| i)
        .collect())
}

/// Adapter position: insertion layer and pool slot (always 0 for a gated stack).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AdapterSlot {
    pub layer: usize,
    pub slot: usize,
}

/// `σ` values of one task's gates, `rows × cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub task: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub tau: f64,
    pub gates: Vec<GateMatrix>,
    pub active: Vec<AdapterSlot>,
    pub adapter_params: usize,
    pub gate_params: usize,
    pub head_params: usize,
    pub trainable: usize,
    pub backbone_params: usize,
    pub total: usize,
    pub ratio: f64,
}

impl StructureReport {
    pub fn mean_gate(&self) -> f64 {
        let all: Vec<f64> = self.gates.iter().flat_map(|g| g.values.iter().copied()).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}
