//! Frozen single-head pre-norm transformer encoder with per-task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub seq_len: usize,
    /// Class count of each task head.
    pub task_classes: Vec<usize>,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size must be >= 4, got {}", self.vocab_size)));
        }
        if self.model_dim < 4 || self.model_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model_dim must be even and >= 4, got {}",
                self.model_dim
            )));
        }
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!("seq_len must be >= 2, got {}", self.seq_len)));
        }
        if self.task_classes.is_empty() {
            return Err(Error::Config("at least one task head is required".into()));
        }
        if let Some(c) = self.task_classes.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!("a task head needs >= 2 classes, got {c}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

impl LayerWeights {
    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o,
            self.w_1, self.b_1, self.w_2, self.b_2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

/// Handles to the encoder and head tensors held in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embedding: ParamId,
    pub layers: Vec<LayerWeights>,
    pub heads: Vec<ClassifierHead>,
}

impl Backbone {
    /// Seeded Gaussian initialization. Encoder tensors come out frozen; the
    /// classifier heads stay trainable.
    pub fn build(config: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let hidden = FFN_EXPANSION * d;
        let mut frozen = |name: String, shape: &[usize], std: f64, store: &mut ParamStore| -> Result<ParamId> {
            let t = if std > 0.0 {
                Tensor::randn(shape, std, &mut rng)?
            } else {
                Tensor::zeros(shape)?
            };
            Ok(store.insert(name, ParamKind::Backbone, t))
        };

        let embedding = frozen("backbone.embedding".into(), &[config.vocab_size, d], INIT_STD, store)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("backbone.layer{l}.{s}");
            layers.push(LayerWeights {
                w_q: frozen(p("w_q"), &[d, d], INIT_STD, store)?,
                b_q: frozen(p("b_q"), &[d], 0.0, store)?,
                w_k: frozen(p("w_k"), &[d, d], INIT_STD, store)?,
                b_k: frozen(p("b_k"), &[d], 0.0, store)?,
                w_v: frozen(p("w_v"), &[d, d], INIT_STD, store)?,
                b_v: frozen(p("b_v"), &[d], 0.0, store)?,
                w_o: frozen(p("w_o"), &[d, d], INIT_STD, store)?,
                b_o: frozen(p("b_o"), &[d], 0.0, store)?,
                w_1: frozen(p("w_1"), &[d, hidden], INIT_STD, store)?,
                b_1: frozen(p("b_1"), &[hidden], 0.0, store)?,
                w_2: frozen(p("w_2"), &[hidden, d], INIT_STD, store)?,
                b_2: frozen(p("b_2"), &[d], 0.0, store)?,
            });
        }
        let mut heads = Vec::with_capacity(config.task_classes.len());
        for (t, &classes) in config.task_classes.iter().enumerate() {
            let weight = Tensor::randn(&[d, classes], INIT_STD, &mut rng)?.with_requires_grad(true);
            let bias = Tensor::zeros(&[classes])?.with_requires_grad(true);
            heads.push(ClassifierHead {
                weight: store.insert(format!("head{t}.weight"), ParamKind::Head { task: t }, weight),
                bias: store.insert(format!("head{t}.bias"), ParamKind::Head { task: t }, bias),
                classes,
            });
        }
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            heads,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Element count of the frozen encoder (heads excluded).
    pub fn param_count(&self, store: &ParamStore) -> usize {
        let layer: usize = self
            .layers
            .iter()
            .flat_map(|l| l.ids())
            .map(|id| store.tensor(id).numel())
            .sum();
        store.tensor(self.embedding).numel() + layer
    }

    pub fn head_param_count(&self, store: &ParamStore) -> usize {
        self.heads
            .iter()
            .map(|h| store.tensor(h.weight).numel() + store.tensor(h.bias).numel())
            .sum()
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.embedding)
            .chain(self.layers.iter().flat_map(|l| l.ids()))
            .collect()
    }

    /// Embeds a flattened `[n × S]` token matrix into `[n·S × d]` rows.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[u32]) -> Result<Var> {
        let vocab = self.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Vocab { id, vocab });
        }
        if tokens.is_empty() || tokens.len() % self.config.seq_len != 0 {
            return Err(Error::Contract(format!(
                "{} tokens are not a whole number of length-{} sequences",
                tokens.len(),
                self.config.seq_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.param(store, self.embedding);
        g.gather_rows(table, &ids)
    }

    /// One block on `[n·S × d]` hidden rows: pre-norm attention and FFN,
    /// each with a residual connection. Attention is restricted to each
    /// length-`S` block of rows.
    pub fn layer_forward(&self, g: &mut Graph, store: &ParamStore, layer: usize, h: Var) -> Result<Var> {
        let Some(w) = self.layers.get(layer) else {
            return Err(Error::LayerIndex {
                index: layer,
                layers: self.layers.len(),
            });
        };
        let d = self.config.model_dim;
        let s = self.config.seq_len;
        let shape = g.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] % s != 0 {
            return Err(Error::shape("layer_forward", &shape, &[s, d]));
        }
        let vars = w.ids().map(|id| g.param(store, id));
        block_forward(g, h, &vars, s)
    }

    /// Embeds, runs every layer, applies `after_layer(l, h)` to each layer
    /// output, normalizes each position and mean-pools to `[n × d]`.
    pub fn encode<F>(&self, g: &mut Graph, store: &ParamStore, tokens: &[u32], mut after_layer: F) -> Result<Var>
    where
        F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
    {
        let mut h = self.embed(g, store, tokens)?;
        for l in 0..self.layers.len() {
            h = self.layer_forward(g, store, l, h)?;
            h = after_layer(g, l, h)?;
        }
        let h = g.layer_norm(h)?;
        g.segment_mean(h, self.config.seq_len)
    }

    pub fn encode_plain(&self, g: &mut Graph, store: &ParamStore, tokens: &[u32]) -> Result<Var> {
        self.encode(g, store, tokens, |_, _, h| Ok(h))
    }

    pub fn head_forward(&self, g: &mut Graph, store: &ParamStore, task: usize, pooled: Var) -> Result<Var> {
        let head = self.heads.get(task).ok_or(Error::UnknownTask(task))?;
        let w = g.param(store, head.weight);
        let b = g.param(store, head.bias);
        linear(g, pooled, w, b)
    }
}

/// `x · w + b`
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = t.matmul(x, w)?;
    t.add_bias(y, b)
}

/// Pre-norm attention and FFN sub-blocks with residuals on `[n·S × d]`
/// rows. `w` follows [`LayerWeights::ids`] order. Attention stays within
/// each length-`seq_len` block of rows.
pub fn block_forward(t: &mut Tape, h: Var, w: &[Var; 12], seq_len: usize) -> Result<Var> {
    let [w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, w_1, b_1, w_2, b_2] = *w;
    let shape = t.shape(h).to_vec();
    let d = t.shape(w_q)[0];
    if shape.len() != 2 || shape[1] != d || shape[0] % seq_len != 0 {
        return Err(Error::shape("block_forward", &shape, &[seq_len, d]));
    }
    let rows = shape[0];

    let x = t.layer_norm(h)?;
    let q = linear(t, x, w_q, b_q)?;
    let k = linear(t, x, w_k, b_k)?;
    let v = linear(t, x, w_v, b_v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(rows / seq_len);
    for start in (0..rows).step_by(seq_len) {
        let qs = t.slice_rows(q, start, seq_len)?;
        let ks = t.slice_rows(k, start, seq_len)?;
        let vs = t.slice_rows(v, start, seq_len)?;
        let kt = t.transpose(ks)?;
        let scores = t.matmul(qs, kt)?;
        let scores = t.scale(scores, scale)?;
        let probs = t.softmax_rows(scores)?;
        heads.push(t.matmul(probs, vs)?);
    }
    let attn = t.concat_rows(&heads)?;
    let attn = linear(t, attn, w_o, b_o)?;
    let h = t.add(h, attn)?;

    let x = t.layer_norm(h)?;
    let f = linear(t, x, w_1, b_1)?;
    let f = t.gelu(f)?;
    let f = linear(t, f, w_2, b_2)?;
    t.add(h, f)
}
