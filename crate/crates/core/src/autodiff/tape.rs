//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! the node vector is always in topological order and `backward` is a single
//! reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{dims2, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

// Sigmoid outputs are clamped into the open unit interval.
const SIGMOID_MIN: f64 = f64::MIN_POSITIVE;
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    AddBias,
    Affine,
    MulScalar,
    Select,
    Sigmoid,
    Gelu,
    LayerNorm,
    SoftmaxRows,
    SliceRows,
    ConcatRows,
    GatherRows,
    SegmentMean,
    Sum,
    Mean,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Affine,
        OpKind::MulScalar,
        OpKind::Select,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::SoftmaxRows,
        OpKind::SliceRows,
        OpKind::ConcatRows,
        OpKind::GatherRows,
        OpKind::SegmentMean,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Affine => "affine",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Select => "select",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::SegmentMean => "segment_mean",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine { x: Var, scale: f64 },
    MulScalar { x: Var, s: Var },
    Select { x: Var, index: usize },
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    SegmentMean { x: Var, segment: usize },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Affine { .. } => OpKind::Affine,
            Op::MulScalar { .. } => OpKind::MulScalar,
            Op::Select { .. } => OpKind::Select,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Gelu(_) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations and their cached intermediates.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

/// Numerically stable logistic function, clamped into `(0, 1)`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_MIN, SIGMOID_MAX)
}

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every gradient produced by operations of `kind` by 1.5.
    /// Used only as a negative control for gradient checking.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it is differentiable iff the tensor is.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(&Tensor::new(shape, values)?))
    }

    pub fn variable(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(&Tensor::new(shape, values)?.with_requires_grad(true)))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        Tensor::new(&node.shape, node.value.clone()).expect("tape nodes have valid shapes")
    }

    /// Gradient computed by the last `backward`, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        let (m, n) = dims2(sx);
        let bias_ok = sx.len() == 2 && dims2(sb) == (1, n);
        if !bias_ok {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(vec![m, n], out, rg, Op::AddBias(x, bias)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Affine { x, scale }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|v| c * v).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::MulScalar { x, s }))
    }

    /// Picks element `index` (row-major) as a one-element node.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let numel = self.value(x).len();
        if index >= numel {
            return Err(Error::shape("select", self.shape(x), &[index]));
        }
        let out = vec![self.value(x)[index]];
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], out, rg, Op::Select { x, index }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Sigmoid(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Gelu(x)))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for (row, orow) in v.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, x) in orow.iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::LayerNorm { x, inv_std }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::SoftmaxRows(x)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if len == 0 || start + len > m || self.shape(x).len() != 2 {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, n], out, rg, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows needs at least one input".into()));
        };
        let (_, n) = dims2(self.shape(first));
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p));
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, n], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.shape(table));
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", self.shape(table), &[bad]));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table]);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), n], out, rg, op))
    }

    /// Mean over consecutive blocks of `segment` rows: `[k·segment × n] → [k × n]`.
    pub fn segment_mean(&mut self, x: Var, segment: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if segment == 0 || m % segment != 0 {
            return Err(Error::shape("segment_mean", self.shape(x), &[segment]));
        }
        let k = m / segment;
        let v = self.value(x);
        let mut out = vec![0.0; k * n];
        for (block, orow) in v.chunks(segment * n).zip(out.chunks_mut(n)) {
            for row in block.chunks(n) {
                for (o, x) in orow.iter_mut().zip(row) {
                    *o += x;
                }
            }
            for o in orow.iter_mut() {
                *o /= segment as f64;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![k, n], out, rg, Op::SegmentMean { x, segment }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = vec![self.value(x).iter().sum()];
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], out, rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = vec![v.iter().sum::<f64>() / v.len() as f64];
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], out, rg, Op::Mean(x)))
    }

    /// Mean softmax cross-entropy of `logits[n×C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.shape(logits));
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for ((row, prow), &label) in v.chunks(c).zip(probs.chunks_mut(c)).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[label];
            for (p, z) in prow.iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss / n as f64], rg, op))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// differentiable node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let Tape {
            nodes,
            grads,
            fault,
        } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if *fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            propagate(nodes, grads, i, &g);
            if *fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x /= 1.5);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Accumulation target for input `v`, or `None` if it is not differentiable.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(&nodes[a.0].shape);
            let n = node.shape[1];
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = dC · Bᵀ
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = Aᵀ · dC
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let arp = av[r * k + p];
                        if arp == 0.0 {
                            continue;
                        }
                        for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += arp * x;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = dims2(&nodes[x.0].shape);
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
        }
        Op::Mul(a, b) => {
            let bv = &nodes[b.0].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += x * y;
                }
            }
            let av = &nodes[a.0].value;
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                    *o += x * y;
                }
            }
        }
        Op::AddBias(x, bias) => {
            let n = node.shape[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::Affine { x, scale } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += scale * v);
            }
        }
        Op::MulScalar { x, s } => {
            let c = nodes[s.0].value[0];
            let xv = &nodes[x.0].value;
            if let Some(gs) = slot(nodes, grads, *s) {
                gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
        }
        Op::Select { x, index } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx[*index] += g[0];
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, v), s) in gx.iter_mut().zip(g).zip(y) {
                    *o += v * s * (1.0 - s);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = &nodes[x.0].value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *o += v * gelu_derivative(xi);
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let n = node.shape[dims_last(&node.shape)];
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gy = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        gx[r * n + c] += inv * (gy[c] - mean_g - yr[c] * mean_gy);
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let n = node.shape[dims_last(&node.shape)];
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let n = node.shape[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                let dst = &mut gx[start * n..start * n + g.len()];
                dst.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(o, v)| *o += v);
                }
                offset += len;
            }
        }
        Op::GatherRows { table, ids } => {
            let n = node.shape[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (row, &id) in g.chunks(n).zip(ids) {
                    gt[id * n..(id + 1) * n]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::SegmentMean { x, segment } => {
            let n = node.shape[1];
            let inv = 1.0 / *segment as f64;
            if let Some(gx) = slot(nodes, grads, *x) {
                for (block, grow) in gx.chunks_mut(segment * n).zip(g.chunks(n)) {
                    for row in block.chunks_mut(n) {
                        row.iter_mut().zip(grow).for_each(|(o, v)| *o += v * inv);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean(x) => {
            let inv = 1.0 / nodes[x.0].value.len() as f64;
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|o| *o += g[0] * inv);
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let (n, c) = dims2(&nodes[logits.0].shape);
            let scale = g[0] / n as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for k in 0..c {
                        let onehot = if k == label { 1.0 } else { 0.0 };
                        gl[r * c + k] += scale * (probs[r * c + k] - onehot);
                    }
                }
            }
        }
    }
}

fn dims_last(shape: &[usize]) -> usize {
    shape.len() - 1
}
