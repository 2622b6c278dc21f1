//! Finite-difference checks over every tape op and the model's composite
//! blocks, on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapter_forward, gated_layer_forward, total_loss, AdapterVars};
use crate::autodiff::{grad_check_with_fault, OpKind, Tape, Var};
use crate::backbone::block_forward;
use crate::error::Result;
use crate::router::routed_forward;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub instances: usize,
    /// Only run cases whose name contains this string.
    pub filter: Option<String>,
    /// Corrupt this op's backward rule (negative control).
    pub fault: Option<OpKind>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-4,
            instances: 20,
            filter: None,
            fault: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Parameter and element index of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Instance {
    params: Vec<Tensor>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, scale))
        .expect("valid shape")
        .with_requires_grad(true)
}

/// Random linear functional `Σ x ⊙ R`, reducing any output to a scalar.
fn projector(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> impl Fn(&mut Tape, Var) -> Result<Var> + 'static {
    let weights = uniform(rng, shape.iter().product(), 1.0);
    move |t: &mut Tape, x: Var| {
        let r = t.constant(&shape, weights.clone())?;
        let p = t.mul(x, r)?;
        t.sum(p)
    }
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn unary(rng: &mut ChaCha8Rng, scale: f64, op: fn(&mut Tape, Var) -> Result<Var>) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 5));
    let proj = projector(rng, vec![m, n]);
    Instance {
        params: vec![param(rng, &[m, n], scale)],
        build: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            proj(t, y)
        }),
    }
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let proj = projector(rng, vec![m, n]);
    Instance {
        params: vec![param(rng, &[m, n], 1.0), param(rng, &[m, n], 1.0)],
        build: Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            proj(t, y)
        }),
    }
}

fn adapter_params(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Vec<Tensor> {
    vec![
        param(rng, &[d, r], 0.8),
        param(rng, &[r], 0.5),
        param(rng, &[r, d], 0.8),
        param(rng, &[d], 0.5),
    ]
}

fn adapter_vars(v: &[Var]) -> AdapterVars {
    AdapterVars {
        w_down: v[0],
        b_down: Some(v[1]),
        w_up: v[2],
        b_up: Some(v[3]),
    }
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Instance {
    match kind {
        OpKind::Leaf => unary(rng, 1.0, |_, x| Ok(x)),
        OpKind::MatMul => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let proj = projector(rng, vec![m, n]);
            Instance {
                params: vec![param(rng, &[m, k], 1.0), param(rng, &[k, n], 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    proj(t, y)
                }),
            }
        }
        OpKind::Transpose => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let proj = projector(rng, vec![n, m]);
            Instance {
                params: vec![param(rng, &[m, n], 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.transpose(v[0])?;
                    proj(t, y)
                }),
            }
        }
        OpKind::Add => binary(rng, |t, a, b| t.add(a, b)),
        // Second product reuses `a`, exercising accumulation.
        OpKind::Mul => binary(rng, |t, a, b| {
            let ab = t.mul(a, b)?;
            t.mul(ab, a)
        }),
        OpKind::AddBias => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let proj = projector(rng, vec![m, n]);
            Instance {
                params: vec![param(rng, &[m, n], 1.0), param(rng, &[n], 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.add_bias(v[0], v[1])?;
                    proj(t, y)
                }),
            }
        }
        OpKind::Affine => {
            let (scale, shift) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            let mut inst = unary(rng, 1.0, |_, x| Ok(x));
            let inner = inst.build;
            inst.build = Box::new(move |t, v| {
                let y = t.affine(v[0], scale, shift)?;
                inner(t, &[y])
            });
            inst
        }
        OpKind::MulScalar => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let proj = projector(rng, vec![m, n]);
            Instance {
                params: vec![param(rng, &[m, n], 1.0), param(rng, &[1], 1.5)],
                build: Box::new(move |t, v| {
                    let y = t.mul_scalar(v[0], v[1])?;
                    proj(t, y)
                }),
            }
        }
        OpKind::Select => {
            let n = dim(rng, 1, 6);
            let index = rng.random_range(0..n);
            let c = rng.random_range(0.5..2.0);
            Instance {
                params: vec![param(rng, &[n], 1.0)],
                build: Box::new(move |t, v| {
                    let s = t.select(v[0], index)?;
                    let s2 = t.mul(s, s)?;
                    let y = t.affine(s2, c, 0.0)?;
                    t.sum(y)
                }),
            }
        }
        OpKind::Sigmoid => unary(rng, 3.0, |t, x| t.sigmoid(x)),
        OpKind::Gelu => unary(rng, 3.0, |t, x| t.gelu(x)),
        OpKind::LayerNorm => unary(rng, 2.0, |t, x| t.layer_norm(x)),
        OpKind::SoftmaxRows => unary(rng, 2.0, |t, x| t.softmax_rows(x)),
        OpKind::SliceRows => {
            let (m, n) = (dim(rng, 2, 5), dim(rng, 1, 4));
            let start = rng.random_range(0..m);
            let len = rng.random_range(1..=m - start);
            let proj = projector(rng, vec![len, n]);
            Instance {
                params: vec![param(rng, &[m, n], 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.slice_rows(v[0], start, len)?;
                    proj(t, y)
                }),
            }
        }
        OpKind::ConcatRows => {
            let (m1, m2, n) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
            let proj = projector(rng, vec![m1 + m2 + m1, n]);
            Instance {
                params: vec![param(rng, &[m1, n], 1.0), param(rng, &[m2, n], 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.concat_rows(&[v[0], v[1], v[0]])?;
                    proj(t, y)
                }),
            }
        }
        OpKind::GatherRows => {
            let (rows, n, count) = (dim(rng, 2, 6), dim(rng, 1, 4), dim(rng, 1, 8));
            let ids: Vec<usize> = (0..count).map(|_| rng.random_range(0..rows)).collect();
            let proj = projector(rng, vec![count, n]);
            Instance {
                params: vec![param(rng, &[rows, n], 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.gather_rows(v[0], &ids)?;
                    proj(t, y)
                }),
            }
        }
        OpKind::SegmentMean => {
            let (seg, groups, n) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 4));
            let proj = projector(rng, vec![groups, n]);
            Instance {
                params: vec![param(rng, &[seg * groups, n], 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.segment_mean(v[0], seg)?;
                    proj(t, y)
                }),
            }
        }
        OpKind::Sum => {
            let mut inst = unary(rng, 1.0, |_, x| Ok(x));
            inst.build = Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            });
            inst
        }
        OpKind::Mean => {
            let mut inst = unary(rng, 1.0, |_, x| Ok(x));
            inst.build = Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.mean(sq)
            });
            inst
        }
        OpKind::SoftmaxCrossEntropy => {
            let (m, c) = (dim(rng, 1, 5), dim(rng, 2, 4));
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            Instance {
                params: vec![param(rng, &[m, c], 2.0)],
                build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            }
        }
    }
}

fn adapter_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d) = (dim(rng, 1, 4), 2 * dim(rng, 1, 3));
    let r = dim(rng, 1, d / 2);
    let proj = projector(rng, vec![n, d]);
    let mut params = vec![param(rng, &[n, d], 1.0)];
    params.extend(adapter_params(rng, d, r));
    Instance {
        params,
        build: Box::new(move |t, v| {
            let y = adapter_forward(t, &adapter_vars(&v[1..]), v[0])?;
            proj(t, y)
        }),
    }
}

fn gated_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d) = (dim(rng, 1, 4), 2 * dim(rng, 1, 3));
    let r = dim(rng, 1, d / 2);
    let proj = projector(rng, vec![n, d]);
    let mut params = vec![param(rng, &[1], 3.0), param(rng, &[n, d], 1.0)];
    params.extend(adapter_params(rng, d, r));
    Instance {
        params,
        build: Box::new(move |t, v| {
            let y = gated_layer_forward(t, v[0], v[1], &adapter_vars(&v[2..]))?;
            proj(t, y)
        }),
    }
}

fn total_loss_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d, c, layers) = (dim(rng, 1, 4), dim(rng, 2, 4), dim(rng, 2, 3), dim(rng, 1, 4));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let lambda = rng.random_range(0.1..3.0);
    Instance {
        params: vec![param(rng, &[n, d], 1.0), param(rng, &[d, c], 1.0), param(rng, &[layers], 3.0)],
        build: Box::new(move |t, v| {
            let logits = t.matmul(v[0], v[1])?;
            let task = t.softmax_cross_entropy(logits, &labels)?;
            total_loss(t, task, v[2], lambda)
        }),
    }
}

fn routed_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d, k) = (dim(rng, 1, 3), 2 * dim(rng, 1, 2), dim(rng, 1, 3));
    let r = dim(rng, 1, d / 2);
    let proj = projector(rng, vec![n, d]);
    let mut params = vec![param(rng, &[n, d], 1.0), param(rng, &[k], 3.0)];
    for _ in 0..k {
        params.extend(adapter_params(rng, d, r));
    }
    Instance {
        params,
        build: Box::new(move |t, v| {
            let pool: Vec<Option<AdapterVars>> = v[2..].chunks(4).map(|c| Some(adapter_vars(c))).collect();
            let gates = (0..k).map(|i| t.select(v[1], i)).collect::<Result<Vec<_>>>()?;
            let y = routed_forward(t, v[0], &pool, &gates)?;
            proj(t, y)
        }),
    }
}

fn block_case(rng: &mut ChaCha8Rng) -> Instance {
    let (d, s, seqs) = (4, dim(rng, 2, 3), dim(rng, 1, 2));
    let h = 4 * d;
    let proj = projector(rng, vec![s * seqs, d]);
    let mut params = vec![param(rng, &[s * seqs, d], 1.0)];
    // q, k, v, o projections, then the FFN pair.
    for _ in 0..4 {
        params.push(param(rng, &[d, d], 0.6));
        params.push(param(rng, &[d], 0.3));
    }
    params.push(param(rng, &[d, h], 0.6));
    params.push(param(rng, &[h], 0.3));
    params.push(param(rng, &[h, d], 0.6));
    params.push(param(rng, &[d], 0.3));
    Instance {
        params,
        build: Box::new(move |t, v| {
            let w: [Var; 12] = v[1..13].try_into().expect("twelve block weights");
            let y = block_forward(t, v[0], &w, s)?;
            proj(t, y)
        }),
    }
}

fn quadratic_case(rng: &mut ChaCha8Rng) -> Instance {
    let n = dim(rng, 1, 6);
    let proj = projector(rng, vec![n]);
    Instance {
        params: vec![param(rng, &[n], 2.0)],
        build: Box::new(move |t, v| {
            let sq = t.mul(v[0], v[0])?;
            proj(t, sq)
        }),
    }
}

type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Instance>;

fn cases() -> Vec<(&'static str, Maker)> {
    let mut out: Vec<(&'static str, Maker)> = OpKind::ALL
        .into_iter()
        .map(|k| (k.name(), Box::new(move |rng: &mut ChaCha8Rng| op_case(k, rng)) as Maker))
        .collect();
    out.push(("adapter", Box::new(adapter_case)));
    out.push(("gated_layer", Box::new(gated_case)));
    out.push(("total_loss", Box::new(total_loss_case)));
    out.push(("routed_forward", Box::new(routed_case)));
    out.push(("encoder_block", Box::new(block_case)));
    out.push(("quadratic", Box::new(quadratic_case)));
    out
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for (ci, (name, make)) in cases().into_iter().enumerate() {
        if opts.filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(ci as u64));
        let mut max_rel_error = 0.0f64;
        let mut worst = None;
        for _ in 0..opts.instances {
            let inst = make(&mut rng);
            let build = &inst.build;
            let report = grad_check_with_fault(
                |t: &mut Tape, v: &[Var]| build(t, v),
                &inst.params,
                opts.epsilon,
                opts.tolerance,
                opts.fault,
            )?;
            if report.max_rel_error >= max_rel_error {
                max_rel_error = report.max_rel_error;
                worst = report.worst().map(|e| (e.param, e.index));
            }
        }
        results.push(CaseResult {
            name,
            instances: opts.instances,
            max_rel_error,
            worst,
            passed: max_rel_error <= opts.tolerance,
        });
    }
    Ok(results)
}
