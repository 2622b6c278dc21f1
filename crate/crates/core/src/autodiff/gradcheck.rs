//! Central finite-difference validation of analytic gradients.

use super::tape::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One compared parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    /// Position of the tensor in the `params` slice.
    pub param: usize,
    /// Row-major element index inside that tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Entry with the largest relative error.
    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

pub fn grad_check<F>(build: F, params: &[Tensor], epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(build, params, epsilon, tolerance, None)
}

/// As [`grad_check`], with an optional corrupted backward rule on the
/// analytic pass.
pub fn grad_check_with_fault<F>(
    build: F,
    params: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let evaluate = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Contract("build function must return a scalar".into()));
        }
        Ok(tape.scalar(loss))
    };

    let first = evaluate(params)?;
    let second = evaluate(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut entries = Vec::new();
    let mut probe = params.to_vec();
    for (p, tensor) in params.iter().enumerate() {
        if !tensor.requires_grad() {
            continue;
        }
        let analytic = tape
            .grad(vars[p])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        for (index, &a) in analytic.iter().enumerate() {
            let original = tensor.values()[index];
            probe[p].values_mut()[index] = original + epsilon;
            let plus = evaluate(&probe)?;
            probe[p].values_mut()[index] = original - epsilon;
            let minus = evaluate(&probe)?;
            probe[p].values_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            entries.push(EntryCheck {
                param: p,
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tolerance,
        entries,
        max_rel_error,
        tolerance,
    })
}
