//! Central finite-difference verification of tape gradients.
//!
//! Finite differences are a derivative oracle only where the closure is
//! differentiable across the whole stencil. Relu folds violate that: when
//! the two stencil evaluations land on different linear pieces (detected by
//! comparing relu sign-pattern fingerprints), the entry is excluded from
//! the comparison and counted in the report instead.

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Relative-error floor: entries whose magnitudes fall below this are
/// compared against the floor rather than their own size.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Entries whose FD stencil crossed a relu fold (excluded from the
    /// comparison; the derivative does not exist there).
    pub skipped_nondifferentiable: usize,
    pub compared: usize,
}

/// Compare tape gradients of `closure` against central differences.
///
/// The closure maps leaf nodes (one per input tensor, in order) to a scalar
/// node; a non-scalar output is a contract error. Entry-wise relative error
/// is |analytic - fd| / max(|analytic|, |fd|, floor) with floor 1e-6.
pub fn grad_check<F>(closure: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_grads(&closure, inputs)?;
    let fd = finite_difference_grads(&closure, inputs, h)?;
    Ok(compare_grads(&analytic, &fd, tol, DEFAULT_FLOOR))
}

/// Tape gradients for each input of the closure (zeros for inputs off the
/// graph path).
pub fn analytic_grads<F>(closure: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let out = closure(&mut tape, &ids)?;
    if tape.data(out).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check: closure output must be scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// One FD gradient entry: value difference quotient plus the two stencil
/// fingerprints.
pub struct FdEntry {
    pub value: f64,
    pub stencil_valid: bool,
}

/// Central differences (f(x+h) - f(x-h)) / 2h, entry by entry, with
/// stencil-validity tracking.
pub fn finite_difference_entries<F>(closure: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<FdEntry>>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.constant(t)).collect();
        let out = closure(&mut tape, &ids)?;
        if tape.data(out).len() != 1 {
            return Err(Error::contract("grad_check: closure output must be scalar"));
        }
        Ok((tape.scalar_value(out), tape.relu_sign_fingerprint()))
    };
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[ti].numel());
        for j in 0..inputs[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let (fp, pat_p) = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let (fm, pat_m) = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            g.push(FdEntry {
                value: (fp - fm) / (2.0 * h),
                stencil_valid: pat_p == pat_m,
            });
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Plain central differences without validity tracking.
pub fn finite_difference_grads<F>(closure: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<FdEntry>>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    finite_difference_entries(closure, inputs, h)
}

/// Entry-wise comparison; invalid-stencil entries are skipped and counted.
pub fn compare_grads(
    analytic: &[Vec<f64>],
    fd: &[Vec<FdEntry>],
    tol: f64,
    floor: f64,
) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut skipped = 0usize;
    let mut compared = 0usize;
    for (a_buf, f_buf) in analytic.iter().zip(fd) {
        for (&a, entry) in a_buf.iter().zip(f_buf) {
            if !entry.stencil_valid {
                skipped += 1;
                continue;
            }
            let f = entry.value;
            let denom = a.abs().max(f.abs()).max(floor);
            max_rel = max_rel.max((a - f).abs() / denom);
            compared += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        pass: max_rel <= tol && compared > 0,
        skipped_nondifferentiable: skipped,
        compared,
    }
}
