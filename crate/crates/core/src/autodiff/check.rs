//! Finite-difference verification of tape gradients.
//!
//! Central differences in double precision against the analytic backward
//! pass; the reported figure is the worst relative error over all input
//! coordinates, with the denominator floored at 1 so near-zero gradients are
//! compared absolutely.

use thiserror::Error;

use super::tape::{Tape, TensorId};
use super::tensor::TensorData;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("function is not deterministic: forward values differ across identical calls")]
    NonDeterministic,
    #[error("function output must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued `f` at `x`. `f` must be deterministic; this is verified by
/// evaluating the forward value twice and comparing bitwise.
pub fn grad_check<F>(f: F, x: &TensorData<f64>, eps: f64) -> Result<f64, CheckError>
where
    F: Fn(&mut Tape<f64>, TensorId) -> TensorId,
{
    grad_check_multi(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), eps)
}

/// Multi-input version of [`grad_check`]: verifies the gradient w.r.t. every
/// coordinate of every input and returns the worst relative error.
pub fn grad_check_multi<F>(f: F, xs: &[TensorData<f64>], eps: f64) -> Result<f64, CheckError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    let eval = |inputs: &[TensorData<f64>]| -> (f64, Vec<usize>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let root = f(&mut tape, &ids);
        let v = tape.value(root);
        (v.data()[0], v.shape().to_vec())
    };

    // Determinism probe: identical inputs must give bit-identical forwards.
    let owned: Vec<TensorData<f64>> = xs.to_vec();
    let (v1, shape1) = eval(&owned);
    let (v2, _) = eval(&owned);
    if !shape1.is_empty() && shape1.iter().product::<usize>() != 1 {
        return Err(CheckError::NotScalar(shape1));
    }
    if v1.to_bits() != v2.to_bits() {
        return Err(CheckError::NonDeterministic);
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = owned.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&mut tape, &ids);
    tape.backward(root).expect("grad_check root must be scalar");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&owned)
        .map(|(&id, x)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let mut worst = 0.0f64;
    for (xi, x) in owned.iter().enumerate() {
        for coord in 0..x.numel() {
            let mut plus = owned.clone();
            plus[xi].data_mut()[coord] += eps;
            let (vp, _) = eval(&plus);
            let mut minus = owned.clone();
            minus[xi].data_mut()[coord] -= eps;
            let (vm, _) = eval(&minus);
            let fd = (vp - vm) / (2.0 * eps);
            let err = (analytic[xi][coord] - fd).abs() / fd.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
