//! Central finite-difference oracle for gradient verification.
//!
//! The oracle re-evaluates a user-supplied forward closure at perturbed
//! inputs; it never inspects the tape internals it is checking. Stop
//! gradient semantics are respected by construction: the closure decides
//! what is frozen, so a caller checking a loss containing `detach` passes
//! a closure with the detached values baked in as constants.

use crate::num::tape::{NodeId, Tape};
use crate::num::tensor::Tensor;

/// Build a graph over f64 inputs, return (loss value, analytic grads).
pub fn tape_grads(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let value = tape.value(loss).item();
    tape.backward(loss).expect("backward");
    let grads = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
        })
        .collect();
    (value, grads)
}

/// Central finite differences of the same closure, element by element.
pub fn fd_grads(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) -> Vec<Tensor<f64>> {
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };
    let mut out = Vec::with_capacity(inputs.len());
    for (ti, t) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(t.shape());
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= h;
            g.data_mut()[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative agreement rule: tiny gradients compare absolutely, the rest
/// relatively at `rtol`.
pub fn grads_close(a: f64, f: f64, rtol: f64) -> bool {
    let m = a.abs().max(f.abs());
    if m < 1e-5 {
        (a - f).abs() < 1e-7
    } else {
        (a - f).abs() / m < rtol
    }
}

/// Assert analytic == finite differences for every input element.
/// Returns the worst relative error observed.
pub fn check_grads(
    inputs: &[Tensor<f64>],
    h: f64,
    rtol: f64,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let (_, analytic) = tape_grads(inputs, &build);
    let fd = fd_grads(inputs, h, &build);
    let mut worst = 0.0f64;
    for (ti, (ga, gf)) in analytic.iter().zip(fd.iter()).enumerate() {
        for j in 0..ga.len() {
            let (a, f) = (ga.data()[j], gf.data()[j]);
            let m = a.abs().max(f.abs()).max(1e-5);
            worst = worst.max((a - f).abs() / m);
            assert!(
                grads_close(a, f, rtol),
                "grad mismatch input {ti} elem {j}: analytic {a} vs fd {f}"
            );
        }
    }
    worst
}
