//! Finite-difference gradient oracle for the test suites.
//!
//! The oracle is forward-only: it rebuilds the graph at perturbed inputs
//! and never consults the tape's backward rules, so it stays independent of
//! the differentiation path it is checking. Reference (64-bit) mode only.

use crate::tensor::{Tape, TensorId};

/// Graph builder: given fresh input buffers, record a graph on `tape` and
/// return the scalar loss node plus the input leaves (in `data` order).
pub type Build<'a> = &'a dyn Fn(&mut Tape<f64>, &[Vec<f64>]) -> (TensorId, Vec<TensorId>);

/// Loss value at `data`, built on a fresh tape.
pub fn eval_loss(build: Build, data: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = build(&mut tape, data);
    tape.scalar_value(loss)
}

/// Loss and reverse-mode gradients for every input buffer.
pub fn analytic_grads(build: Build, data: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let (loss, inputs) = build(&mut tape, data);
    let value = tape.scalar_value(loss);
    tape.backward(loss).expect("scalar loss");
    let grads = inputs
        .iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.numel(id)],
        })
        .collect();
    (value, grads)
}

/// Central differences, step `h`, element by element.
pub fn numeric_grads(build: Build, data: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..data.len() {
        let mut g = vec![0.0; data[p].len()];
        for i in 0..data[p].len() {
            let mut plus = data.to_vec();
            plus[p][i] += h;
            let mut minus = data.to_vec();
            minus[p][i] -= h;
            g[i] = (eval_loss(build, &plus) - eval_loss(build, &minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Worst relative error between reverse-mode and central-difference
/// gradients: `|a - f| / max(|a|, 1e-8)`.
pub fn max_rel_err(build: Build, data: &[Vec<f64>], h: f64) -> f64 {
    let (_, analytic) = analytic_grads(build, data);
    let numeric = numeric_grads(build, data, h);
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(&numeric) {
        for (&av, &fv) in a.iter().zip(f) {
            let err = (av - fv).abs() / av.abs().max(1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Tolerance check in the absolute-plus-relative form
/// `|a - f| <= atol + rtol * max(|a|, |f|)`.
///
/// The absolute term covers elements whose true gradient sits below the
/// central-difference noise floor (~eps * |loss| / h); a backward-rule bug
/// produces errors proportional to the gradient itself, which the relative
/// term still catches. Returns the worst ratio of `|a - f|` to the allowed
/// tolerance and its (input, element) location; the check passes when the
/// ratio is < 1.
pub fn worst_tolerance_ratio(
    build: Build,
    data: &[Vec<f64>],
    h: f64,
    atol: f64,
    rtol: f64,
) -> (f64, usize, usize) {
    let (_, analytic) = analytic_grads(build, data);
    let numeric = numeric_grads(build, data, h);
    let mut worst = (0.0f64, 0usize, 0usize);
    for (p, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &fv)) in a.iter().zip(f).enumerate() {
            let allowed = atol + rtol * av.abs().max(fv.abs());
            let ratio = (av - fv).abs() / allowed;
            if ratio > worst.0 {
                worst = (ratio, p, i);
            }
        }
    }
    worst
}
