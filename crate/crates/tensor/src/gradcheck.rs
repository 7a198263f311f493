//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! every backward rule it checks.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all inputs and elements of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Builds the scalar function on a tape from input leaves.
pub trait ScalarFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> ScalarFn for F {}

/// Runs `f` once with every input marked grad-requiring and returns the
/// forward value and the tape gradients.
pub fn analytic_gradients(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    analytic_gradients_on(Tape::new(), f, inputs)
}

/// As [`analytic_gradients`], recording on a caller-prepared tape.
pub fn analytic_gradients_on(mut tape: Tape, f: &impl ScalarFn, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = scalar_of(&tape, loss)?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).expect("param leaves always get a gradient"))
        .collect();
    Ok((value, grads))
}

/// Evaluates `f` without recording gradients.
pub fn evaluate(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(TensorError::NotScalar(t.shape().to_vec()));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(TensorError::Numeric(format!("function value {x} is not finite")));
    }
    Ok(x)
}

/// Compares tape gradients of `f` against central differences with step `eps`.
pub fn finite_diff_check(f: impl ScalarFn, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradients(&f, inputs)?;
    compare_with_numeric(&f, inputs, &analytic, eps)
}

/// Compares caller-supplied `analytic` gradients against central differences.
pub fn compare_with_numeric(
    f: &impl ScalarFn,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport> {
    assert_eq!(inputs.len(), analytic.len(), "one gradient per input");
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..work[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(TensorError::Numeric(format!("non-finite error at input {i}[{e}]")));
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn([3, 4], |i| i as f64 * 0.1);
        let r = finite_diff_check(|t: &mut Tape, v: &[Var]| t.sum(v[0]), &[x], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn softmax_cross_entropy_self_test() {
        let logits = Tensor::from_fn([3, 5], |i| ((i * 7) % 11) as f64 * 0.3 - 1.0);
        let targets = [Some(1), None, Some(4)];
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &targets),
            &[logits],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_fn([4], |i| i as f64 + 0.5);
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        };
        let (_, mut grads) = analytic_gradients(&f, std::slice::from_ref(&x)).unwrap();
        grads[0].data_mut()[2] *= 1.01;
        let r = compare_with_numeric(&f, &[x], &grads, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error > 1e-3);
        assert_eq!(r.worst, Some((0, 2)));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let x = Tensor::from_fn([2], |_| 800.0);
        let f = |t: &mut Tape, v: &[Var]| {
            // exp overflow through a huge scale, then sum.
            let y = t.scale(v[0], 1e306)?;
            let y = t.scale(y, 1e10)?;
            t.sum(y)
        };
        assert!(evaluate(&f, &[x]).is_err());
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = Tensor::from_fn([2, 3], |i| i as f64 * 0.4 - 1.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.sigmoid(v[0])?;
            t.sum(s)
        };
        let mut tape = Tape::new();
        tape.inject_backward_fault("sigmoid");
        let (_, grads) = analytic_gradients_on(tape, &f, std::slice::from_ref(&x)).unwrap();
        let r = compare_with_numeric(&f, std::slice::from_ref(&x), &grads, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        let clean = finite_diff_check(f, &[x], DEFAULT_EPS).unwrap();
        assert!(clean.max_rel_error < 1e-8);
    }
}
