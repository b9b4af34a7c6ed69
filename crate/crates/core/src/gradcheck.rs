//! Numeric verification of the reverse pass: central differences against
//! the tape's analytic gradients, with a repeat-forward determinism probe
//! so a flaky function is reported instead of producing garbage numbers.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative:
/// `|a - n| / max(|a|, |n|, 1e-8)`. The floor keeps near-zero gradients
/// from blowing the ratio up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check the gradient of `f` (a scalar-valued taped computation over
/// `inputs`) with step size `step`. Returns the worst relative error over
/// every element of every input.
///
/// `f` is called with a fresh tape and one leaf per input each evaluation,
/// so it must be a pure function of its inputs. That is verified up front:
/// two forward passes must agree bit for bit, otherwise the check refuses
/// to run.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Validation(format!(
            "step must be a positive finite number, got {step}"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Validation("grad_check needs at least one input".into()));
    }

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let out = tape.value(root)?;
        if out.len() != 1 {
            return Err(Error::Shape(format!(
                "grad_check function must return a scalar, got shape {:?}",
                out.shape()
            )));
        }
        out.item()
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::UnreliableCheck(format!(
            "function is not deterministic: {first} vs {second} on identical input"
        )));
    }
    if !first.is_finite() {
        return Err(Error::UnreliableCheck(format!(
            "function produced a non-finite value {first}"
        )));
    }

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.wrt(v).map(|s| s.to_vec()))
        .collect::<Result<_>>()?;

    // Central differences, one element at a time on a working copy.
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::UnreliableCheck(format!(
                    "numeric derivative for input {i} element {j} is {numeric}"
                )));
            }
            let err = rel_err(analytic[i][j], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
