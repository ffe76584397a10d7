//! Central finite-difference gradient checking.

use alloc::format;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative error `|analytic − numeric| / max(1, |analytic|)` over
/// every coordinate of `x`, with central differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), h)?;
    Ok(errs[0])
}

/// Like [`grad_check`] for a function of several tensors; returns one error
/// per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).data()[0];
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            context: format!("grad_check: f(x) = {f0}"),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.into_data(),
            None => alloc::vec![0.0; t.numel()],
        })
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut worst = 0.0f64;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check: perturbed f near coordinate {i}"),
                });
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k][i];
            worst = worst.max(libm::fabs(a - numeric) / libm::fabs(a).max(1.0));
        }
        errors.push(worst);
    }
    Ok(errors)
}
