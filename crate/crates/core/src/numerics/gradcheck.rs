//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::Tensor;

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences, returning the worst relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every entry
/// of every input.
///
/// `f` must be deterministic: it is evaluated twice at the base point and
/// must reproduce the loss bit-for-bit, otherwise the oracle refuses to run.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::config(format!(
            "grad_check epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }

    let eval =
        |tensors: &[Tensor], with_grad: bool| -> Result<(Tape, Vec<ValueId>, ValueId, f64)> {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), with_grad))
                .collect();
            let loss = f(&mut tape, &ids)?;
            let value = tape.value(loss);
            if value.numel() != 1 {
                return Err(Error::Oracle(format!(
                    "function under test must be scalar-valued, got shape {:?}",
                    value.shape()
                )));
            }
            let v = value.data()[0];
            Ok((tape, ids, loss, v))
        };

    let (mut tape, ids, loss, base) = eval(inputs, true)?;
    let (_, _, _, base2) = eval(inputs, true)?;
    if base.to_bits() != base2.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: repeated evaluation gave {base} then {base2}"
        )));
    }
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check base evaluation".to_string(),
        });
    }

    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        #[allow(clippy::needless_range_loop)] // entry drives the in-place perturbation
        for entry in 0..input.numel() {
            let original = input.data()[entry];

            work[which].data_mut()[entry] = original + epsilon;
            let (_, _, _, plus) = eval(&work, false)?;
            work[which].data_mut()[entry] = original - epsilon;
            let (_, _, _, minus) = eval(&work, false)?;
            work[which].data_mut()[entry] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[which][entry];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
