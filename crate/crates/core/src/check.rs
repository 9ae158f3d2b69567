//! Finite-difference oracles. These never touch the reverse-mode path they
//! are used to check: they only re-evaluate forward closures at perturbed
//! inputs. All checking runs at f64.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central finite differences of a scalar function of several tensors,
/// one derivative per input element. Step 1e-5 is the verification default.
pub fn central_diff_grad(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    step: f64,
) -> Result<Vec<Tensor>> {
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            g[j] = (up - down) / (2.0 * step);
        }
        grads.push(Tensor::new(inputs[i].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Worst relative error across a list of (analytic, numeric) gradient pairs.
pub fn max_grad_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| a.rel_err(n))
        .fold(0.0, f64::max)
}
