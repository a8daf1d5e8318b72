//! Central-finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Compare the reverse-mode gradient of a deterministic scalar loss against
/// central finite differences `(f(θ+eps) − f(θ−eps)) / 2eps` on every scalar
/// of every parameter in `params`, and return the worst relative error.
///
/// The per-scalar error is `|a − n| / max(|a|, |n|, 1)`, so it is relative
/// for gradients above one and absolute below.
pub fn grad_check<F>(params: &[&Tensor], mut loss_fn: F, eps: f32) -> Result<f32>
where
    F: FnMut() -> Result<Tensor>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step {eps} outside [1e-4, 1e-2]"
        )));
    }
    for p in params {
        if !p.requires_grad() {
            return Err(Error::Config(
                "grad_check over a tensor with requires_grad=false".into(),
            ));
        }
        p.zero_grad();
    }
    let loss = loss_fn()?;
    if loss.len() != 1 {
        return Err(Error::Dimension(format!(
            "loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut eval = |params_snapshot: &Tensor, idx: usize, delta: f32| -> Result<f64> {
        let mut data = params_snapshot.to_vec();
        let orig = data[idx];
        data[idx] = orig + delta;
        params_snapshot.apply_update(&data)?;
        let value = no_grad(&mut loss_fn)?;
        data[idx] = orig;
        params_snapshot.apply_update(&data)?;
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::Numeric("perturbed loss is not finite".into()));
        }
        Ok(v as f64)
    };

    let mut worst = 0.0f32;
    for (p, grads) in params.iter().zip(&analytic) {
        for i in 0..p.len() {
            let plus = eval(p, i, eps)?;
            let minus = eval(p, i, -eps)?;
            let numeric = (plus - minus) / (2.0 * eps as f64);
            let a = grads[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel as f32);
        }
    }
    Ok(worst)
}
