//! SGD with momentum and L2 weight decay, plus cosine annealing.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One in-place update: `v <- m*v + g + wd*p`, `p <- p - lr*v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape("sgd_step", format!("{} params, {} grads, {} velocity", param.len(), grad.len(), velocity.len())));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond schedule of {total_steps}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Applies `grads` to the same-named tensors of `params`. Names are
    /// visited in sorted order; a missing gradient leaves the tensor alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            sgd_step(p.data_mut(), grad.data(), v.data_mut(), lr, self.momentum, self.weight_decay)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFinite(format!("gradient of {name}")),
                    other => other,
                })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let (mut p, mut v) = ([1.0], [0.0]);
        sgd_step(&mut p, &[0.5], &mut v, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn momentum_second_update() {
        let (mut p, mut v) = ([0.0], [0.0]);
        let (lr, g) = (0.1, 2.0);
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        let after_first = p[0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        assert!(((after_first - p[0]) - lr * 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn pure_decay() {
        let (mut p, mut v) = ([2.0], [0.0]);
        sgd_step(&mut p, &[0.0], &mut v, 1.0, 0.0, 0.1).unwrap();
        assert!((p[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut p, mut v) = ([1.5, -2.0], [0.3, 0.1]);
        sgd_step(&mut p, &[4.0, 5.0], &mut v, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut p, mut v) = ([1.0], [0.0]);
        assert!(matches!(sgd_step(&mut p, &[f64::NAN], &mut v, 1.0, 0.0, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.5).unwrap(), 0.5);
        assert!(cosine_lr(100, 100, 0.5).unwrap().abs() < 1e-16);
        assert!((cosine_lr(50, 100, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.5).is_err());
    }
}
