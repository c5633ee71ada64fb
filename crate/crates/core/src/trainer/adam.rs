use crate::error::{Error, Result};
use crate::model::{decays, Params};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.98,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, one pair per parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .weights
            .items()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    norm
}

/// Bias-corrected Adam with decoupled weight decay. Layer-norm and bias
/// tensors are not decayed.
pub fn adam_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let names = params.names();
    let tensors = params.weights.items_mut();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::Invalid(format!(
            "{} gradients / {} moments for {} tensors",
            grads.len(),
            state.m.len(),
            tensors.len()
        )));
    }
    for ((name, g), t) in names.iter().zip(grads).zip(&tensors) {
        if g.len() != t.len() {
            return Err(Error::dim(
                "adam_step",
                format!("gradient for {name} has {} values", g.len()),
            ));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let step = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);
    for (i, p) in tensors.into_iter().enumerate() {
        let shrink = if decays(&names[i]) && cfg.weight_decay > 0.0 {
            Some(T::lit(1.0 - lr * cfg.weight_decay))
        } else {
            None
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = grads[i][j];
            m[j] = b1 * m[j] + ob1 * gj;
            v[j] = b2 * v[j] + ob2 * gj * gj;
            if let Some(s) = shrink {
                *x *= s;
            }
            *x -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
