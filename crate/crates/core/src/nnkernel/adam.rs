use std::collections::BTreeMap;

use super::ParamStore;
use crate::{Error, Result};

/// Adam optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub step: u64,
    /// First and second moment per parameter name.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update using the gradients stored on each
/// parameter tensor. Parameters without a gradient are left untouched.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    for (name, tensor) in params.params_mut() {
        let Some(grad) = tensor.grad.take() else { continue };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("gradient of {name}"),
            });
        }
        let n = grad.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::Tensor;

    #[test]
    fn minimises_a_parabola() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::scalar(1.0));
        let mut state = AdamState::new(0.1);
        for _ in 0..200 {
            let t = params.get_mut("theta").unwrap();
            let th = t.item();
            t.grad = Some(vec![2.0 * th]);
            adam_step(&mut params, &mut state).unwrap();
        }
        assert!(params.get("theta").unwrap().item().abs() < 1e-2);
        assert_eq!(state.step, 200);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0));
        params.get_mut("w").unwrap().grad = Some(vec![f64::NAN]);
        assert!(adam_step(&mut params, &mut AdamState::new(0.1)).is_err());
    }
}
