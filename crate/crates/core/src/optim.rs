//! Adam optimizer over a fixed slice of the parameter store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Adam with bias correction over a fixed list of parameter names.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: HashMap<String, Tensor>,
    second: HashMap<String, Tensor>,
    names: Vec<String>,
}

impl AdamState {
    pub fn new(names: Vec<String>, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
            names,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over this optimizer's parameter names. Parameters
    /// missing from `grads` are treated as zero-gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in &self.names {
            let tensor = params.get_mut(name);
            let shape = tensor.shape().to_vec();
            let zero = Tensor::zeros(shape.clone());
            let grad = grads.get(name).unwrap_or(&zero);
            if grad.shape() != tensor.shape() {
                return Err(Error::numerics(format!(
                    "gradient shape {:?} does not match parameter '{name}' shape {:?}",
                    grad.shape(),
                    tensor.shape()
                )));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            for ((w, g), (mi, vi)) in tensor
                .values_mut()
                .iter_mut()
                .zip(grad.values())
                .zip(m.values_mut().iter_mut().zip(v.values_mut().iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Partition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, values: Vec<f64>) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let n = values.len();
        store.register(name, Partition::Encoder, vec![n], Init::Zeros, &mut rng);
        store.get_mut(name).values_mut().copy_from_slice(&values);
        store
    }


    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut store = store_with("w", vec![1.0, -2.0]);
        let mut adam = AdamState::new(vec!["w".into()], 0.1);
        let mut grads = Gradients::default();
        grads.insert("w".into(), Tensor::zeros(vec![2]));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("w").values(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // g = 1, lr = 0.1: m_hat = v_hat = 1, delta = -0.1 / (1 + 1e-8).
        let mut store = store_with("w", vec![0.5]);
        let mut adam = AdamState::new(vec!["w".into()], 0.1);
        let mut grads = Gradients::default();
        grads.insert("w".into(), Tensor::vector(vec![1.0]).unwrap());
        adam.step(&mut store, &grads).unwrap();
        let got = store.get("w").values()[0];
        assert!((got - (0.5 - 0.1)).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn adam_step_counter_and_moment_recurrence() {
        let mut store = store_with("w", vec![0.0]);
        let mut adam = AdamState::new(vec!["w".into()], 0.01);
        let mut grads = Gradients::default();
        grads.insert("w".into(), Tensor::vector(vec![2.0]).unwrap());
        adam.step(&mut store, &grads).unwrap();
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(adam.step_count(), 2);
        // m after two identical steps: (1 - b1^2) * g under the recurrence.
        let m = adam.first.get("w").unwrap().values()[0];
        assert!((m - (1.0 - 0.9f64.powi(2)) * 2.0).abs() < 1e-12);
        let v = adam.second.get("w").unwrap().values()[0];
        assert!((v - (1.0 - 0.999f64.powi(2)) * 4.0).abs() < 1e-12);
    }

    #[test]
    fn adam_shape_mismatch_errors() {
        let mut store = store_with("w", vec![0.0, 0.0]);
        let mut adam = AdamState::new(vec!["w".into()], 0.01);
        let mut grads = Gradients::default();
        grads.insert("w".into(), Tensor::vector(vec![1.0]).unwrap());
        assert!(adam.step(&mut store, &grads).is_err());
    }

}
