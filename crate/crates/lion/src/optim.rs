//! Adam optimizer over [`ParamKey`]-addressed tensors.

use std::collections::HashMap;

use crate::model::ParamKey;
use crate::tensor::{Scalar, Tensor};

/// Standard Adam with bias correction. State is keyed per parameter; update
/// order follows the caller's binding order, which is fixed per forward
/// build, so training is reproducible.
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    state: HashMap<ParamKey, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Advance the shared step counter; call once per batch before updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// In-place update of one parameter from its gradient.
    pub fn update(&mut self, key: ParamKey, param: &mut Tensor<T>, grad: &[T]) {
        let n = param.numel();
        debug_assert_eq!(grad.len(), n);
        let (m, v) = self
            .state
            .entry(key)
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let t = T::from_f64(self.step as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        let data = param.data_mut();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = Tensor::from_vec(vec![1], vec![0.0f64]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = 2.0 * (x.data()[0] - 3.0);
            opt.begin_step();
            opt.update(ParamKey::PatchW, &mut x, &[g]);
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-3, "x = {}", x.data()[0]);
    }
}
