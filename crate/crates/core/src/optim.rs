//! A small decoupled-weight-decay Adam optimizer with per-name state.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tensor};

/// AdamW with the usual defaults (β1=0.9, β2=0.999, ε=1e-8, wd=0.01).
/// Moments are kept in f64 keyed by parameter name.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: HashMap<String, u64>,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            steps: HashMap::new(),
            moments: HashMap::new(),
        }
    }

    pub fn step<E: Scalar>(&mut self, name: &str, param: &mut Tensor<E>, grad: &Tensor<E>) {
        assert_eq!(
            param.shape(),
            grad.shape(),
            "grad shape mismatch for {name}"
        );
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let t = self.steps.entry(name.to_string()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - self.beta1.powi(*t as i32);
        let bc2 = 1.0 - self.beta2.powi(*t as i32);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad.data()[i].as_f64();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p = data[i].as_f64();
            let updated = p - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p);
            data[i] = E::from_f64(updated);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut opt = AdamW::new(0.0);
        let mut p = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::<f32>::new(vec![2], vec![0.3, 0.7]).unwrap();
        let before = p.clone();
        opt.step("p", &mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_about_lr_against_gradient() {
        // With bias correction, step 1 moves by ~lr·sign(g) (plus decay).
        let mut opt = AdamW::new(1e-2);
        opt.weight_decay = 0.0;
        let mut p = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::<f64>::new(vec![2], vec![5.0, -0.1]).unwrap();
        opt.step("p", &mut p, &g);
        assert!((p.data()[0] + 1e-2).abs() < 1e-5);
        assert!((p.data()[1] - 1e-2).abs() < 1e-5);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // Zero gradient still shrinks weights by lr·wd·p.
        let mut opt = AdamW::new(0.1);
        let mut p = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let g = Tensor::<f64>::zeros(vec![1]);
        opt.step("p", &mut p, &g);
        assert!((p.data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn state_is_per_name() {
        let mut opt = AdamW::new(1e-2);
        opt.weight_decay = 0.0;
        let g = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let mut a = Tensor::<f64>::zeros(vec![1]);
        let mut b = Tensor::<f64>::zeros(vec![1]);
        opt.step("a", &mut a, &g);
        opt.step("a", &mut a, &g);
        opt.step("b", &mut b, &g);
        // b saw one step, a saw two; first steps are identical.
        assert!((b.data()[0] + 1e-2).abs() < 1e-6);
        assert!(a.data()[0] < b.data()[0]);
    }
}
