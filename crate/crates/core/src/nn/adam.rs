use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Adam optimiser state with bias-corrected moments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    /// One update of every parameter that has a gradient buffer. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let tensors = params.tensors_mut();
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != tensors.len() {
            return Err(Error::shape("optimiser state does not match parameter count"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, tensor) in tensors.iter_mut().enumerate() {
            if !tensor.requires_grad() {
                continue;
            }
            if self.m[i].len() != tensor.len() {
                return Err(Error::shape(format!("moment buffer {i} shape mismatch")));
            }
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.len()],
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(value));
        p
    }

    fn set_grad(p: &mut ParamSet, g: f64) {
        let t = &mut p.tensors_mut()[0];
        t.zero_grad();
        t.accumulate_grad(&[g], 1.0).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut adam = AdamState::new(1e-3);
        set_grad(&mut p, 0.0);
        for _ in 0..3 {
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.tensors_mut()[0].data()[0], 0.7);
        assert_eq!(adam.first_moment(0)[0], 0.0);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 1e-3;
        for g in [1e-4, 0.3, -2.0, 50.0] {
            let mut p = single(1.0);
            let mut adam = AdamState::new(lr);
            set_grad(&mut p, g);
            adam.step(&mut p).unwrap();
            let delta = (p.tensors_mut()[0].data()[0] - 1.0).abs();
            // m̂ = g, v̂ = g², so |Δ| = lr·|g| / (|g| + ε)
            let expected = lr * g.abs() / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "g={g}");
            assert!(delta >= 0.999 * lr && delta <= lr);
        }
    }

    #[test]
    fn constant_gradient_second_step_is_lr() {
        let lr = 1e-3;
        let mut p = single(0.0);
        let mut adam = AdamState::new(lr);
        set_grad(&mut p, 0.5);
        adam.step(&mut p).unwrap();
        let after_one = p.tensors_mut()[0].data()[0];
        adam.step(&mut p).unwrap();
        let second = (p.tensors_mut()[0].data()[0] - after_one).abs();
        assert!((second - lr).abs() < 0.01 * lr);
    }
}
