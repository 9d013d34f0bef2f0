use super::param::ParamSet;
use super::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for every parameter of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        AdamState { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter; gradients are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        assert_eq!(params.len(), self.first.len(), "optimizer built for a different parameter set");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64c(c.learning_rate / bc1);
        let inv_sqrt_bc2 = T::from_f64c(1.0 / bc2.sqrt());
        let eps = T::from_f64c(c.epsilon);
        for (i, p) in params.iter_mut().enumerate() {
            if p.trainable {
                let m = self.first[i].data_mut();
                let v = self.second[i].data_mut();
                let (w, g) = (p.value.data_mut(), p.grad.data());
                for j in 0..w.len() {
                    m[j] = b1 * m[j] + one_b1 * g[j];
                    v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                    w[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
                }
            }
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }
}
