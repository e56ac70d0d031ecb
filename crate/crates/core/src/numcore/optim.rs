use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{usage_err, Result};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Applies one update using each parameter's populated gradient, then
    /// clears the gradients. Parameters without a gradient (not reached by
    /// the loss) are left untouched, moments included.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(usage_err!("optimizer tracks {} parameters, got {}", self.m.len(), params.len()));
        }
        let grads: Vec<Option<Vec<T>>> = params.iter().map(Tensor::grad).collect();
        if grads.iter().all(Option::is_none) {
            return Err(usage_err!("no parameter has a gradient; call backward first"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(self.lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps_hat);
        for (((p, g), m), v) in params.iter().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(usage_err!("moment buffer does not match parameter size"));
            }
            let Some(g) = g else { continue };
            let mut data = p.data_mut();
            for (((x, g), m), v) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                *x = *x - step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        params.iter().for_each(Tensor::zero_grad);
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(params: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    state.step(params)
}
