//! Adam with optional global-norm gradient clipping.

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Frozen stores are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        if store.is_frozen() {
            return;
        }
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                let (r, c) = p.value().shape();
                self.m.push(Tensor::zeros(r, c));
                self.v.push(Tensor::zeros(r, c));
            }
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let n = store.grad_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = std::sync::Arc::make_mut(&mut p.value);
            for (((x, g), mi), vi) in value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grad();
    }
}
