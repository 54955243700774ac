//! Adam with decoupled weight decay.

use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update using the gradients stored on each parameter.
    /// Parameters without a gradient are only decayed.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.tensor.grad().map(<[f64]>::to_vec);
            let values = p.tensor.values_mut();
            for i in 0..values.len() {
                values[i] *= decay;
                let Some(g) = grad.as_ref().map(|g| g[i]) else {
                    continue;
                };
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
