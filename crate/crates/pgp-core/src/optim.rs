//! AdamW: Adam moment estimates with decoupled weight decay, applied
//! uniformly across every parameter matrix.

use crate::model::ModelParams;

/// Decoupled-weight-decay Adam. Only the learning rate is typically tuned;
/// betas, epsilon, and the decay factor stay at the common defaults.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: ModelParams,
    second_moment: ModelParams,
}

impl AdamW {
    /// Optimizer state shaped like `template`, all moments zero.
    pub fn new(template: &ModelParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            step: 0,
            first_moment: template.zeros_like(),
            second_moment: template.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let grad_fields = grads.fields();
        let m_fields = self.first_moment.fields_mut();
        let v_fields = self.second_moment.fields_mut();
        for ((((_, theta), (_, g)), (_, m)), (_, v)) in params
            .fields_mut()
            .into_iter()
            .zip(grad_fields)
            .zip(m_fields)
            .zip(v_fields)
        {
            for i in 0..theta.rows() {
                for j in 0..theta.cols() {
                    let grad = g.get(i, j);
                    let m_new = self.beta1 * m.get(i, j) + (1.0 - self.beta1) * grad;
                    let v_new = self.beta2 * v.get(i, j) + (1.0 - self.beta2) * grad * grad;
                    m.set(i, j, m_new);
                    v.set(i, j, v_new);
                    let m_hat = m_new / bias1;
                    let v_hat = v_new / bias2;
                    let update = m_hat / (v_hat.sqrt() + self.epsilon)
                        + self.weight_decay * theta.get(i, j);
                    theta.set(i, j, theta.get(i, j) - self.learning_rate * update);
                }
            }
        }
    }
}
