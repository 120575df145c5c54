//! Adam with bias correction. One optimizer instance owns the moment
//! estimates for one parameter store; frozen parameters are skipped and all
//! gradients are zeroed after each step.

use crate::numerics::{ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let (rows, cols) = store.value(id).shape();
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Tensor::zeros(rows, cols), Tensor::zeros(rows, cols)));
            // Update moments from the gradient, then the parameter in place.
            {
                let grad = store.get(id).grad.clone();
                for ((m_i, v_i), &g) in m
                    .data_mut()
                    .iter_mut()
                    .zip(v.data_mut().iter_mut())
                    .zip(grad.data())
                {
                    *m_i = self.beta1 * *m_i + (1.0 - self.beta1) * g;
                    *v_i = self.beta2 * *v_i + (1.0 - self.beta2) * g * g;
                }
                let value = store.value_mut(id);
                for ((x, &m_i), &v_i) in value
                    .data_mut()
                    .iter_mut()
                    .zip(m.data())
                    .zip(v.data())
                {
                    let m_hat = m_i / bc1;
                    let v_hat = v_i / bc2;
                    *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        store.zero_grads();
    }
}
