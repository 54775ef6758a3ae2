//! Adam with decoupled weight decay and a linear learning-rate schedule.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that holds a gradient, then clears the
    /// gradients. `params` must come in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter set changed");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (p, (m, v)) in params.into_iter().zip(&mut self.moments) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] -= lr * (update + self.weight_decay * data[i]);
            }
            p.zero_grad();
        }
    }
}

/// Linear warmup to `base` over `warmup_ratio · total` steps, then linear
/// decay to zero at `total`.
pub fn linear_schedule(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).floor() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let remaining = total.saturating_sub(step) as f64;
    base * remaining / (total - warmup).max(1) as f64
}
