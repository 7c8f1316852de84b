use super::params::Module;

/// Adam with decoupled weight decay. Moment buffers follow the module's
/// trainable-parameter order.
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
        Self {
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

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module>(&mut self, model: &mut M, grad: &M) {
        let grads = grad.named_params();
        let params = model.named_params_mut();
        if self.first.is_empty() {
            for p in params.iter().filter(|p| p.trainable) {
                self.first.push(vec![0.0; p.data.len()]);
                self.second.push(vec![0.0; p.data.len()]);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let trainable = params.into_iter().zip(grads).filter(|(p, _)| p.trainable);
        for ((p, g), (m, v)) in trainable.zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            debug_assert_eq!(p.name, g.name);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p.data[i] -= self.learning_rate * (update + self.weight_decay * p.data[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::LayerNorm;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = LayerNorm::new(2);
        let mut g = LayerNorm::new(2);
        g.gain[0] = 3.0;
        g.gain[1] = -0.5;
        g.bias.fill(0.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut m, &g);
        // bias-corrected first step is lr * sign(g)
        assert!((m.gain[0] - 0.9).abs() < 1e-6);
        assert!((m.gain[1] - 1.1).abs() < 1e-6);
        assert_eq!(m.bias[0], 0.0);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut m = LayerNorm::new(1);
        let mut g = LayerNorm::new(1);
        g.gain.fill(0.0);
        g.bias.fill(0.0);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut m, &g);
        assert!((m.gain[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }
}
