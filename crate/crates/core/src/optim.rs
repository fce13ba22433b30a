//! Momentum SGD with cosine-annealed learning rate.

use crate::tensor::Tensors;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let progress = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + g; p -= lr * v`, tensor by tensor.
    pub fn step<P: Tensors>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flatten();
        if self.velocity.len() != g.len() {
            self.velocity = vec![0.0; g.len()];
        }
        for (v, gi) in self.velocity.iter_mut().zip(&g) {
            *v = self.momentum * *v + gi;
        }
        let velocity = &self.velocity;
        let mut offset = 0;
        params.visit_mut(&mut |_, data| {
            for (p, v) in data.iter_mut().zip(&velocity[offset..]) {
                *p -= lr * v;
            }
            offset += data.len();
        });
    }
}

/// Scale `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_global_norm<P: Tensors>(grads: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit(&mut |_, _, d| sq += d.iter().map(|x| x * x).sum::<f64>());
    let n = sq.sqrt();
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        grads.visit_mut(&mut |_, d| d.iter_mut().for_each(|x| *x *= s));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule {
            base_lr: 0.1,
            total_steps: 10,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert!(s.lr(10).abs() < 1e-15);
        assert!((s.lr(5) - 0.05).abs() < 1e-12);
    }
}
