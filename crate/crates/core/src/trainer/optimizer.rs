use serde::{Deserialize, Serialize};

use crate::params::Parameters;

/// SGD with momentum: `v ← μ v − lr g`, `θ ← θ + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, num_params: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn with_velocity(lr: f64, momentum: f64, velocity: Vec<f64>) -> Self {
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// # Panics
    /// If `params` and `grads` disagree with the velocity length.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.velocity.len(), "gradient length");
        let mut offset = 0;
        for t in params.tensors_mut() {
            for theta in t.iter_mut() {
                let v = &mut self.velocity[offset];
                *v = self.momentum * *v - self.lr * g[offset];
                *theta += *v;
                offset += 1;
            }
        }
        assert_eq!(offset, self.velocity.len(), "parameter length");
    }
}
