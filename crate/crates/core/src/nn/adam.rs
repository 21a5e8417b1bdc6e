//! Adam optimizer over visited parameters.

use super::tensor::Param;

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Advances the step counter; call once per optimization step, then apply
    /// [`Adam::update`] to every parameter through the model's visitor.
    pub fn begin_step(&mut self) -> AdamStep {
        self.t += 1;
        AdamStep {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            bc1: 1.0 - self.beta1.powi(self.t as i32),
            bc2: 1.0 - self.beta2.powi(self.t as i32),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Per-step constants captured from the optimizer.
#[derive(Clone, Copy)]
pub struct AdamStep {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    bc1: f32,
    bc2: f32,
}

impl AdamStep {
    pub fn update(&self, p: &mut Param) {
        for i in 0..p.data.len() {
            let g = p.grad[i];
            p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
            p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = p.m[i] / self.bc1;
            let vhat = p.v[i] / self.bc2;
            p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_hand_computation() {
        let mut p = Param::new("p", vec![1], vec![1.0]);
        p.grad[0] = 0.5;
        let mut opt = Adam::new(0.1);
        let step = opt.begin_step();
        step.update(&mut p);

        // by hand: m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25
        // p = 1 - 0.1 * 0.5 / (0.5 + 1e-8) ~= 0.9
        assert!((p.data[0] - 0.9).abs() < 1e-6, "got {}", p.data[0]);
        assert_eq!(opt.step_count(), 1);
    }
}
