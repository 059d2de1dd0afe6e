//! SGD and Adam parameter updates.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd { lr }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        let buffers = match kind {
            OptimizerKind::Sgd { .. } => 0,
            OptimizerKind::Adam { .. } => param_count,
        };
        OptimizerState { kind, step: 0, m: vec![0.0; buffers], v: vec![0.0; buffers] }
    }

    /// One update in place; `grad` is the averaged batch gradient.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), grad.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for i in 0..theta.len() {
                    theta[i] -= lr * grad[i];
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, epsilon } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_arithmetic() {
        let mut theta = vec![1.0];
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.5), 1);
        opt.update(&mut theta, &[2.0]);
        assert_eq!(theta[0], 0.0);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // with constant gradient c the bias-corrected first step is
        // lr * c / (|c| + eps) ~= lr * sign(c)
        for &c in &[3.0, -0.25] {
            let mut theta = vec![1.0];
            let mut opt = OptimizerState::new(OptimizerKind::adam(0.01), 1);
            opt.update(&mut theta, &[c]);
            let expect = 1.0 - 0.01 * c.signum();
            assert!((theta[0] - expect).abs() < 1e-6, "{} vs {expect}", theta[0]);
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut theta = vec![0.7, -0.3];
        let mut opt = OptimizerState::new(OptimizerKind::adam(0.1), 2);
        for _ in 0..50 {
            opt.update(&mut theta, &[0.0, 0.0]);
        }
        assert_eq!(theta, vec![0.7, -0.3]);
    }

    #[test]
    fn descent_direction_on_quadratic() {
        // f(w) = (w - 2)^2 / 2, grad = w - 2
        let mut theta = vec![5.0];
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.1), 1);
        for _ in 0..100 {
            let g = theta[0] - 2.0;
            opt.update(&mut theta, &[g]);
        }
        assert!((theta[0] - 2.0).abs() < 1e-3);
    }
}
