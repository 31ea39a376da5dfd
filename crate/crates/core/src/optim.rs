use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{MistError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam (or plain gradient descent) over an ordered list of tensors.
/// One instance per group of networks that are updated together.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Adam, lr)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        self.update(params, grads, 1.0)
    }

    /// Ascends along `grads`.
    pub fn ascend(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        self.update(params, grads, -1.0)
    }

    fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], sign: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(MistError::invalid(
                "optimizer_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(MistError::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(MistError::invalid(
                "optimizer_step",
                "parameter layout changed between steps",
            ));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &d) in p.values_mut().iter_mut().zip(g) {
                        *w -= sign * self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, w) in p.values_mut().iter_mut().enumerate() {
                        let d = sign * g[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let before = p.clone();
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..100 {
            opt.step(vec![&mut p], &[vec![0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_is_sign_like() {
        let mut p = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let g = vec![3.0, -0.01, 1e-3];
        Optimizer::adam(0.01).step(vec![&mut p], &[g.clone()]).unwrap();
        for (w, d) in p.values().iter().zip(&g) {
            let expected = -0.01 * d / (d.abs() + ADAM_EPS);
            assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        }
    }

    #[test]
    fn ascend_moves_uphill() {
        let mut p = Tensor::vector(vec![0.0]);
        Optimizer::new(OptimizerKind::Sgd, 0.5)
            .ascend(vec![&mut p], &[vec![2.0]])
            .unwrap();
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.7]);
            let mut opt = Optimizer::adam(1e-2);
            for i in 0..50 {
                let g = vec![(i as f64).sin(), (i as f64 * 0.3).cos()];
                opt.step(vec![&mut p], &[g]).unwrap();
            }
            (p, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        assert!(Optimizer::adam(0.1).step(vec![&mut p], &[vec![1.0]]).is_err());
    }
}
