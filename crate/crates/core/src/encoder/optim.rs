use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::stack::EncoderStack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD with heavy-ball momentum or Adam, with L2 weight decay folded into
/// the gradient. Moment buffers are allocated lazily on the first step and
/// matched to parameters by position.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using each parameter's accumulated `grad`.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| !p.grad.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {i}; step aborted"
            )));
        }
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len()
            || params
                .iter()
                .zip(&self.first)
                .any(|(p, m)| p.value.shape() != m.shape())
        {
            return Err(Error::Structural(
                "optimizer state does not match parameter list".into(),
            ));
        }
        self.steps += 1;
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for (p, buf) in params.iter_mut().zip(&mut self.first) {
                    let Param { value, grad } = &mut **p;
                    for ((w, &g), v) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(buf.data_mut())
                    {
                        let g = g + wd * *w;
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let Param { value, grad } = &mut **p;
                    for (((w, &g), mi), vi) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let g = g + wd * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Steps every parameter of `stack`; frozen stacks are a contract violation.
    pub fn step_stack(&mut self, stack: &mut EncoderStack) -> Result<()> {
        if stack.is_frozen() {
            return Err(Error::Contract(format!(
                "optimizer step on frozen {} encoder",
                stack.modality()
            )));
        }
        self.step(&mut stack.params_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ArchSpec;
    use crate::rng::SeededRng;

    fn scalar(v: f64, g: f64) -> Param {
        let mut p = Param::new(Tensor::from_vec(vec![v]));
        p.grad = Tensor::from_vec(vec![g]);
        p
    }

    #[test]
    fn sgd_single_step() {
        let mut p = scalar(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9), 0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1e-4, 0.3, 250.0, -7.0] {
            let mut p = scalar(0.5, g);
            let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3, 0.0);
            opt.step(&mut [&mut p]).unwrap();
            let moved = (p.value.data()[0] - 0.5).abs();
            assert!((moved - 1e-3).abs() < 1e-6, "g = {g}: moved {moved}");
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        for kind in [OptimizerKind::sgd(0.9), OptimizerKind::adam()] {
            let mut p = scalar(0.25, 0.0);
            let mut opt = Optimizer::new(kind, 0.1, 0.0);
            for _ in 0..5 {
                opt.step(&mut [&mut p]).unwrap();
            }
            assert_eq!(p.value.data()[0], 0.25);
        }
    }

    #[test]
    fn adam_minimises_quadratic_bowl() {
        // f(w) = ½‖w‖², ∇f = w
        let mut rng = SeededRng::new(8);
        let w0 = Tensor::randn(&[10], 1.0, &mut rng);
        let mut p = Param::new(w0.scale(1.0 / w0.norm()));
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.05, 0.0);
        let mut reached = None;
        for step in 1..=200 {
            p.grad = p.value.clone();
            opt.step(&mut [&mut p]).unwrap();
            if p.value.norm() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(
            reached.is_some(),
            "norm after 200 steps: {}",
            p.value.norm()
        );
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = scalar(1.0, f64::NAN);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, 0.0);
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Numerical(_))));
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn frozen_stack_refuses_step() {
        let mut s = EncoderStack::build(
            ArchSpec::video(2, [8, 16, 16]),
            "flow",
            &mut SeededRng::new(0),
        )
        .unwrap();
        s.set_frozen(true);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, 0.0);
        assert!(matches!(opt.step_stack(&mut s), Err(Error::Contract(_))));
    }
}
