use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Plain SGD or Adam with bias correction.
///
/// Adam moment buffers are created on the first step and are tied to the
/// order and shapes of the parameter list passed to [`Optimizer::step`].
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: T,
    step_count: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate: T::from_f64_lossy(learning_rate),
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from each parameter's accumulated gradient.
    /// Gradients are left in place; callers clear them.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(i));
        }
        if self.kind == OptimizerKind::Adam {
            self.ensure_moments(params)?;
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let g = p.grad().unwrap().to_vec();
                    p.data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(w, &gi)| *w -= lr * gi);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::from_f64_lossy(BETA1), T::from_f64_lossy(BETA2));
                let eps = T::from_f64_lossy(EPSILON);
                let t = self.step_count as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = p.grad().unwrap().to_vec();
                    let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
                    for (((w, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    fn ensure_moments(&mut self, params: &[&mut Tensor<T>]) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
            return Ok(());
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::Shape {
                op: "optimizer",
                dim: "parameter_count",
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        for (m, p) in self.first_moment.iter().zip(params) {
            if m.len() != p.numel() {
                return Err(Error::Shape {
                    op: "optimizer",
                    dim: "numel",
                    expected: m.len(),
                    got: p.numel(),
                });
            }
        }
        Ok(())
    }
}
