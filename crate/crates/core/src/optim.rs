//! RMSProp over flat parameter vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self { learning_rate: 1e-4, decay: 0.9, epsilon: 1e-8 }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("non-finite gradient at flat index {index}")]
pub struct NonFiniteGradient {
    pub index: usize,
}

impl RmsProp {
    /// `acc ← ρ·acc + (1−ρ)·g²; θ ← θ − lr·g / (√acc + ε)`, elementwise.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&self, params: &mut [f64], grads: &[f64], acc: &mut [f64]) -> Result<(), NonFiniteGradient> {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        assert_eq!(params.len(), acc.len(), "parameter/accumulator length mismatch");
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NonFiniteGradient { index });
        }
        let (lr, rho, eps) = (self.learning_rate, self.decay, self.epsilon);
        for ((p, &g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
            *a = rho * *a + (1.0 - rho) * g * g;
            if g != 0.0 {
                *p -= lr * g / (libm::sqrt(*a) + eps);
            }
        }
        Ok(())
    }
}
