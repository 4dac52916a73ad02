//! Loss primitives with analytic gradients, and delta normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Delta;

/// Smooth L1 value and derivative at `x`.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Sum of smooth L1 terms over the four delta components, with the gradient
/// with respect to `pred`.
pub fn loc_loss(pred: &Delta, target: &Delta) -> (f64, Delta) {
    let p = pred.to_array();
    let t = target.to_array();
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let (v, g) = smooth_l1(p[i] - t[i]);
        value += v;
        grad[i] = g;
    }
    (value, Delta::from_array(grad))
}

/// Per-component mean and standard deviation used to whiten regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: [f64; 4],
    pub sigma: [f64; 4],
}

impl NormStats {
    pub fn new(mu: [f64; 4], sigma: [f64; 4]) -> Result<Self> {
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("non-finite normalization mean {mu:?}")));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Config(format!("normalization sigma must be positive, got {sigma:?}")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn identity() -> Self {
        Self { mu: [0.0; 4], sigma: [1.0; 4] }
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.mu, self.sigma).map(|_| ())
    }
}

pub fn normalize(d: &Delta, s: &NormStats) -> Delta {
    let v = d.to_array();
    Delta::from_array(std::array::from_fn(|i| (v[i] - s.mu[i]) / s.sigma[i]))
}

pub fn denormalize(d: &Delta, s: &NormStats) -> Delta {
    let v = d.to_array();
    Delta::from_array(std::array::from_fn(|i| v[i] * s.sigma[i] + s.mu[i]))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with the gradient
/// with respect to the logits.
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let value = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - log_z).exp()).collect();
    grad[label] -= 1.0;
    (value, grad)
}
