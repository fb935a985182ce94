//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The op set is exactly what the two-tower model and its losses need:
//! affine layers, `tanh`, row normalization, (log-)softmax, KL and
//! cross-entropy against detached targets, and a weighted squared distance
//! for consolidation penalties. [`finite_diff`] is the independent central
//! difference oracle used to validate every backward rule.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Tensor, EPS_NORM, EPS_PROB};

use crate::error::{Error, Result};

/// Central-difference gradient estimate
/// `(L(θ + h·eᵢ) − L(θ − h·eᵢ)) / 2h` for every coordinate of `theta`.
pub fn finite_diff<F>(mut loss: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let original = probe[i];
        probe[i] = original + h;
        let up = loss(&probe)?;
        probe[i] = original - h;
        let down = loss(&probe)?;
        probe[i] = original;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between two gradients, with the
/// denominator floored at `floor` so near-zero entries compare absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
