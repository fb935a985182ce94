//! Parameter-importance penalties that anchor the student to the previous
//! task's weights.
//!
//! * `awc`: importance is the squared distillation gradient of the current
//!   step, recomputed every step.
//! * `ewc_static`: importance is estimated once per task from a few
//!   synthetic batches at the anchor and then held fixed.
//! * `l2`: every parameter weighs the same.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsolidationMode {
    None,
    L2,
    EwcStatic,
    Awc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherNormalization {
    Raw,
    /// Rescale so the entries average to one.
    #[default]
    MeanOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    pub mode: ConsolidationMode,
    pub lambda: f64,
    pub normalize: FisherNormalization,
    pub static_sample_batches: usize,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        Self {
            mode: ConsolidationMode::Awc,
            lambda: 1.0,
            normalize: FisherNormalization::MeanOne,
            static_sample_batches: 4,
        }
    }
}

impl ConsolidationConfig {
    pub fn none() -> Self {
        Self {
            mode: ConsolidationMode::None,
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "consolidation lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.static_sample_batches == 0 {
            return Err(Error::Config("static_sample_batches must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the penalty contributes to the gradient at all.
    pub fn active(&self) -> bool {
        self.mode != ConsolidationMode::None && self.lambda != 0.0
    }
}

/// Per-parameter nonnegative importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    values: Vec<f64>,
    step: usize,
    normalization: FisherNormalization,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl FisherDiagonal {
    /// All-ones importance; turns the weighted penalty into plain L2.
    pub fn ones(len: usize) -> Self {
        Self {
            values: vec![1.0; len],
            step: 0,
            normalization: FisherNormalization::Raw,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn normalization(&self) -> FisherNormalization {
        self.normalization
    }

    pub fn stats(&self) -> FisherStats {
        let n = self.values.len().max(1) as f64;
        FisherStats {
            min: self.values.iter().cloned().fold(f64::INFINITY, f64::min),
            mean: self.values.iter().sum::<f64>() / n,
            max: self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn from_raw(mut values: Vec<f64>, step: usize, normalization: FisherNormalization) -> Self {
        if normalization == FisherNormalization::MeanOne {
            let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
            // An all-zero diagonal has no scale to fix; keep it zero.
            if mean > 0.0 {
                values.iter_mut().for_each(|v| *v /= mean);
            }
        }
        Self {
            values,
            step,
            normalization,
        }
    }
}

/// Squares the distillation gradient of step `step`.
pub fn fisher_from_gradients(
    gradient: &[f64],
    step: usize,
    normalization: FisherNormalization,
) -> FisherDiagonal {
    FisherDiagonal::from_raw(gradient.iter().map(|g| g * g).collect(), step, normalization)
}

/// Averages squared gradients over several batches, for the static variant.
pub fn fisher_from_gradient_batches(
    gradients: &[Vec<f64>],
    normalization: FisherNormalization,
) -> Result<FisherDiagonal> {
    let first = gradients
        .first()
        .ok_or_else(|| Error::Contract("static Fisher needs at least one batch".into()))?;
    let mut acc = vec![0.0; first.len()];
    for g in gradients {
        if g.len() != acc.len() {
            return Err(Error::Contract("gradient batches differ in length".into()));
        }
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v * v;
        }
    }
    let k = gradients.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(FisherDiagonal::from_raw(acc, 0, normalization))
}

fn deltas<'a>(
    now: &'a ParameterVector,
    prev: &'a ParameterVector,
) -> Result<impl Iterator<Item = f64> + 'a> {
    if now.len() != prev.len() {
        return Err(Error::Contract(format!(
            "parameter vectors differ in length: {} vs {}",
            now.len(),
            prev.len()
        )));
    }
    Ok(now.as_slice().iter().zip(prev.as_slice()).map(|(a, b)| a - b))
}

fn check_fisher(fisher: &FisherDiagonal, len: usize) -> Result<()> {
    if fisher.len() != len {
        return Err(Error::Contract(format!(
            "Fisher has {} entries for {len} parameters",
            fisher.len()
        )));
    }
    Ok(())
}

/// `Σᵢ Fᵢ·(θ_now,ᵢ − θ_prev,ᵢ)²`.
pub fn awc_loss(
    now: &ParameterVector,
    prev: &ParameterVector,
    fisher: &FisherDiagonal,
) -> Result<f64> {
    check_fisher(fisher, now.len())?;
    Ok(deltas(now, prev)?
        .zip(&fisher.values)
        .map(|(d, f)| f * (d * d))
        .sum())
}

/// `2·Fᵢ·(θ_now,ᵢ − θ_prev,ᵢ)`, treating `F` as a constant.
pub fn awc_gradient(
    now: &ParameterVector,
    prev: &ParameterVector,
    fisher: &FisherDiagonal,
) -> Result<Vec<f64>> {
    check_fisher(fisher, now.len())?;
    Ok(deltas(now, prev)?
        .zip(&fisher.values)
        .map(|(d, f)| 2.0 * f * d)
        .collect())
}

/// `Σᵢ (θ_now,ᵢ − θ_prev,ᵢ)²`.
pub fn l2_penalty(now: &ParameterVector, prev: &ParameterVector) -> Result<f64> {
    Ok(deltas(now, prev)?.map(|d| d * d).sum())
}

pub fn l2_gradient(now: &ParameterVector, prev: &ParameterVector) -> Result<Vec<f64>> {
    Ok(deltas(now, prev)?.map(|d| 2.0 * d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, max_relative_error};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec())
    }

    #[test]
    fn fisher_examples() {
        let zero = fisher_from_gradients(&[0.0, 0.0, 0.0], 0, FisherNormalization::MeanOne);
        assert_eq!(zero.values(), &[0.0, 0.0, 0.0]);
        let raw = fisher_from_gradients(&[1.0, -2.0], 3, FisherNormalization::Raw);
        assert_eq!(raw.values(), &[1.0, 4.0]);
        assert_eq!(raw.step(), 3);
        let scaled = fisher_from_gradients(&[1.0, -2.0], 0, FisherNormalization::MeanOne);
        assert!((scaled.values()[0] - 0.4).abs() < 1e-15);
        assert!((scaled.values()[1] - 1.6).abs() < 1e-15);
        let s = scaled.stats();
        assert!((s.mean - 1.0).abs() < 1e-15 && s.min == scaled.values()[0] && s.max == scaled.values()[1]);
    }

    #[test]
    fn awc_examples() {
        let a = pv(&[0.5, -1.0]);
        let f = FisherDiagonal::from_raw(vec![1.0, 2.0], 0, FisherNormalization::Raw);
        assert_eq!(awc_loss(&a, &a, &f).unwrap(), 0.0);
        let b = pv(&[1.5, 0.0]);
        assert_eq!(awc_loss(&b, &a, &f).unwrap(), 3.0);
        assert!(matches!(awc_loss(&pv(&[1.0]), &a, &f), Err(Error::Contract(_))));
    }

    #[test]
    fn l2_examples() {
        let a = pv(&[1.0, 2.0]);
        assert_eq!(l2_penalty(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_penalty(&pv(&[4.0, 6.0]), &a).unwrap(), 25.0);
        assert!(matches!(l2_penalty(&pv(&[1.0]), &a), Err(Error::Contract(_))));
    }

    #[test]
    fn awc_gradient_matches_finite_differences() {
        let mut r = rng::stream(1, "consolidation", 0);
        for _ in 0..100 {
            let n = 12;
            let now: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let prev = pv(&(0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let g: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let f = fisher_from_gradients(&g, 0, FisherNormalization::MeanOne);
            let analytic = awc_gradient(&pv(&now), &prev, &f).unwrap();
            let numeric = finite_diff(|t| awc_loss(&pv(t), &prev, &f), &now, 1e-5).unwrap();
            assert!(max_relative_error(&analytic, &numeric, 1e-3) < 1e-6);
        }
    }

    #[test]
    fn static_batches_average() {
        let g1 = vec![1.0, 2.0];
        let g2 = vec![3.0, 0.0];
        let single = fisher_from_gradient_batches(&[g1.clone()], FisherNormalization::Raw).unwrap();
        let repeated = fisher_from_gradient_batches(&[g1.clone(), g1.clone(), g1.clone()], FisherNormalization::Raw).unwrap();
        assert_eq!(single.values(), repeated.values());
        let mixed = fisher_from_gradient_batches(&[g1, g2], FisherNormalization::Raw).unwrap();
        assert_eq!(mixed.values(), &[5.0, 2.0]);
        assert!(fisher_from_gradient_batches(&[], FisherNormalization::Raw).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ConsolidationConfig::default().validate().is_ok());
        let bad = ConsolidationConfig { lambda: f64::INFINITY, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ConsolidationConfig { static_sample_batches: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(!ConsolidationConfig::none().active());
    }

    proptest! {
        #[test]
        fn unit_fisher_awc_is_bitwise_l2(now in proptest::collection::vec(-10.0f64..10.0, 1..40), shift in -1.0f64..1.0) {
            let prev: Vec<f64> = now.iter().map(|v| v * 0.7 + shift).collect();
            let (a, b) = (pv(&now), pv(&prev));
            let awc = awc_loss(&a, &b, &FisherDiagonal::ones(now.len())).unwrap();
            prop_assert_eq!(awc.to_bits(), l2_penalty(&a, &b).unwrap().to_bits());
        }

        #[test]
        fn fisher_ignores_gradient_sign(g in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            for mode in [FisherNormalization::Raw, FisherNormalization::MeanOne] {
                let f1 = fisher_from_gradients(&g, 0, mode);
                let f2 = fisher_from_gradients(&neg, 0, mode);
                prop_assert_eq!(f1.values(), f2.values());
                prop_assert!(f1.values().iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn penalty_gradient_points_back_to_anchor(
            now in proptest::collection::vec(-3.0f64..3.0, 1..30),
            seed in 0u64..1000,
        ) {
            let mut r = rng::stream(seed, "anchor", 0);
            let prev: Vec<f64> = now.iter().map(|_| r.random_range(-3.0..3.0)).collect();
            let g: Vec<f64> = now.iter().map(|_| r.random_range(-1.0..1.0)).collect();
            let f = fisher_from_gradients(&g, 0, FisherNormalization::MeanOne);
            let grad = awc_gradient(&pv(&now), &pv(&prev), &f).unwrap();
            for i in 0..now.len() {
                let d = now[i] - prev[i];
                if f.values()[i] > 0.0 && d != 0.0 {
                    prop_assert_eq!(grad[i].signum(), d.signum());
                }
            }
        }
    }
}
