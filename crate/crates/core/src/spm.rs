//! Prior calibration: logit-space fusion of an external soft prior with the
//! model's weak-view prediction.
//!
//! The fusion weight at each pixel rises with the prior's certainty, falls
//! with the model's certainty, and is shifted by the image-level agreement
//! between the two maps.

use crate::error::{Error, Result};
use crate::probmaps::{check_dims, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpmCoefficients {
    pub lambda0: f64,
    pub kappa_p: f64,
    pub kappa_w: f64,
    pub kappa_a: f64,
    /// Probability clamp applied before taking logits.
    pub epsilon: f64,
}

impl Default for SpmCoefficients {
    fn default() -> Self {
        Self {
            lambda0: 0.25,
            kappa_p: 0.40,
            kappa_w: 0.25,
            kappa_a: 0.20,
            epsilon: 1e-6,
        }
    }
}

impl SpmCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda0, self.kappa_p, self.kappa_w, self.kappa_a, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("SPM coefficients must be finite".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("SPM epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }
}

/// Margin certainty `(2p - 1)^2`.
pub fn certainty(p: f64) -> f64 {
    (2.0 * p - 1.0).powi(2)
}

pub fn certainty_map(p: &ProbMap) -> ProbMap {
    let v = p.values().iter().map(|&x| certainty(x)).collect();
    ProbMap::new(p.height(), p.width(), v).expect("certainty stays in [0, 1]")
}

/// One minus the mean absolute difference between two maps.
pub fn agreement(pw: &ProbMap, pd: &ProbMap) -> Result<f64> {
    check_dims("agreement", pw, pd)?;
    let n = pw.len() as f64;
    let s: f64 = pw
        .values()
        .iter()
        .zip(pd.values())
        .map(|(a, b)| 1.0 - (a - b).abs())
        .sum();
    Ok(s / n)
}

/// Per-pixel weight on the prior, clamped to [0, 1].
pub fn fusion_weights(pw: &ProbMap, pd: &ProbMap, c: &SpmCoefficients) -> Result<ProbMap> {
    let w = agreement(pw, pd)?;
    let shift = c.kappa_a * (w - 0.5);
    let v = pw
        .values()
        .iter()
        .zip(pd.values())
        .map(|(&a, &b)| (c.lambda0 + c.kappa_p * certainty(b) - c.kappa_w * certainty(a) + shift).clamp(0.0, 1.0))
        .collect();
    ProbMap::new(pw.height(), pw.width(), v)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fuses with explicit per-pixel weights.
pub fn fuse_with_weights(pw: &ProbMap, pd: &ProbMap, lambda: &ProbMap, epsilon: f64) -> Result<ProbMap> {
    check_dims("fuse_with_weights", pw, pd)?;
    check_dims("fuse_with_weights", pw, lambda)?;
    let v = pw
        .values()
        .iter()
        .zip(pd.values())
        .zip(lambda.values())
        .map(|((&a, &b), &l)| {
            let a = a.clamp(epsilon, 1.0 - epsilon);
            let b = b.clamp(epsilon, 1.0 - epsilon);
            if a == b {
                // Interpolating equal logits is exact; skip the round trip.
                a
            } else {
                sigmoid(l * logit(b) + (1.0 - l) * logit(a))
            }
        })
        .collect();
    ProbMap::new(pw.height(), pw.width(), v)
}

/// Calibrated prior from the weak prediction `pw` and the external prior `pd`.
pub fn calibrate(pw: &ProbMap, pd: &ProbMap, c: &SpmCoefficients) -> Result<ProbMap> {
    let lambda = fusion_weights(pw, pd, c)?;
    fuse_with_weights(pw, pd, &lambda, c.epsilon)
}
