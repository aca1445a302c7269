//! Entropy and mutual-information uncertainty over predictive samples.
//!
//! Mutual information is the plug-in estimate over the T passes:
//! `H[mean_t p_t] - mean_t H[p_t]` per test point, in nats. It is zero when
//! all passes agree and is bounded above by the predictive entropy.

use crate::error::{Error, Result};
use crate::inference::{predictive_mean, PredictiveSamples};

/// Shannon entropy in nats, with `0 ln 0 = 0`. Entries may sit slightly
/// below zero (within -1e-9) from floating-point noise; anything lower is a
/// contract violation.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &x in p {
        if x < -1e-9 {
            return Err(Error::Contract(format!("probability {x} below -1e-9")));
        }
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    Ok(h)
}

/// Per-point uncertainty decomposition. `mutual_information` is exactly
/// `predictive_entropy - expected_entropy`; raw values are kept (they can
/// dip a few ulps below zero), clamp only when reporting.
#[derive(Debug, Clone)]
pub struct UncertaintyReport {
    pub predictive_entropy: Vec<f64>,
    pub expected_entropy: Vec<f64>,
    pub mutual_information: Vec<f64>,
}

pub fn uncertainty_report(samples: &PredictiveSamples) -> UncertaintyReport {
    let n = samples.point_count();
    let t = samples.pass_count() as f64;
    let mean = predictive_mean(samples);

    let mut predictive = Vec::with_capacity(n);
    let mut expected = Vec::with_capacity(n);
    for i in 0..n {
        // rows come from a validated PredictiveSamples, so entropy cannot fail
        predictive.push(entropy(mean.row(i)).expect("validated simplex row"));
        let mut h_sum = 0.0;
        for pass in samples.passes() {
            h_sum += entropy(pass.row(i)).expect("validated simplex row");
        }
        expected.push(h_sum / t);
    }
    let mutual = predictive.iter().zip(&expected).map(|(p, e)| p - e).collect();
    UncertaintyReport {
        predictive_entropy: predictive,
        expected_entropy: expected,
        mutual_information: mutual,
    }
}

/// Per-point mutual information between the predictive and posterior
/// distributions, estimated from the passes.
pub fn mutual_information(samples: &PredictiveSamples) -> Vec<f64> {
    uncertainty_report(samples).mutual_information
}

/// Mean of per-point values; the dataset-level summary used in sweeps.
pub fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Clamp used only when printing human-readable summaries.
pub fn clamped_nonnegative(x: f64) -> f64 {
    x.max(0.0)
}
