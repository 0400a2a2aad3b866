//! Softmax, the similarity-distance-magnitude (SDM) activation and its
//! change-of-base negative log likelihood.
//!
//! The SDM activation normalizes `(2 + q)^(d * z_i)`. With `q = e - 2` and
//! `d = 1` it is exactly the softmax at unit inverse temperature; with `d = 0`
//! it is uniform. The log form returns `log_(2+q)` of the normalized values and
//! carries the same `k_eps` guards inside both logarithms as the reference
//! implementation, so it is the form used for every training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdmError};

/// Machine epsilon of 32-bit floats, the default guard inside the log form.
pub const DEFAULT_KEPS: f64 = f32::EPSILON as f64;

/// The base offset: activations use `2 + q` as their base.
pub const Q_OFFSET: f64 = 2.0;

/// The similarity value that turns the activation into a plain softmax.
pub const SOFTMAX_Q: f64 = std::f64::consts::E - 2.0;

/// Inputs of one SDM activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdmInputs {
    pub logits: Vec<f64>,
    pub q: f64,
    pub d: f64,
}

impl SdmInputs {
    pub fn new(logits: Vec<f64>, q: f64, d: f64) -> Result<Self> {
        if !(q >= 0.0 && q.is_finite()) {
            return Err(SdmError::InvalidArgument(format!("q must be >= 0, got {q}")));
        }
        if !(0.0..=1.0).contains(&d) {
            return Err(SdmError::InvalidArgument(format!("d must lie in [0, 1], got {d}")));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(SdmError::InvalidArgument("logits must be finite".into()));
        }
        Ok(Self { logits, q, d })
    }
}

/// Inverse-temperature baseline parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureBaseline {
    pub tau: f64,
}

impl TemperatureBaseline {
    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        softmax(logits, self.tau)
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `exp(tau * z_i) / sum_c exp(tau * z_c)`, max-subtracted.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = max_of(logits);
    let exps: Vec<f64> = logits.iter().map(|z| (tau * (z - m)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax cross-entropy in nats for one labelled logit vector.
pub fn cross_entropy(logits: &[f64], label: usize, tau: f64) -> f64 {
    let m = max_of(logits);
    let lse = logits.iter().map(|z| (tau * (z - m)).exp()).sum::<f64>().ln();
    -(tau * (logits[label] - m) - lse)
}

/// Probability form of the SDM activation.
pub fn sdm_probabilities(logits: &[f64], q: f64, d: f64) -> Vec<f64> {
    let ln_base = (Q_OFFSET + q).ln();
    let m = max_of(logits);
    let rescaled: Vec<f64> = logits.iter().map(|z| (d * (z - m) * ln_base).exp()).collect();
    let total: f64 = rescaled.iter().sum();
    rescaled.into_iter().map(|r| r / total).collect()
}

/// Log form (`log_(2+q)`) of the SDM activation with `k_eps` guards.
pub fn sdm_log_probabilities(logits: &[f64], q: f64, d: f64, k_eps: f64) -> Vec<f64> {
    let ln_base = (Q_OFFSET + q).ln();
    let m = max_of(logits);
    let rescaled: Vec<f64> = logits.iter().map(|z| (d * (z - m) * ln_base).exp()).collect();
    let log_total = (rescaled.iter().sum::<f64>() + k_eps).ln();
    rescaled
        .into_iter()
        .map(|r| ((r + k_eps).ln() - log_total) / ln_base)
        .collect()
}

/// Evaluates the activation in the requested form.
pub fn sdm_activation(inputs: &SdmInputs, log_form: bool, k_eps: f64) -> Vec<f64> {
    if log_form {
        sdm_log_probabilities(&inputs.logits, inputs.q, inputs.d, k_eps)
    } else {
        sdm_probabilities(&inputs.logits, inputs.q, inputs.d)
    }
}

/// Negative selected entry of a log-form output.
pub fn sdm_nll(log_output: &[f64], label: usize) -> Result<f64> {
    log_output
        .get(label)
        .map(|v| -v)
        .ok_or_else(|| SdmError::InvalidArgument(format!("label {label} out of range")))
}

/// Vector-Jacobian product of the log form with respect to the logits.
///
/// Given `upstream[k] = dL/d(log_out[k])`, returns `dL/dz`. The derivative
/// flows through the max subtraction as well, so it agrees with finite
/// differences of [`sdm_log_probabilities`] away from ties in the maximum.
pub fn sdm_log_backward(logits: &[f64], q: f64, d: f64, k_eps: f64, upstream: &[f64]) -> Vec<f64> {
    let ln_base = (Q_OFFSET + q).ln();
    let star = argmax(logits);
    let m = logits[star];
    let r: Vec<f64> = logits.iter().map(|z| (d * (z - m) * ln_base).exp()).collect();
    let s: f64 = r.iter().sum();
    // d(log_out_k)/du_i, with u = d * ln_base * z and r_k = exp(u_k - u_max):
    //   (1/L) [ r_k/(r_k+eps) (δ_ki - δ_i*) - (r_i - s δ_i*)/(s+eps) ]
    let weighted: Vec<f64> = upstream
        .iter()
        .zip(&r)
        .map(|(g, rk)| g * rk / (rk + k_eps))
        .collect();
    let weighted_sum: f64 = weighted.iter().sum();
    let upstream_sum: f64 = upstream.iter().sum();
    let scale = d; // du/dz = d * ln_base, and 1/L cancels ln_base
    (0..logits.len())
        .map(|i| {
            let mut g = weighted[i] - upstream_sum * r[i] / (s + k_eps);
            if i == star {
                g += -weighted_sum + upstream_sum * s / (s + k_eps);
            }
            g * scale
        })
        .collect()
}

/// `-log_(2+q)` of the true-class activation and its gradient w.r.t. the
/// logits.
pub fn sdm_nll_and_grad(logits: &[f64], label: usize, q: f64, d: f64, k_eps: f64) -> (f64, Vec<f64>) {
    let log_out = sdm_log_probabilities(logits, q, d, k_eps);
    let mut upstream = vec![0.0; logits.len()];
    upstream[label] = -1.0;
    (-log_out[label], sdm_log_backward(logits, q, d, k_eps, &upstream))
}
