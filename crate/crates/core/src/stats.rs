//! Empirical CDFs, robust location/scale, Cauchy quantiles and DKW bands.
//!
//! The eCDF conventions are deliberately narrow:
//!
//! * the quantile of `val` is the count of stored values strictly less than
//!   `val` (the left insertion point) divided by the sample size;
//! * reverse (distance) quantiles are `1 - forward`, so a distance of zero maps
//!   to 1 and a distance beyond every stored value maps to 0;
//! * a saturating eCDF (values known to lie in `[0, 1]`) maps any value at or
//!   above the stored maximum to exactly 1;
//! * an empty eCDF always answers 0, in either direction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdmError};

/// Sorted sample backing an empirical CDF.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    values: Vec<f64>,
    saturating: bool,
}

impl EmpiricalCdf {
    /// Builds an eCDF from an unsorted sample. Non-finite values are kept and
    /// ordered with `f64::total_cmp`.
    pub fn new(mut values: Vec<f64>, saturating: bool) -> Self {
        values.sort_by(f64::total_cmp);
        Self { values, saturating }
    }

    /// Wraps values that are already sorted ascending.
    pub fn from_sorted(values: Vec<f64>, saturating: bool) -> Result<Self> {
        if values.windows(2).any(|w| w[0].total_cmp(&w[1]).is_gt()) {
            return Err(SdmError::InvalidArgument(
                "eCDF values must be sorted ascending".into(),
            ));
        }
        Ok(Self { values, saturating })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_saturating(&self) -> bool {
        self.saturating
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> Option<f64> {
        self.values.last().copied()
    }

    /// Number of stored values strictly less than `val`.
    pub fn left_index(&self, val: f64) -> usize {
        self.values.partition_point(|x| *x < val)
    }

    /// Quantile of `val` under the conventions in the module docs.
    pub fn quantile(&self, val: f64, reverse: bool) -> f64 {
        let n = self.values.len();
        if n == 0 {
            return 0.0;
        }
        if self.saturating && !reverse && val >= self.values[n - 1] {
            return 1.0;
        }
        let index = self.left_index(val) as f64 / n as f64;
        if reverse {
            1.0 - index
        } else {
            index
        }
    }

    /// Quantile function: the smallest stored value `x` with at least a
    /// fraction `p` of the sample at or below `x`. Falls back to the maximum
    /// when `p` exceeds 1. `None` for an empty eCDF.
    pub fn inverse(&self, p: f64) -> Option<f64> {
        let n = self.values.len();
        if n == 0 {
            return None;
        }
        let k = (0..n)
            .find(|k| (k + 1) as f64 / n as f64 >= p)
            .unwrap_or(n - 1);
        Some(self.values[k])
    }
}

/// Location (median) and median absolute deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustScale {
    pub location: f64,
    pub mad: f64,
}

/// Median with the mean-of-middle-two convention for even lengths.
pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Median and MAD around the median. The MAD is unscaled (no normal
/// consistency factor) since it is used directly as a Cauchy scale.
pub fn robust_scale(samples: &[f64]) -> Result<RobustScale> {
    let location =
        median(samples).ok_or_else(|| SdmError::Empty("robust_scale needs samples".into()))?;
    let deviations: Vec<f64> = samples.iter().map(|x| (x - location).abs()).collect();
    let mad = median(&deviations).unwrap_or(0.0);
    Ok(RobustScale { location, mad })
}

/// Quantile function of a Cauchy distribution.
pub fn cauchy_inverse_cdf(location: f64, scale: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SdmError::InvalidArgument(format!(
            "Cauchy quantile level must lie in (0, 1), got {alpha}"
        )));
    }
    if scale < 0.0 || !scale.is_finite() {
        return Err(SdmError::InvalidArgument(format!(
            "Cauchy scale must be finite and non-negative, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(location);
    }
    Ok(location + scale * (std::f64::consts::PI * (alpha - 0.5)).tan())
}

/// DKW band half-width with the sharp constant. An effective sample size of
/// zero (or less) yields the vacuous width 1.
pub fn dkw_epsilon(effective_n: f64, alpha_prime: f64) -> f64 {
    if effective_n <= 0.0 {
        return 1.0;
    }
    let eps = ((2.0 / (1.0 - alpha_prime)).ln() / (2.0 * effective_n)).sqrt();
    if eps.is_nan() {
        1.0
    } else {
        eps.min(1.0)
    }
}
