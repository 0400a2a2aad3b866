//! Comparison estimators: thresholded softmax, temperature scaling and
//! conformal prediction sets (APS, RAPS).

use serde::{Deserialize, Serialize};

use crate::activation::{argmax, cross_entropy};
use crate::error::{Result, SdmError};

pub const LOG_TAU_BOUNDS: (f64, f64) = (-4.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub tau: f64,
    pub nll: f64,
    /// Set when the optimum sits on the search boundary.
    pub at_bound: bool,
}

fn mean_nll(logits: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(z, y)| cross_entropy(z, *y, tau))
        .sum::<f64>()
        / logits.len() as f64
}

/// Inverse temperature (a factor on the logits) minimizing calibration NLL,
/// by golden-section search on `ln τ ∈ [-4, 4]`. The endpoints are compared
/// against the interior optimum, so monotone objectives land on a bound.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureFit> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(SdmError::Shape(format!(
            "{} logit rows and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let f = |t: f64| mean_nll(logits, labels, t.exp());
    let (lo, hi) = LOG_TAU_BOUNDS;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let mut best = (mid, f(mid));
    for edge in [lo, hi] {
        let v = f(edge);
        if v <= best.1 {
            best = (edge, v);
        }
    }
    let at_bound = (best.0 - lo).abs() < 1e-6 || (best.0 - hi).abs() < 1e-6;
    if at_bound {
        log::warn!("temperature search ended at its bound (ln tau = {:.3})", best.0);
    }
    Ok(TemperatureFit {
        tau: best.0.exp(),
        nll: best.1,
        at_bound,
    })
}

/// Admits iff the largest probability reaches `alpha_prime`. Returns the
/// argmax and the admission flag.
pub fn baseline_threshold_predict(probabilities: &[f64], alpha_prime: f64) -> (usize, bool) {
    let y = argmax(probabilities);
    (y, probabilities[y] >= alpha_prime)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConformalVariant {
    Aps,
    Raps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub alpha: f64,
    /// RAPS rank penalty weight.
    pub lambda: f64,
    /// RAPS rank from which the penalty applies.
    pub k_reg: usize,
    /// Randomized scores using `u ~ U(0, 1)` supplied per point.
    pub randomized: bool,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            lambda: 0.01,
            k_reg: 1,
            randomized: false,
        }
    }
}

impl ConformalConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || self.lambda < 0.0 || self.k_reg == 0 {
            return Err(SdmError::InvalidArgument(format!(
                "conformal config needs alpha in (0, 1), lambda >= 0 and k_reg >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Classes by descending probability, ties by index.
fn ranking(probabilities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|a, b| probabilities[*b].total_cmp(&probabilities[*a]).then(a.cmp(b)));
    order
}

fn penalty(variant: ConformalVariant, config: &ConformalConfig, rank: usize) -> f64 {
    match variant {
        ConformalVariant::Aps => 0.0,
        ConformalVariant::Raps => config.lambda * rank.saturating_sub(config.k_reg) as f64,
    }
}

/// Running scores along the ranking: entry `r` is the score reached once the
/// class at 1-based rank `r + 1` is included. With `u`, the last class's mass
/// is scaled by `u`.
fn running_scores(probabilities: &[f64], variant: ConformalVariant, config: &ConformalConfig, u: Option<f64>) -> (Vec<usize>, Vec<f64>) {
    let order = ranking(probabilities);
    let mut cum = 0.0;
    let scores = order
        .iter()
        .enumerate()
        .map(|(r, c)| {
            let before = cum;
            cum += probabilities[*c];
            let mass = match u {
                Some(u) => before + u * probabilities[*c],
                None => cum,
            };
            mass + penalty(variant, config, r + 1)
        })
        .collect();
    (order, scores)
}

/// Conformity score of the true class.
pub fn conformity_score(probabilities: &[f64], label: usize, variant: ConformalVariant, config: &ConformalConfig, u: Option<f64>) -> f64 {
    let (order, scores) = running_scores(probabilities, variant, config, u);
    let r = order.iter().position(|c| *c == label).expect("label within class range");
    scores[r]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub variant: ConformalVariant,
    pub config: ConformalConfig,
    /// `None` when the calibration set is too small: every set is full.
    pub threshold: Option<f64>,
}

/// Conformal threshold: the `⌈(n+1)(1-α)⌉`-th smallest calibration score.
/// `uniforms` supplies one draw per calibration point in randomized mode.
pub fn fit_conformal(
    probabilities: &[Vec<f64>],
    labels: &[usize],
    variant: ConformalVariant,
    config: &ConformalConfig,
    uniforms: Option<&[f64]>,
) -> Result<ConformalCalibration> {
    config.validate()?;
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(SdmError::Empty("conformal calibration needs labeled points".into()));
    }
    if config.randomized && uniforms.is_none_or(|u| u.len() != labels.len()) {
        return Err(SdmError::InvalidArgument("randomized scores need one uniform draw per point".into()));
    }
    let mut scores: Vec<f64> = probabilities
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, y))| {
            let u = if config.randomized { uniforms.map(|u| u[i]) } else { None };
            conformity_score(p, *y, variant, config, u)
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let k = ((n as f64 + 1.0) * (1.0 - config.alpha)).ceil() as usize;
    let threshold = if k > n {
        log::warn!("{n} calibration points are too few for alpha {}: prediction sets are full", config.alpha);
        None
    } else {
        Some(scores[k.max(1) - 1])
    };
    Ok(ConformalCalibration {
        variant,
        config: *config,
        threshold,
    })
}

/// Classes in ranking order, stopping after the first whose running score
/// exceeds the threshold.
pub fn conformal_predict(calibration: &ConformalCalibration, probabilities: &[f64], u: Option<f64>) -> Vec<usize> {
    let Some(threshold) = calibration.threshold else {
        return (0..probabilities.len()).collect();
    };
    let u = if calibration.config.randomized { u } else { None };
    let (order, scores) = running_scores(probabilities, calibration.variant, &calibration.config, u);
    let mut set = Vec::new();
    for (c, s) in order.iter().zip(&scores) {
        set.push(*c);
        if *s > threshold {
            break;
        }
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub points: usize,
    /// Share of sets containing the true label.
    pub coverage: f64,
    pub mean_size: f64,
    pub singleton_fraction: f64,
    /// Accuracy over singleton sets; `None` when there are none.
    pub singleton_accuracy: Option<f64>,
}

pub fn summarize_sets(sets: &[Vec<usize>], labels: &[usize]) -> SetSummary {
    let n = sets.len().max(1) as f64;
    let covered = sets.iter().zip(labels).filter(|(s, y)| s.contains(y)).count();
    let singletons: Vec<bool> = sets.iter().zip(labels).filter(|(s, _)| s.len() == 1).map(|(s, y)| s[0] == *y).collect();
    SetSummary {
        points: sets.len(),
        coverage: covered as f64 / n,
        mean_size: sets.iter().map(Vec::len).sum::<usize>() as f64 / n,
        singleton_fraction: singletons.len() as f64 / n,
        singleton_accuracy: (!singletons.is_empty()).then(|| singletons.iter().filter(|c| **c).count() as f64 / singletons.len() as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::softmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Labels drawn from softmax(z), so τ = 1 is calibrated by construction.
    fn calibrated_sample(n: usize, scale: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = softmax(&z, 1.0);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let y = p.iter().position(|pi| {
                acc += pi;
                u < acc
            });
            labels.push(y.unwrap_or(2));
            logits.push(z.iter().map(|v| v * scale).collect());
        }
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_keep_unit_temperature() {
        let (z, y) = calibrated_sample(5000, 1.0, 1);
        let fit = fit_temperature(&z, &y).unwrap();
        assert!((fit.tau - 1.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn overconfident_logits_recover_the_scale() {
        let (z, y) = calibrated_sample(5000, 10.0, 2);
        let fit = fit_temperature(&z, &y).unwrap();
        assert!((fit.tau - 0.1).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn single_correct_point_hits_the_bound() {
        let fit = fit_temperature(&[vec![2.0, 0.0]], &[0]).unwrap();
        assert!(fit.at_bound);
        assert!((fit.tau.ln() - LOG_TAU_BOUNDS.1).abs() < 1e-9);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(baseline_threshold_predict(&[0.96, 0.04], 0.95), (0, true));
        assert_eq!(baseline_threshold_predict(&[0.94, 0.06], 0.95), (0, false));
        assert_eq!(baseline_threshold_predict(&[0.5, 0.5], 0.5), (0, true));
    }

    #[test]
    fn score_examples() {
        let p = [0.5, 0.3, 0.2];
        let aps = ConformalConfig::default();
        assert!((conformity_score(&p, 1, ConformalVariant::Aps, &aps, None) - 0.8).abs() < 1e-12);
        let raps = ConformalConfig {
            lambda: 0.1,
            k_reg: 1,
            ..Default::default()
        };
        assert!((conformity_score(&p, 1, ConformalVariant::Raps, &raps, None) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn vacuous_threshold_gives_full_set() {
        let cal = ConformalCalibration {
            variant: ConformalVariant::Aps,
            config: ConformalConfig::default(),
            threshold: Some(1.0),
        };
        assert_eq!(conformal_predict(&cal, &[0.2, 0.5, 0.3], None), vec![1, 2, 0]);
    }

    #[test]
    fn tiny_calibration_falls_back_to_full_sets() {
        let cal = fit_conformal(&[vec![0.9, 0.1]], &[0], ConformalVariant::Aps, &ConformalConfig::default(), None).unwrap();
        assert_eq!(cal.threshold, None);
        assert_eq!(conformal_predict(&cal, &[0.9, 0.1], None).len(), 2);
    }

    #[test]
    fn quantile_index_convention() {
        // n = 19, α = 0.05: k = ⌈20 · 0.95⌉ = 19, the largest score
        let probs: Vec<Vec<f64>> = (0..19).map(|i| vec![1.0 - i as f64 * 0.01, i as f64 * 0.01]).collect();
        let labels = vec![0; 19];
        let cal = fit_conformal(&probs, &labels, ConformalVariant::Aps, &ConformalConfig::default(), None).unwrap();
        assert!((cal.threshold.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aps_covers_exchangeable_data() {
        let (z, y) = calibrated_sample(4000, 1.0, 3);
        let p: Vec<Vec<f64>> = z.iter().map(|v| softmax(v, 1.0)).collect();
        let cal = fit_conformal(&p[..2000], &y[..2000], ConformalVariant::Aps, &ConformalConfig::default(), None).unwrap();
        let covered = p[2000..]
            .iter()
            .zip(&y[2000..])
            .filter(|(pi, yi)| conformal_predict(&cal, pi, None).contains(yi))
            .count();
        assert!(covered as f64 / 2000.0 >= 0.92);
    }

    proptest! {
        #[test]
        fn temperature_preserves_argmax(z in proptest::collection::vec(-10.0f64..10.0, 2..8), log_tau in -4.0f64..4.0) {
            let p = softmax(&z, log_tau.exp());
            prop_assert_eq!(argmax(&p), argmax(&z));
        }

        #[test]
        fn prediction_sets_grow_with_threshold(p in proptest::collection::vec(0.01f64..1.0, 2..6), t1 in 0.0f64..1.2, t2 in 0.0f64..1.2) {
            let s: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|v| v / s).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mk = |t| ConformalCalibration { variant: ConformalVariant::Aps, config: ConformalConfig::default(), threshold: Some(t) };
            prop_assert!(conformal_predict(&mk(lo), &p, None).len() <= conformal_predict(&mk(hi), &p, None).len());
        }
    }

    #[test]
    fn set_summary_counts() {
        let sets = vec![vec![0], vec![1, 0], vec![2], vec![1]];
        let s = summarize_sets(&sets, &[0, 0, 1, 0]);
        assert_eq!(s.coverage, 0.5);
        assert_eq!(s.mean_size, 1.25);
        assert_eq!(s.singleton_fraction, 0.75);
        assert_eq!(s.singleton_accuracy, Some(1.0 / 3.0));
    }
}
