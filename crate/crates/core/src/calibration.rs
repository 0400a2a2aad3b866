//! Post-activation calibration chain: per-class quantile vector, soft q-bin,
//! rescaled output, DKW-widened bounds and the three point estimates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{argmax, sdm_nll_and_grad, Q_OFFSET};
use crate::error::{Result, SdmError};
use crate::numerics::{Adam, AdamConfig};
use crate::stats::{dkw_epsilon, EmpiricalCdf};

/// Class-by-class linear map applied to quantile vectors, no bias.
/// Row-major: `weights[c * classes + i]` maps input `c` to output `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rescaler {
    pub classes: usize,
    pub weights: Vec<f64>,
}

impl Rescaler {
    pub fn identity(classes: usize) -> Self {
        let mut weights = vec![0.0; classes * classes];
        for c in 0..classes {
            weights[c * classes + c] = 1.0;
        }
        Self { classes, weights }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut out = vec![0.0; c];
        for (k, vk) in v.iter().enumerate() {
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.weights[k * c + i] * vk;
            }
        }
        out
    }
}

/// Everything needed at test time to turn an activation output into the
/// calibrated estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTables {
    pub classes: usize,
    pub alpha_prime: f64,
    /// Nearest distances of calibration points with `q > 0`, by true label.
    pub distance_cdfs: Vec<EmpiricalCdf>,
    /// Activation output entry `c` over calibration points of true class `c`.
    pub output_cdfs: Vec<EmpiricalCdf>,
    /// Soft q-bins (before rescaling) of calibration points, by true label.
    pub softqbin_cdfs: Vec<EmpiricalCdf>,
    pub class_counts: Vec<usize>,
    pub rescaler: Rescaler,
}

/// Calibration-side inputs for building tables.
#[derive(Debug, Clone)]
pub struct CalibrationPoint {
    pub output: Vec<f64>,
    pub q: f64,
    pub d_x: f64,
    pub label: usize,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointUncertainty {
    pub prediction: usize,
    pub v: Vec<f64>,
    pub v_rescaled: Vec<f64>,
    pub soft_qbin: f64,
    pub hard_qbin: u64,
    pub o: Vec<f64>,
    pub effective_n: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub v_lower: Vec<f64>,
    pub v_upper: Vec<f64>,
    pub soft_qbin_lower: f64,
    pub soft_qbin_upper: f64,
    pub p_lower: f64,
    pub p_centroid: f64,
    pub p_upper: f64,
    pub ood_centroid: bool,
    pub ood_lower: bool,
    pub ood_upper: bool,
}

impl PointUncertainty {
    pub fn any_ood(&self) -> bool {
        self.ood_centroid || self.ood_lower || self.ood_upper
    }
}

/// `v_c`: saturating per-class eCDF of output entry `c`.
pub fn compute_quantile_vector(tables: &CalibrationTables, output: &[f64]) -> Vec<f64> {
    tables
        .output_cdfs
        .iter()
        .zip(output)
        .map(|(cdf, o)| cdf.quantile(*o, false))
        .collect()
}

/// Soft q-bin `v_ŷ · ln(2 + q)` and its floor.
pub fn compute_softqbin(q: f64, v: &[f64], prediction: usize) -> (f64, u64) {
    let soft = v[prediction] * (Q_OFFSET + q).ln();
    (soft, soft.max(0.0).floor() as u64)
}

/// Normalizes `v' = W''ᵀv` with base `2 + q̃`. Returns the distribution, the
/// entry at `prediction` and whether the argmax disagrees with `prediction`.
pub fn rescale_outputs(rescaler: &Rescaler, v: &[f64], soft_qbin: f64, prediction: usize) -> (Vec<f64>, f64, bool) {
    let v_prime = rescaler.apply(v);
    let o = normalize_with_base(&v_prime, soft_qbin);
    let mismatch = argmax(&o) != prediction;
    let selected = o[prediction];
    (o, selected, mismatch)
}

fn normalize_with_base(values: &[f64], soft_qbin: f64) -> Vec<f64> {
    let log_base = (Q_OFFSET + soft_qbin).ln();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r: Vec<f64> = values.iter().map(|x| (log_base * (x - max)).exp()).collect();
    let s: f64 = r.iter().sum();
    r.into_iter().map(|x| x / s).collect()
}

/// DKW-widened quantile vectors. Returns
/// `(n̂, ε, v_lower, v_upper, q̃_lower, q̃_upper)`.
#[allow(clippy::type_complexity)]
pub fn dkw_adjusted_bounds(
    tables: &CalibrationTables,
    v: &[f64],
    q: f64,
    soft_qbin: f64,
    prediction: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64, f64) {
    let effective_n: Vec<f64> = tables
        .softqbin_cdfs
        .iter()
        .zip(&tables.class_counts)
        .map(|(cdf, n)| *n as f64 * cdf.quantile(soft_qbin, false))
        .collect();
    let epsilon: Vec<f64> = effective_n.iter().map(|n| dkw_epsilon(*n, tables.alpha_prime)).collect();
    let mut lower = Vec::with_capacity(v.len());
    let mut upper = Vec::with_capacity(v.len());
    for (c, (vc, e)) in v.iter().zip(&epsilon).enumerate() {
        let (lo, hi) = if c == prediction { (vc - e, vc + e) } else { (vc + e, vc - e) };
        lower.push(lo.clamp(0.0, 1.0));
        upper.push(hi.clamp(0.0, 1.0));
    }
    let log_q = (Q_OFFSET + q).ln();
    let (ql, qu) = (lower[prediction] * log_q, upper[prediction] * log_q);
    (effective_n, epsilon, lower, upper, ql, qu)
}

/// Runs the full chain for one activation output with similarity `q` and
/// the adaptor's predicted class.
pub fn point_uncertainty(tables: &CalibrationTables, output: &[f64], q: f64, prediction: usize) -> PointUncertainty {
    let v = compute_quantile_vector(tables, output);
    let (mut soft_qbin, mut hard_qbin) = compute_softqbin(q, &v, prediction);
    let v_rescaled = tables.rescaler.apply(&v);
    let (o, p_centroid, ood_centroid) = rescale_outputs(&tables.rescaler, &v, soft_qbin, prediction);
    if ood_centroid {
        soft_qbin = 0.0;
        hard_qbin = 0;
    }
    let (effective_n, epsilon, v_lower, v_upper, mut soft_qbin_lower, mut soft_qbin_upper) =
        dkw_adjusted_bounds(tables, &v, q, soft_qbin, prediction);
    let (_, p_lower, ood_lower) = rescale_outputs(&tables.rescaler, &v_lower, soft_qbin_lower, prediction);
    if ood_lower {
        soft_qbin_lower = 0.0;
    }
    let (_, p_upper, ood_upper) = rescale_outputs(&tables.rescaler, &v_upper, soft_qbin_upper, prediction);
    if ood_upper {
        soft_qbin_upper = 0.0;
    }
    PointUncertainty {
        prediction,
        v,
        v_rescaled,
        soft_qbin,
        hard_qbin,
        o,
        effective_n,
        epsilon,
        v_lower,
        v_upper,
        soft_qbin_lower,
        soft_qbin_upper,
        p_lower,
        p_centroid,
        p_upper,
        ood_centroid,
        ood_lower,
        ood_upper,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescalerConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Training stops once the epoch loss has failed to improve on the best
    /// loss for more than this many consecutive epochs.
    pub patience: usize,
    /// Half-width of the uniform noise added to the identity at start.
    pub init_noise: f64,
    pub k_eps: f64,
    pub seed: u64,
}

impl Default for RescalerConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            learning_rate: 1e-4,
            patience: 10,
            init_noise: 0.01,
            k_eps: crate::activation::DEFAULT_KEPS,
            seed: 0,
        }
    }
}

/// One rescaler training row: quantile vector, its soft q-bin and the true
/// label.
#[derive(Debug, Clone)]
pub struct RescalerSample {
    pub v: Vec<f64>,
    pub soft_qbin: f64,
    pub label: usize,
}

/// Mean negative log-likelihood of the rescaled output and its gradient with
/// respect to the rescaler weights.
pub fn rescaler_loss_and_grad(rescaler: &Rescaler, samples: &[RescalerSample], k_eps: f64) -> (f64, Vec<f64>) {
    let c = rescaler.classes;
    let mut grad = vec![0.0; c * c];
    let mut total = 0.0;
    for s in samples {
        let z = rescaler.apply(&s.v);
        let (loss, dz) = sdm_nll_and_grad(&z, s.label, s.soft_qbin, 1.0, k_eps);
        total += loss;
        for (k, vk) in s.v.iter().enumerate() {
            for (i, g) in dz.iter().enumerate() {
                grad[k * c + i] += vk * g;
            }
        }
    }
    let n = samples.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

/// Trains the rescaler with batch size 1 and a seeded shuffle per epoch,
/// returning the weights with the lowest epoch loss and the loss history.
pub fn train_rescaler(samples: &[RescalerSample], classes: usize, config: &RescalerConfig) -> Result<(Rescaler, Vec<f64>)> {
    if samples.is_empty() {
        return Err(SdmError::Empty("rescaler needs calibration samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.v.len() != classes || s.label >= classes) {
        return Err(SdmError::Shape(format!(
            "rescaler sample with {} entries and label {} for {classes} classes",
            s.v.len(),
            s.label
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rescaler = Rescaler::identity(classes);
    if config.init_noise > 0.0 {
        for w in rescaler.weights.iter_mut() {
            *w += rng.random_range(-config.init_noise..config.init_noise);
        }
    }
    let mut adam = Adam::new(&[classes * classes], AdamConfig::default());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best = rescaler.clone();
    let mut best_loss = f64::INFINITY;
    let mut counter = 0;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (_, grad) = rescaler_loss_and_grad(&rescaler, std::slice::from_ref(&samples[i]), config.k_eps);
            adam.update(&mut [&mut rescaler.weights], &[&grad], config.learning_rate)?;
        }
        let (loss, _) = rescaler_loss_and_grad(&rescaler, samples, config.k_eps);
        if !loss.is_finite() {
            return Err(SdmError::NonFiniteLoss {
                loss,
                epoch,
                context: "rescaler".into(),
            });
        }
        history.push(loss);
        log::debug!("rescaler epoch={epoch} loss={loss:.6}");
        if loss < best_loss {
            best_loss = loss;
            best = rescaler.clone();
            counter = 0;
        } else {
            counter += 1;
        }
        if counter > config.patience {
            break;
        }
    }
    Ok((best, history))
}

/// Builds the test-time tables from calibration activations, training the
/// rescaler on the way.
pub fn build_tables(
    points: &[CalibrationPoint],
    classes: usize,
    alpha_prime: f64,
    rescaler_config: &RescalerConfig,
) -> Result<CalibrationTables> {
    if points.is_empty() {
        return Err(SdmError::Empty("calibration set".into()));
    }
    if !(alpha_prime > 0.0 && alpha_prime < 1.0) {
        return Err(SdmError::InvalidArgument(format!("alpha' must lie in (0, 1), got {alpha_prime}")));
    }
    let mut outputs = vec![Vec::new(); classes];
    let mut class_counts = vec![0; classes];
    for p in points {
        if p.output.len() != classes || p.label >= classes {
            return Err(SdmError::Shape("calibration output does not match class count".into()));
        }
        outputs[p.label].push(p.output[p.label]);
        class_counts[p.label] += 1;
    }
    let q_counts: Vec<usize> = points.iter().map(|p| p.q as usize).collect();
    let d_x: Vec<f64> = points.iter().map(|p| p.d_x).collect();
    let labels: Vec<usize> = points.iter().map(|p| p.label).collect();
    let mut tables = CalibrationTables {
        classes,
        alpha_prime,
        distance_cdfs: crate::similarity::distance_cdfs(&d_x, &q_counts, &labels, classes),
        output_cdfs: outputs.into_iter().map(|v| EmpiricalCdf::new(v, true)).collect(),
        softqbin_cdfs: Vec::new(),
        class_counts,
        rescaler: Rescaler::identity(classes),
    };
    let samples: Vec<RescalerSample> = points
        .iter()
        .map(|p| {
            let v = compute_quantile_vector(&tables, &p.output);
            let (soft_qbin, _) = compute_softqbin(p.q, &v, p.prediction);
            RescalerSample {
                v,
                soft_qbin,
                label: p.label,
            }
        })
        .collect();
    let mut per_class = vec![Vec::new(); classes];
    for s in &samples {
        per_class[s.label].push(s.soft_qbin);
    }
    tables.softqbin_cdfs = per_class.into_iter().map(|v| EmpiricalCdf::new(v, false)).collect();
    let (rescaler, history) = train_rescaler(&samples, classes, rescaler_config)?;
    log::info!(
        "rescaler trained: epochs={} best_loss={:.6}",
        history.len(),
        history.iter().copied().fold(f64::INFINITY, f64::min)
    );
    tables.rescaler = rescaler;
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tables(rescaler: Rescaler) -> CalibrationTables {
        CalibrationTables {
            classes: 2,
            alpha_prime: 0.9,
            distance_cdfs: vec![EmpiricalCdf::default(); 2],
            output_cdfs: vec![
                EmpiricalCdf::new(vec![0.2, 0.4, 0.6, 0.8], true),
                EmpiricalCdf::new(vec![0.1, 0.3, 0.5, 0.7], true),
            ],
            softqbin_cdfs: vec![
                EmpiricalCdf::new(vec![0.5, 1.0, 1.5, 2.0], false),
                EmpiricalCdf::new(vec![0.5, 1.0, 1.5, 2.0], false),
            ],
            class_counts: vec![200, 200],
            rescaler,
        }
    }

    #[test]
    fn quantile_vector_examples() {
        let t = tables(Rescaler::identity(2));
        assert_eq!(compute_quantile_vector(&t, &[0.8, 0.2]), vec![1.0, 0.25]);
        assert_eq!(compute_quantile_vector(&t, &[0.1, 0.05]), vec![0.0, 0.0]);
        assert_eq!(compute_quantile_vector(&t, &[0.5, 0.2]), vec![0.5, 0.25]);
    }

    #[test]
    fn softqbin_examples() {
        assert_eq!(compute_softqbin(10.0, &[0.0, 1.0], 0), (0.0, 0));
        let (s, b) = compute_softqbin(std::f64::consts::E - 2.0, &[1.0, 0.0], 0);
        assert!((s - 1.0).abs() < 1e-12 && b == 1);
        let (s, b) = compute_softqbin(5.0, &[0.0, 0.5], 1);
        assert!((s - 0.5 * 7f64.ln()).abs() < 1e-12 && b == 0);
    }

    #[test]
    fn rescale_examples() {
        let (o, p, ood) = rescale_outputs(&Rescaler::identity(2), &[1.0, 0.0], 1.0, 0);
        assert!((o[0] - 0.75).abs() < 1e-12 && (o[1] - 0.25).abs() < 1e-12);
        assert!((p - 0.75).abs() < 1e-12 && !ood);
        let (o, _, _) = rescale_outputs(&Rescaler::identity(2), &[1.0, 0.0], 0.0, 0);
        assert!((o[0] - 2.0 / 3.0).abs() < 1e-12);
        let flip = Rescaler {
            classes: 2,
            weights: vec![0.0, 1.0, 1.0, 0.0],
        };
        assert!(rescale_outputs(&flip, &[1.0, 0.0], 1.0, 0).2);
    }

    #[test]
    fn flipped_rescaler_zeroes_soft_qbin() {
        let flip = Rescaler {
            classes: 2,
            weights: vec![0.0, 1.0, 1.0, 0.0],
        };
        let u = point_uncertainty(&tables(flip), &[0.9, 0.1], 5.0, 0);
        assert!(u.ood_centroid && u.soft_qbin == 0.0 && u.hard_qbin == 0);
    }

    #[test]
    fn bounds_follow_sign_pattern() {
        // saturated soft q-bin eCDF: n̂ = 200 for both classes
        let t = tables(Rescaler::identity(2));
        let (n, eps, lo, hi, _, _) = dkw_adjusted_bounds(&t, &[0.9, 0.2], 3.0, 10.0, 0);
        assert_eq!(n, vec![200.0, 200.0]);
        assert!((eps[0] - dkw_epsilon(200.0, 0.9)).abs() < 1e-15);
        let e = eps[0];
        assert!((lo[0] - (0.9 - e)).abs() < 1e-12 && (lo[1] - (0.2 + e)).abs() < 1e-12);
        assert!((hi[0] - (0.9 + e).min(1.0)).abs() < 1e-12 && (hi[1] - (0.2 - e)).abs() < 1e-12);
    }

    #[test]
    fn fixed_epsilon_example() {
        let mut t = tables(Rescaler::identity(2));
        // choose counts so that ε = 0.1 exactly: n = ln(2/(1-α'))/(2·0.01)
        let n = (2.0f64 / 0.1).ln() / 0.02;
        t.softqbin_cdfs = vec![EmpiricalCdf::new(vec![0.0], false); 2];
        t.class_counts = vec![0, 0];
        let (_, eps, ..) = dkw_adjusted_bounds(&t, &[0.9, 0.2], 1.0, 1.0, 0);
        assert_eq!(eps, vec![1.0, 1.0]);
        assert!((dkw_epsilon(n, 0.9) - 0.1).abs() < 1e-12);
        let v = [0.9, 0.2];
        let lower: Vec<f64> = vec![(v[0] - 0.1f64).clamp(0.0, 1.0), (v[1] + 0.1f64).clamp(0.0, 1.0)];
        assert!((lower[0] - 0.8).abs() < 1e-12 && (lower[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_effective_size_empties_lower_bound() {
        let mut t = tables(Rescaler::identity(2));
        t.class_counts = vec![0, 0];
        let (_, eps, lo, ..) = dkw_adjusted_bounds(&t, &[0.7, 0.1], 2.0, 1.0, 0);
        assert_eq!(eps[0], 1.0);
        assert_eq!(lo[0], 0.0);
    }

    fn fd_check(samples: &[RescalerSample], rescaler: &Rescaler) -> f64 {
        let (_, analytic) = rescaler_loss_and_grad(rescaler, samples, 0.0);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..rescaler.weights.len())
            .map(|i| {
                let mut p = rescaler.clone();
                p.weights[i] += h;
                let mut m = rescaler.clone();
                m.weights[i] -= h;
                (rescaler_loss_and_grad(&p, samples, 0.0).0 - rescaler_loss_and_grad(&m, samples, 0.0).0) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-300)
    }

    #[test]
    fn rescaler_gradient_matches_finite_differences() {
        let samples = vec![
            RescalerSample { v: vec![0.9, 0.3, 0.1], soft_qbin: 1.7, label: 0 },
            RescalerSample { v: vec![0.2, 0.6, 0.5], soft_qbin: 0.4, label: 2 },
        ];
        let r = Rescaler {
            classes: 3,
            weights: vec![1.1, 0.2, -0.3, 0.1, 0.9, 0.05, -0.2, 0.3, 1.2],
        };
        assert!(fd_check(&samples, &r) < 1e-4);
    }

    fn separated_samples() -> Vec<RescalerSample> {
        (0..40)
            .map(|i| {
                let label = i % 2;
                let hi = 0.8 + 0.004 * i as f64;
                let v = if label == 0 { vec![hi, 0.1] } else { vec![0.1, hi] };
                RescalerSample { v, soft_qbin: 1.5, label }
            })
            .collect()
    }

    #[test]
    fn rescaler_loss_decreases_on_separated_data() {
        let config = RescalerConfig {
            max_epochs: 5,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (_, history) = train_rescaler(&separated_samples(), 2, &config).unwrap();
        assert!(history.windows(2).all(|w| w[1] < w[0]), "{history:?}");
    }

    #[test]
    fn single_epoch_returns_epoch_one_weights() {
        let config = RescalerConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let (r, history) = train_rescaler(&separated_samples(), 2, &config).unwrap();
        assert_eq!(history.len(), 1);
        let (loss, _) = rescaler_loss_and_grad(&r, &separated_samples(), config.k_eps);
        assert_eq!(loss, history[0]);
    }

    #[test]
    fn patience_stops_training() {
        // a learning rate of zero never improves after epoch 1
        let config = RescalerConfig {
            max_epochs: 100,
            learning_rate: 0.0,
            patience: 3,
            ..Default::default()
        };
        let (_, history) = train_rescaler(&separated_samples(), 2, &config).unwrap();
        assert_eq!(history.len(), 5);
    }

    proptest! {
        #[test]
        fn bounds_bracket_v(v0 in 0.0f64..1.0, v1 in 0.0f64..1.0, q in 0.0f64..50.0, qt in 0.0f64..3.0, pred in 0usize..2) {
            let t = tables(Rescaler::identity(2));
            let v = [v0, v1];
            let (_, _, lo, hi, ql, qu) = dkw_adjusted_bounds(&t, &v, q, qt, pred);
            let other = 1 - pred;
            prop_assert!(lo[pred] <= v[pred] && v[pred] <= hi[pred]);
            prop_assert!(lo[other] >= v[other] && v[other] >= hi[other]);
            prop_assert!(lo.iter().chain(&hi).all(|x| (0.0..=1.0).contains(x)));
            let (qt_mid, _) = compute_softqbin(q, &v, pred);
            prop_assert!(ql <= qt_mid + 1e-12 && qt_mid <= qu + 1e-12);
        }

        #[test]
        fn rescaled_output_is_a_distribution(v in proptest::collection::vec(-3.0f64..3.0, 2..6), qt in 0.0f64..10.0, shift in -5.0f64..5.0) {
            let r = Rescaler::identity(v.len());
            let (o, _, _) = rescale_outputs(&r, &v, qt, 0);
            prop_assert!((o.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let (o2, _, _) = rescale_outputs(&r, &shifted, qt, 0);
            prop_assert!(o.iter().zip(&o2).all(|(a, b)| (a - b).abs() < 1e-9));
        }

        #[test]
        fn identity_rescaler_lower_below_centroid(a in 0.0f64..1.0, b in 0.0f64..1.0, q in 0.0f64..30.0) {
            let t = tables(Rescaler::identity(2));
            let u = point_uncertainty(&t, &[a.max(b) + 0.01, a.min(b)], q, 0);
            if !u.any_ood() {
                prop_assert!(u.p_lower <= u.p_centroid + 1e-12);
            }
        }
    }
}
