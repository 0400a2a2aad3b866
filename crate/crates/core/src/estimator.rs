//! The index-conditional estimator: admission test and adjusted lower
//! probability for new embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{argmax, sdm_probabilities};
use crate::calibration::{point_uncertainty, CalibrationTables, PointUncertainty};
use crate::data::DatasetBundle;
use crate::error::{Result, SdmError};
use crate::region::{centroid_medians, find_min_valid_qbin, robust_thresholds_and_offsets, RegionRecord, RegionThresholds, RoundStats};
use crate::similarity::{distance_quantile_d, query, Query, SupportIndex};
use crate::training::{train_full, AdaptorModel, TrainingRunConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 3;

/// Why a point was not admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// Training found no high-probability region.
    NoRegion,
    /// An argmax mismatch or an empty distance reference.
    OutOfDistribution,
    /// Lower soft q-bin under the robust threshold.
    BelowRegion,
    /// Adjusted lower probability under the class quantile.
    BelowQuantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    pub prediction: usize,
    pub admitted: bool,
    /// Offset-adjusted lower probability; present only when admitted.
    pub p_lower: Option<f64>,
    pub q: usize,
    pub d: f64,
    pub soft_qbin: f64,
    pub hard_qbin: u64,
    pub exemplar_ids: Vec<String>,
    #[serde(skip)]
    pub d_x: f64,
    #[serde(skip)]
    pub soft_qbin_lower: f64,
    /// Unadjusted lower probability, kept for diagnostics.
    #[serde(skip)]
    pub p_lower_raw: f64,
    #[serde(skip)]
    pub offset: f64,
    #[serde(skip)]
    pub rejection: Option<Rejection>,
}

/// Complete trained artifact. Immutable once built, apart from `retune`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorArchive {
    pub format_version: u32,
    pub classes: usize,
    pub dim: usize,
    pub config: TrainingRunConfig,
    pub model: AdaptorModel,
    pub index: SupportIndex,
    pub tables: CalibrationTables,
    pub thresholds: RegionThresholds,
    pub rounds: Vec<RoundStats>,
    pub round_records: Vec<Vec<RegionRecord>>,
    pub winner_round: usize,
    /// Adaptor logits and labels of the winning calibration split, for the
    /// baseline comparisons.
    pub calibration_logits: Vec<Vec<f64>>,
    pub calibration_labels: Vec<usize>,
    pub top_k: usize,
}

impl EstimatorArchive {
    /// Trains every stage on the bundle's train and calibration splits.
    pub fn build(bundle: &DatasetBundle, config: &TrainingRunConfig) -> Result<Self> {
        let outcome = train_full(bundle, config)?;
        let w = outcome.winner;
        Ok(Self {
            format_version: FORMAT_VERSION,
            classes: bundle.classes,
            dim: bundle.dim,
            config: *config,
            model: w.model,
            index: w.index,
            tables: w.tables,
            thresholds: outcome.thresholds,
            rounds: outcome.rounds,
            round_records: outcome.round_records,
            winner_round: outcome.winner_round,
            calibration_logits: w.calibration_logits,
            calibration_labels: w.calibration_labels,
            top_k: DEFAULT_TOP_K,
        })
    }

    pub fn alpha_prime(&self) -> f64 {
        self.tables.alpha_prime
    }

    /// Full calibration chain for one embedding, without the admission step.
    pub fn uncertainty(&self, embedding: &[f64]) -> Result<(PointUncertainty, usize, f64, f64, Vec<usize>, bool)> {
        let (hidden, logits) = self.model.forward(embedding)?;
        let prediction = argmax(&logits);
        let n = query(
            &self.index,
            &Query {
                hidden: &hidden,
                prediction,
                exclude: None,
            },
            self.top_k,
        )?;
        let (d, empty_reference) = distance_quantile_d(&self.tables.distance_cdfs, n.d_x);
        let output = sdm_probabilities(&logits, n.q as f64, d);
        let u = point_uncertainty(&self.tables, &output, n.q as f64, prediction);
        Ok((u, n.q, n.d_x, d, n.nearest, empty_reference))
    }

    pub fn predict(&self, id: &str, embedding: &[f64]) -> Result<Verdict> {
        if embedding.len() != self.dim {
            return Err(SdmError::DimensionMismatch {
                id: id.to_string(),
                expected: self.dim,
                found: embedding.len(),
            });
        }
        let (u, q, d_x, d, nearest, empty_reference) = self.uncertainty(embedding)?;
        let bin = u.soft_qbin_lower.max(0.0).floor() as u64;
        let offset = self.thresholds.offset(u.prediction, bin);
        let adjusted = (u.p_lower - offset).max(0.0);
        let rejection = match (&self.thresholds.psi, self.thresholds.robust_min_valid_qbin) {
            (Some(psi), Some(c_hat)) => {
                if u.any_ood() || empty_reference {
                    Some(Rejection::OutOfDistribution)
                } else if u.soft_qbin_lower < c_hat {
                    Some(Rejection::BelowRegion)
                } else if u.p_lower - offset < psi[u.prediction] {
                    Some(Rejection::BelowQuantile)
                } else {
                    None
                }
            }
            _ => Some(Rejection::NoRegion),
        };
        let admitted = rejection.is_none();
        Ok(Verdict {
            id: id.to_string(),
            prediction: u.prediction,
            admitted,
            p_lower: admitted.then_some(adjusted),
            q,
            d,
            soft_qbin: u.soft_qbin,
            hard_qbin: u.hard_qbin,
            exemplar_ids: nearest.iter().map(|i| self.index.ids()[*i].clone()).collect(),
            d_x,
            soft_qbin_lower: u.soft_qbin_lower,
            p_lower_raw: u.p_lower,
            offset,
            rejection,
        })
    }

    /// Order-preserving parallel prediction.
    pub fn predict_batch<'a>(&self, items: &[(&'a str, &'a [f64])]) -> Result<Vec<Verdict>> {
        items.par_iter().map(|(id, x)| self.predict(id, x)).collect()
    }

    /// Re-derives the α′-dependent thresholds from the stored per-round
    /// calibration records. Adaptor, index, eCDFs and rescaler are kept.
    pub fn retune(&mut self, alpha_prime: f64) -> Result<()> {
        if !(alpha_prime > 0.0 && alpha_prime < 1.0) {
            return Err(SdmError::InvalidArgument(format!("alpha' must lie in (0, 1), got {alpha_prime}")));
        }
        if self.round_records.len() != self.rounds.len() {
            return Err(SdmError::Archive("per-round calibration records are missing".into()));
        }
        for (stats, records) in self.rounds.iter_mut().zip(&self.round_records) {
            let region = find_min_valid_qbin(records, self.classes, alpha_prime);
            stats.min_valid_qbin = region.as_ref().map(|r| r.0);
            stats.psi = region.map(|r| r.1);
            stats.centroid_medians = centroid_medians(records);
        }
        self.thresholds = robust_thresholds_and_offsets(&self.rounds, self.winner_round, alpha_prime)?;
        self.tables.alpha_prime = alpha_prime;
        self.config.alpha_prime = alpha_prime;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::RescalerConfig;
    use crate::data::{stratified_even_split, LabeledInstance};
    use crate::numerics::AdaptorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, sep: f64, seed: u64, prefix: &str) -> Vec<LabeledInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let y = i % 2;
                let c = if y == 0 { -sep / 2.0 } else { sep / 2.0 };
                let e = (0..3).map(|k| if k == 0 { c } else { 0.0 } + noise.sample(&mut rng)).collect();
                LabeledInstance::new(format!("{prefix}{i}"), y, e)
            })
            .collect()
    }

    fn archive() -> (EstimatorArchive, DatasetBundle) {
        let (train, cal) = stratified_even_split(&blobs(400, 5.0, 1, "p"), 2, 0);
        let bundle = DatasetBundle::new(2, train, cal, blobs(100, 5.0, 2, "t"), 0).unwrap();
        let config = TrainingRunConfig {
            rounds: 2,
            max_epochs: 4,
            batch_size: 25,
            learning_rate: 1e-2,
            alpha_prime: 0.9,
            seed: 3,
            adaptor: AdaptorConfig {
                filters: 8,
                ..Default::default()
            },
            rescaler: RescalerConfig {
                max_epochs: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        (EstimatorArchive::build(&bundle, &config).unwrap(), bundle)
    }

    #[test]
    fn verdicts_are_consistent_and_deterministic() {
        let (a, bundle) = archive();
        let items: Vec<(&str, &[f64])> = bundle.test.iter().map(|r| (r.id.as_str(), r.embedding.as_slice())).collect();
        let v1 = a.predict_batch(&items).unwrap();
        let v2 = a.predict_batch(&items).unwrap();
        assert_eq!(v1, v2);
        let c_hat = a.thresholds.robust_min_valid_qbin;
        for v in &v1 {
            assert_eq!(v.admitted, v.p_lower.is_some());
            assert_eq!(v.exemplar_ids.len(), DEFAULT_TOP_K);
            if v.admitted {
                let psi = a.thresholds.psi.as_ref().unwrap();
                assert!(v.p_lower.unwrap() >= psi[v.prediction]);
                assert!(v.soft_qbin_lower.floor() >= c_hat.unwrap().floor());
            }
        }
    }

    #[test]
    fn far_away_points_are_rejected() {
        let (a, _) = archive();
        let v = a.predict("far", &[1e4, -1e4, 1e4]).unwrap();
        assert!(!v.admitted);
        assert_eq!(v.d, 0.0);
    }

    #[test]
    fn missing_region_rejects_everything() {
        let (mut a, bundle) = archive();
        a.thresholds.robust_min_valid_qbin = None;
        let r = &bundle.test[0];
        let v = a.predict(&r.id, &r.embedding).unwrap();
        assert!(!v.admitted);
        assert_eq!(v.rejection, Some(Rejection::NoRegion));
    }

    #[test]
    fn admission_boundary_is_inclusive() {
        let (mut a, bundle) = archive();
        let r = &bundle.test[0];
        let base = a.predict(&r.id, &r.embedding).unwrap();
        if base.rejection == Some(Rejection::OutOfDistribution) || a.thresholds.psi.is_none() {
            return;
        }
        a.thresholds.robust_min_valid_qbin = Some(0.0);
        let exact = base.p_lower_raw - base.offset;
        a.thresholds.psi.as_mut().unwrap()[base.prediction] = exact;
        assert!(a.predict(&r.id, &r.embedding).unwrap().admitted);
        a.thresholds.psi.as_mut().unwrap()[base.prediction] = exact + 1e-12;
        let v = a.predict(&r.id, &r.embedding).unwrap();
        assert!(!v.admitted && v.rejection == Some(Rejection::BelowQuantile));
    }

    #[test]
    fn verdict_json_keys() {
        let (a, bundle) = archive();
        let r = &bundle.test[0];
        let v = serde_json::to_value(a.predict(&r.id, &r.embedding).unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec!["id", "prediction", "admitted", "p_lower", "q", "d", "soft_qbin", "hard_qbin", "exemplar_ids"];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn retune_at_same_alpha_is_a_no_op() {
        let (a, _) = archive();
        let mut b = a.clone();
        b.retune(a.alpha_prime()).unwrap();
        assert_eq!(a.thresholds, b.thresholds);
        b.retune(0.8).unwrap();
        assert_eq!(b.alpha_prime(), 0.8);
    }
}
