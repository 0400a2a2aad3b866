//! Iterative adaptor training with per-epoch similarity/depth refresh,
//! balanced-median-q model selection and repeated reshuffled rounds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{argmax, sdm_probabilities, DEFAULT_KEPS, SOFTMAX_Q};
use crate::calibration::{build_tables, point_uncertainty, CalibrationPoint, CalibrationTables, RescalerConfig};
use crate::data::{stratified_even_split, DatasetBundle, LabeledInstance};
use crate::error::{Result, SdmError};
use crate::numerics::{
    adaptor_forward, sdm_loss_and_grad, Adam, AdamConfig, AdaptorConfig, AdaptorWeights, LossInstance, Normalization,
};
use crate::region::{centroid_medians, find_min_valid_qbin, robust_thresholds_and_offsets, RegionRecord, RegionThresholds, RoundStats};
use crate::similarity::{distance_cdfs, distance_quantile_d, query_batch, Query, SupportIndex};
use crate::stats::median;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunConfig {
    /// Number of reshuffled rounds.
    pub rounds: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha_prime: f64,
    pub seed: u64,
    pub k_eps: f64,
    pub adaptor: AdaptorConfig,
    pub rescaler: RescalerConfig,
    /// Run rounds on the rayon pool.
    pub parallel_rounds: bool,
}

impl Default for TrainingRunConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            max_epochs: 50,
            batch_size: 50,
            learning_rate: 1e-5,
            alpha_prime: 0.95,
            seed: 0,
            k_eps: DEFAULT_KEPS,
            adaptor: AdaptorConfig::default(),
            rescaler: RescalerConfig::default(),
            parallel_rounds: true,
        }
    }
}

impl TrainingRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(SdmError::InvalidArgument(
                "rounds, max_epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.alpha_prime > 0.0 && self.alpha_prime < 1.0) {
            return Err(SdmError::InvalidArgument(format!(
                "alpha' must lie in (0, 1), got {}",
                self.alpha_prime
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.k_eps > 0.0) {
            return Err(SdmError::InvalidArgument("learning rate and k_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Selected adaptor with the splits it was trained and calibrated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptorModel {
    pub weights: AdaptorWeights,
    pub normalization: Normalization,
    pub train_ids: Vec<String>,
    pub calibration_ids: Vec<String>,
    /// Similarity and depth of every train instance under the selected
    /// weights (self-match excluded).
    pub train_q: Vec<f64>,
    pub train_d: Vec<f64>,
    pub metric: f64,
    pub round: usize,
    pub epoch: usize,
}

impl AdaptorModel {
    pub fn forward(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        adaptor_forward(&self.weights, embedding, &self.normalization)
    }
}

/// Mean over classes of the per-class median similarity.
pub fn balanced_median_q(q: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    let mut per_class = vec![Vec::new(); classes];
    for (qi, y) in q.iter().zip(labels) {
        per_class[*y].push(*qi);
    }
    let mut total = 0.0;
    for (c, v) in per_class.iter().enumerate() {
        total += median(v).ok_or_else(|| SdmError::Empty(format!("class {c} has no calibration instances")))?;
    }
    Ok(total / classes as f64)
}

/// Representations of a split under fixed weights.
struct Encoded {
    hidden: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    predictions: Vec<usize>,
}

fn encode(weights: &AdaptorWeights, normalized: &[Vec<f64>]) -> Encoded {
    let (hidden, logits): (Vec<_>, Vec<_>) = normalized
        .par_iter()
        .map(|x| {
            let h = weights.hidden(x);
            let z = weights.logits(&h);
            (h, z)
        })
        .unzip();
    let predictions = logits.iter().map(|z| argmax(z)).collect();
    Encoded {
        hidden,
        logits,
        predictions,
    }
}

fn build_index(weights: &AdaptorWeights, enc: &Encoded, split: &[LabeledInstance]) -> Result<SupportIndex> {
    SupportIndex::new(
        weights.hidden_dim(),
        enc.hidden.concat(),
        enc.predictions.clone(),
        split.iter().map(|r| r.label).collect(),
        split.iter().map(|r| r.id.clone()).collect(),
    )
}

/// `(q, d_x)` for every row of a split against `index`, optionally
/// excluding each row's own support entry.
fn neighborhoods(index: &SupportIndex, enc: &Encoded, exclude_self: bool) -> Result<(Vec<usize>, Vec<f64>)> {
    let queries: Vec<Query<'_>> = enc
        .hidden
        .iter()
        .zip(&enc.predictions)
        .enumerate()
        .map(|(i, (h, p))| Query {
            hidden: h,
            prediction: *p,
            exclude: exclude_self.then_some(i),
        })
        .collect();
    let found = query_batch(index, &queries, 0)?;
    Ok(found.into_iter().map(|n| (n.q, n.d_x)).unzip())
}

/// Similarity and depth for the train split itself, using train-side
/// distance eCDFs.
fn train_q_and_d(index: &SupportIndex, enc: &Encoded, split: &[LabeledInstance], classes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (q, d_x) = neighborhoods(index, enc, true)?;
    let labels: Vec<usize> = split.iter().map(|r| r.label).collect();
    let cdfs = distance_cdfs(&d_x, &q, &labels, classes);
    let d = d_x.iter().map(|dx| distance_quantile_d(&cdfs, *dx).0).collect();
    Ok((q.into_iter().map(|v| v as f64).collect(), d))
}

/// Everything one round produces.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub model: AdaptorModel,
    pub index: SupportIndex,
    pub tables: CalibrationTables,
    pub stats: RoundStats,
    pub records: Vec<RegionRecord>,
    pub calibration_logits: Vec<Vec<f64>>,
    pub calibration_labels: Vec<usize>,
    pub epoch_log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub round: usize,
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
}

/// Trains one adaptor on fixed splits and keeps the epoch with the highest
/// balanced median calibration similarity (earliest on ties). Returns the
/// selected weights, the metric, the selected epoch and the per-epoch log.
pub fn train_single_round(
    train: &[LabeledInstance],
    calibration: &[LabeledInstance],
    classes: usize,
    config: &TrainingRunConfig,
    round: usize,
) -> Result<(AdaptorWeights, Normalization, f64, usize, Vec<EpochLog>)> {
    config.validate()?;
    if train.is_empty() || calibration.is_empty() {
        return Err(SdmError::Empty("train and calibration splits must be non-empty".into()));
    }
    let dim = train[0].embedding.len();
    let seed = config.seed.wrapping_add(round as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalization = Normalization::fit(train.iter().map(|r| r.embedding.as_slice()), dim, config.k_eps)?;
    let train_x: Vec<Vec<f64>> = train.iter().map(|r| normalization.apply(&r.embedding)).collect();
    let cal_x: Vec<Vec<f64>> = calibration.iter().map(|r| normalization.apply(&r.embedding)).collect();
    let cal_labels: Vec<usize> = calibration.iter().map(|r| r.label).collect();
    let mut weights = AdaptorWeights::init(dim, classes, &config.adaptor, &mut rng)?;
    let mut adam = Adam::new(
        &[weights.g.len(), weights.g_bias.len(), weights.w.len(), weights.b.len()],
        AdamConfig::default(),
    );
    let mut q = vec![SOFTMAX_Q; train.len()];
    let mut d = vec![1.0; train.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(AdaptorWeights, f64, usize)> = None;
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<LossInstance<'_>> = chunk
                .iter()
                .map(|&i| LossInstance {
                    normalized: &train_x[i],
                    label: train[i].label,
                    q: q[i],
                    d: d[i],
                })
                .collect();
            let (loss, grads) = sdm_loss_and_grad(&weights, &batch, config.k_eps).map_err(|e| match e {
                SdmError::NonFiniteLoss { loss, .. } => SdmError::NonFiniteLoss {
                    loss,
                    epoch,
                    context: format!("round {round}"),
                },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
            adam.update(
                &mut [&mut weights.g, &mut weights.g_bias, &mut weights.w, &mut weights.b],
                &[&grads.g, &grads.g_bias, &grads.w, &grads.b],
                config.learning_rate,
            )?;
        }
        let train_enc = encode(&weights, &train_x);
        let index = build_index(&weights, &train_enc, train)?;
        (q, d) = train_q_and_d(&index, &train_enc, train, classes)?;
        let cal_enc = encode(&weights, &cal_x);
        let (cal_q, _) = neighborhoods(&index, &cal_enc, false)?;
        let cal_q: Vec<f64> = cal_q.into_iter().map(|v| v as f64).collect();
        let metric = balanced_median_q(&cal_q, &cal_labels, classes)?;
        let loss = loss_sum / batches as f64;
        log::info!("round={round} epoch={epoch} loss={loss:.6} metric={metric:.4}");
        log.push(EpochLog {
            round,
            epoch,
            loss,
            metric,
        });
        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((weights.clone(), metric, epoch));
        }
    }
    let (weights, metric, epoch) = best.expect("at least one epoch");
    Ok((weights, normalization, metric, epoch, log))
}

/// Full round: reshuffle, train, then calibrate and scan for the
/// high-probability region under the selected weights.
pub fn run_round(
    pooled: &[LabeledInstance],
    classes: usize,
    config: &TrainingRunConfig,
    round: usize,
) -> Result<RoundOutcome> {
    let seed = config.seed.wrapping_add(round as u64);
    let (train, calibration) = stratified_even_split(pooled, classes, seed);
    let (weights, normalization, metric, epoch, epoch_log) =
        train_single_round(&train, &calibration, classes, config, round)?;
    let train_x: Vec<Vec<f64>> = train.iter().map(|r| normalization.apply(&r.embedding)).collect();
    let cal_x: Vec<Vec<f64>> = calibration.iter().map(|r| normalization.apply(&r.embedding)).collect();
    let train_enc = encode(&weights, &train_x);
    let index = build_index(&weights, &train_enc, &train)?;
    let (train_q, train_d) = train_q_and_d(&index, &train_enc, &train, classes)?;
    let cal_enc = encode(&weights, &cal_x);
    let (cal_q, cal_dx) = neighborhoods(&index, &cal_enc, false)?;
    let cal_labels: Vec<usize> = calibration.iter().map(|r| r.label).collect();
    let cal_cdfs = distance_cdfs(&cal_dx, &cal_q, &cal_labels, classes);
    let points: Vec<CalibrationPoint> = (0..calibration.len())
        .map(|i| {
            let (d, _) = distance_quantile_d(&cal_cdfs, cal_dx[i]);
            CalibrationPoint {
                output: sdm_probabilities(&cal_enc.logits[i], cal_q[i] as f64, d),
                q: cal_q[i] as f64,
                d_x: cal_dx[i],
                label: cal_labels[i],
                prediction: cal_enc.predictions[i],
            }
        })
        .collect();
    let rescaler_config = RescalerConfig {
        seed,
        ..config.rescaler
    };
    let tables = build_tables(&points, classes, config.alpha_prime, &rescaler_config)?;
    let records: Vec<RegionRecord> = points
        .iter()
        .zip(&cal_enc.predictions)
        .map(|(p, prediction)| {
            let u = point_uncertainty(&tables, &p.output, p.q, *prediction);
            RegionRecord {
                soft_qbin: u.soft_qbin,
                o_true: u.o[p.label],
                label: p.label,
                prediction: u.prediction,
                p_centroid: u.p_centroid,
            }
        })
        .collect();
    let region = find_min_valid_qbin(&records, classes, config.alpha_prime);
    log::info!(
        "round={round} selected_epoch={epoch} metric={metric:.4} min_valid_qbin={}",
        region.as_ref().map_or("none".to_string(), |r| format!("{:.6}", r.0))
    );
    let stats = RoundStats {
        round,
        metric,
        min_valid_qbin: region.as_ref().map(|r| r.0),
        psi: region.map(|r| r.1),
        centroid_medians: centroid_medians(&records),
    };
    let model = AdaptorModel {
        weights,
        normalization,
        train_ids: train.iter().map(|r| r.id.clone()).collect(),
        calibration_ids: calibration.iter().map(|r| r.id.clone()).collect(),
        train_q,
        train_d,
        metric,
        round,
        epoch,
    };
    Ok(RoundOutcome {
        model,
        index,
        tables,
        stats,
        records,
        calibration_logits: cal_enc.logits,
        calibration_labels: cal_labels,
        epoch_log,
    })
}

/// Result of all rounds with the winner's artifacts.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub winner: RoundOutcome,
    pub winner_round: usize,
    pub rounds: Vec<RoundStats>,
    /// Calibration records of every round, kept for re-deriving thresholds
    /// at a different α′.
    pub round_records: Vec<Vec<RegionRecord>>,
    pub thresholds: RegionThresholds,
}

/// Runs every round and keeps the one with the strictly highest metric
/// (earliest round on ties).
pub fn train_full(bundle: &DatasetBundle, config: &TrainingRunConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    let mut pooled = bundle.train.clone();
    pooled.extend(bundle.calibration.iter().cloned());
    let classes = bundle.classes;
    let run = |j: usize| run_round(&pooled, classes, config, j);
    let outcomes: Vec<RoundOutcome> = if config.parallel_rounds {
        (0..config.rounds).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..config.rounds).map(run).collect::<Result<_>>()?
    };
    let mut winner = 0;
    for (j, o) in outcomes.iter().enumerate() {
        if o.model.metric > outcomes[winner].model.metric {
            winner = j;
        }
    }
    let rounds: Vec<RoundStats> = outcomes.iter().map(|o| o.stats.clone()).collect();
    let round_records = outcomes.iter().map(|o| o.records.clone()).collect();
    let thresholds = robust_thresholds_and_offsets(&rounds, winner, config.alpha_prime)?;
    log::info!(
        "selected round={winner} metric={:.4} robust_min_valid_qbin={:?}",
        outcomes[winner].model.metric,
        thresholds.robust_min_valid_qbin
    );
    let winner_outcome = outcomes.into_iter().nth(winner).expect("winner index in range");
    Ok(TrainingOutcome {
        winner: winner_outcome,
        winner_round: winner,
        rounds,
        round_records,
        thresholds,
    })
}
