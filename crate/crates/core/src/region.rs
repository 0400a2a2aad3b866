//! High-probability region detection and the robust across-round
//! threshold and offsets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::{cauchy_inverse_cdf, median, robust_scale, EmpiricalCdf};

/// Calibration record used by the region scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub soft_qbin: f64,
    /// Rescaled output at the true label.
    pub o_true: f64,
    pub label: usize,
    pub prediction: usize,
    /// Centroid estimate at the predicted label.
    pub p_centroid: f64,
}

impl RegionRecord {
    pub fn hard_qbin(&self) -> u64 {
        self.soft_qbin.max(0.0).floor() as u64
    }
}

/// Smallest soft q-bin from which every class's rescaled true-label output
/// has its `(1 - α')` quantile at or above `α'`. Returns the threshold and the
/// per-class quantiles, or `None` when no candidate qualifies.
pub fn find_min_valid_qbin(records: &[RegionRecord], classes: usize, alpha_prime: f64) -> Option<(f64, Vec<f64>)> {
    let mut admissible: Vec<&RegionRecord> = records.iter().filter(|r| r.hard_qbin() > 0).collect();
    admissible.sort_by(|a, b| a.soft_qbin.total_cmp(&b.soft_qbin));
    let mut k = 0;
    while k < admissible.len() {
        let candidate = admissible[k].soft_qbin;
        let mut per_class = vec![Vec::new(); classes];
        for r in &admissible[k..] {
            if r.label < classes {
                per_class[r.label].push(r.o_true);
            }
        }
        let psi: Option<Vec<f64>> = per_class
            .into_iter()
            .map(|v| EmpiricalCdf::new(v, true).inverse(1.0 - alpha_prime))
            .collect();
        if let Some(psi) = psi {
            if psi.iter().all(|p| *p >= alpha_prime) {
                return Some((candidate, psi));
            }
        }
        // next distinct candidate
        k = admissible.partition_point(|r| r.soft_qbin <= candidate);
    }
    None
}

/// Median centroid estimate of one `(predicted class, hard bin)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinMedian {
    pub prediction: usize,
    pub bin: u64,
    pub median: f64,
}

/// Statistics recorded for one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub metric: f64,
    pub min_valid_qbin: Option<f64>,
    pub psi: Option<Vec<f64>>,
    pub centroid_medians: Vec<BinMedian>,
}

/// Per-(predicted class, hard bin) medians of the centroid estimate.
pub fn centroid_medians(records: &[RegionRecord]) -> Vec<BinMedian> {
    let mut cells: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells.entry((r.prediction, r.hard_qbin())).or_default().push(r.p_centroid);
    }
    cells
        .into_iter()
        .map(|((prediction, bin), v)| BinMedian {
            prediction,
            bin,
            median: median(&v).unwrap_or(0.0),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEntry {
    pub prediction: usize,
    pub bin: u64,
    /// Dispersion of the per-round medians.
    pub mad: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub alpha_prime: f64,
    pub min_valid_qbin: Option<f64>,
    pub psi: Option<Vec<f64>>,
    /// Robust lower limit on the soft q-bin; `None` rejects everything.
    pub robust_min_valid_qbin: Option<f64>,
    pub offsets: Vec<OffsetEntry>,
    pub min_valid_samples: Vec<Option<f64>>,
}

impl RegionThresholds {
    pub fn is_admitting(&self) -> bool {
        self.robust_min_valid_qbin.is_some() && self.psi.is_some()
    }

    /// Offset for a predicted class and hard bin. Bins past the largest
    /// observed bin use the largest; a missing bin falls back to the nearest
    /// lower observed bin, then the nearest higher one. Unknown classes get 0.
    pub fn offset(&self, prediction: usize, bin: u64) -> f64 {
        let mut lower: Option<&OffsetEntry> = None;
        let mut higher: Option<&OffsetEntry> = None;
        for e in self.offsets.iter().filter(|e| e.prediction == prediction) {
            if e.bin == bin {
                return e.offset;
            }
            if e.bin < bin && lower.is_none_or(|l| e.bin > l.bin) {
                lower = Some(e);
            }
            if e.bin > bin && higher.is_none_or(|h| e.bin < h.bin) {
                higher = Some(e);
            }
        }
        lower.or(higher).map_or(0.0, |e| e.offset)
    }
}

/// Robust threshold and offsets from per-round statistics. `winner` is the
/// index of the selected round in `stats`.
pub fn robust_thresholds_and_offsets(stats: &[RoundStats], winner: usize, alpha_prime: f64) -> Result<RegionThresholds> {
    let chosen = &stats[winner];
    let min_valid_samples: Vec<Option<f64>> = stats.iter().map(|s| s.min_valid_qbin).collect();
    for s in stats.iter().filter(|s| s.min_valid_qbin.is_none()) {
        log::warn!("round {} found no high-probability region; excluded from dispersion", s.round);
    }
    let valid: Vec<f64> = min_valid_samples.iter().flatten().copied().collect();
    let single = stats.len() == 1;
    let robust_min_valid_qbin = match chosen.min_valid_qbin {
        None => {
            log::warn!("selected round has no high-probability region: estimator rejects every point");
            None
        }
        Some(location) if single => Some(location),
        Some(location) => Some(cauchy_inverse_cdf(location, robust_scale(&valid)?.mad, alpha_prime)?),
    };
    let mut cells: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    for s in stats {
        for m in &s.centroid_medians {
            cells.entry((m.prediction, m.bin)).or_default().push(m.median);
        }
    }
    let offsets = cells
        .into_iter()
        .map(|((prediction, bin), medians)| {
            let mad = if single { 0.0 } else { robust_scale(&medians)?.mad };
            Ok(OffsetEntry {
                prediction,
                bin,
                mad,
                offset: cauchy_inverse_cdf(0.0, mad, alpha_prime)?.max(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionThresholds {
        alpha_prime,
        min_valid_qbin: chosen.min_valid_qbin,
        psi: chosen.psi.clone(),
        robust_min_valid_qbin,
        offsets,
        min_valid_samples,
    })
}
