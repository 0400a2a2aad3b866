//! Exact L2 nearest-neighbor search over adaptor representations.
//!
//! For a query with predicted class `ŷ`, the support rows are ordered by
//! distance (ties by ascending row position). A row *matches* when its own
//! prediction equals `ŷ` and is correct. The similarity `q` is the length of
//! the matching prefix of that ordering; `d_x` is the distance to the first
//! row, whether or not it matches.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdmError};
use crate::stats::EmpiricalCdf;

/// Flat matrix of support representations with their predictions, labels
/// and ids. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportIndex {
    dim: usize,
    rows: Vec<f64>,
    predictions: Vec<usize>,
    labels: Vec<usize>,
    ids: Vec<String>,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

impl SupportIndex {
    pub fn new(
        dim: usize,
        rows: Vec<f64>,
        predictions: Vec<usize>,
        labels: Vec<usize>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let n = predictions.len();
        if dim == 0 || rows.len() != n * dim || labels.len() != n || ids.len() != n {
            return Err(SdmError::Shape(format!(
                "support index: {} values, {n} predictions, {} labels, {} ids for dimension {dim}",
                rows.len(),
                labels.len(),
                ids.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(SdmError::InvalidArgument("support index contains non-finite values".into()));
        }
        let mut index = Self {
            dim,
            rows,
            predictions,
            labels,
            ids,
            positions: HashMap::new(),
        };
        index.rebuild_positions();
        Ok(index)
    }

    /// Restores the id lookup after deserialization.
    pub fn rebuild_positions(&mut self) {
        self.positions = self.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    fn distance(&self, i: usize, h: &[f64]) -> f64 {
        self.row(i)
            .iter()
            .zip(h)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn admissible(&self, i: usize, prediction: usize) -> bool {
        self.predictions[i] == prediction && self.predictions[i] == self.labels[i]
    }
}

/// A single lookup against the index.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub hidden: &'a [f64],
    pub prediction: usize,
    /// Row position to skip (the query's own support row).
    pub exclude: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub q: usize,
    pub d_x: f64,
    /// Positions of the nearest rows, closest first.
    pub nearest: Vec<usize>,
}

/// `(distance, position)` ordering used for every sort.
fn before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Similarity, nearest distance and the `top_k` nearest rows for one query.
/// Runs in a single pass: `q` counts the matching rows that sort before the
/// nearest non-matching row.
pub fn query(index: &SupportIndex, query: &Query<'_>, top_k: usize) -> Result<Neighborhood> {
    if query.hidden.len() != index.dim {
        return Err(SdmError::Shape(format!(
            "query of length {}, index dimension {}",
            query.hidden.len(),
            index.dim
        )));
    }
    let mut nearest: Option<(f64, usize)> = None;
    let mut barrier: Option<(f64, usize)> = None;
    let mut matching: Vec<(f64, usize)> = Vec::new();
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(top_k + 1);
    for i in 0..index.len() {
        if query.exclude == Some(i) {
            continue;
        }
        let key = (index.distance(i, query.hidden), i);
        if nearest.is_none_or(|n| before(key, n)) {
            nearest = Some(key);
        }
        if index.admissible(i, query.prediction) {
            if barrier.is_none_or(|b| before(key, b)) {
                matching.push(key);
            }
        } else if barrier.is_none_or(|b| before(key, b)) {
            barrier = Some(key);
        }
        if top_k > 0 && (top.len() < top_k || before(key, top[top.len() - 1])) {
            let at = top.partition_point(|t| before(*t, key));
            top.insert(at, key);
            top.truncate(top_k);
        }
    }
    let Some((d_x, _)) = nearest else {
        return Err(SdmError::Empty("support index is empty after exclusion".into()));
    };
    let q = match barrier {
        None => matching.len(),
        Some(b) => matching.iter().filter(|m| before(**m, b)).count(),
    };
    Ok(Neighborhood {
        q,
        d_x,
        nearest: top.into_iter().map(|(_, i)| i).collect(),
    })
}

/// `(q, d_x)` for one query, optionally skipping the row with `exclude_id`.
pub fn compute_q_and_dx(
    index: &SupportIndex,
    hidden: &[f64],
    prediction: usize,
    exclude_id: Option<&str>,
) -> Result<(usize, f64)> {
    let exclude = exclude_id.and_then(|id| index.position(id));
    let n = query(
        index,
        &Query {
            hidden,
            prediction,
            exclude,
        },
        0,
    )?;
    Ok((n.q, n.d_x))
}

/// Parallel batch lookup; output order follows input order.
pub fn query_batch(index: &SupportIndex, queries: &[Query<'_>], top_k: usize) -> Result<Vec<Neighborhood>> {
    queries.par_iter().map(|q| query(index, q, top_k)).collect()
}

/// Per-class eCDFs of nearest distances, keeping only points with `q > 0`.
pub fn distance_cdfs(d_x: &[f64], q: &[usize], labels: &[usize], classes: usize) -> Vec<EmpiricalCdf> {
    let mut per_class = vec![Vec::new(); classes];
    for ((d, q), y) in d_x.iter().zip(q).zip(labels) {
        if *q > 0 && *y < classes {
            per_class[*y].push(*d);
        }
    }
    per_class.into_iter().map(|v| EmpiricalCdf::new(v, false)).collect()
}

/// Depth `d`: the smallest reverse quantile of `d_x` across the per-class
/// distance eCDFs. The flag is set when every eCDF is empty.
pub fn distance_quantile_d(cdfs: &[EmpiricalCdf], d_x: f64) -> (f64, bool) {
    if cdfs.iter().all(EmpiricalCdf::is_empty) {
        log::debug!("no reference distances: depth forced to 0");
        return (0.0, true);
    }
    let d = cdfs.iter().map(|c| c.quantile(d_x, true)).fold(f64::INFINITY, f64::min);
    (d, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full sort followed by a prefix scan.
    fn oracle(index: &SupportIndex, h: &[f64], yhat: usize, exclude: Option<usize>) -> (usize, f64) {
        let mut order: Vec<(f64, usize)> = (0..index.len())
            .filter(|i| Some(*i) != exclude)
            .map(|i| (index.distance(i, h), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let q = order.iter().take_while(|(_, i)| index.admissible(*i, yhat)).count();
        (q, order[0].0)
    }

    fn line_index(flags: &[bool]) -> SupportIndex {
        // rows at 1, 2, 3, ... along one axis; predictions all 0
        let n = flags.len();
        let rows = (1..=n).map(|i| i as f64).collect();
        let labels = flags.iter().map(|ok| if *ok { 0 } else { 1 }).collect();
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        SupportIndex::new(1, rows, vec![0; n], labels, ids).unwrap()
    }

    #[test]
    fn prefix_scan_example() {
        let index = line_index(&[true, true, false, true]);
        assert_eq!(compute_q_and_dx(&index, &[0.0], 0, None).unwrap(), (2, 1.0));
    }

    #[test]
    fn duplicate_query_has_zero_distance() {
        let index = line_index(&[true, true, true]);
        let (q, d) = compute_q_and_dx(&index, &[2.0], 0, None).unwrap();
        assert_eq!(d, 0.0);
        assert!(q >= 1);
        // excluding the duplicate moves the nearest distance to 1
        let (_, d) = compute_q_and_dx(&index, &[2.0], 0, Some("r1")).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn other_predictions_give_zero_q() {
        let index = line_index(&[true, true]);
        assert_eq!(compute_q_and_dx(&index, &[0.5], 1, None).unwrap(), (0, 0.5));
    }

    #[test]
    fn ties_break_by_position() {
        // two rows at the same point; the first is a mismatch
        let index = SupportIndex::new(1, vec![1.0, 1.0], vec![0, 0], vec![1, 0], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(compute_q_and_dx(&index, &[0.0], 0, None).unwrap().0, 0);
    }

    #[test]
    fn empty_after_exclusion_is_an_error() {
        let index = line_index(&[true]);
        assert!(compute_q_and_dx(&index, &[0.0], 0, Some("r0")).is_err());
    }

    #[test]
    fn nearest_rows_are_sorted() {
        let index = line_index(&[true, false, true, true]);
        let n = query(&index, &Query { hidden: &[3.2], prediction: 0, exclude: None }, 3).unwrap();
        assert_eq!(n.nearest, vec![2, 3, 1]);
    }

    #[test]
    fn depth_examples() {
        let cdfs = vec![
            EmpiricalCdf::new(vec![1.0, 2.0, 3.0], false),
            EmpiricalCdf::new(vec![0.5, 4.0], false),
        ];
        assert_eq!(distance_quantile_d(&cdfs, 0.0), (1.0, false));
        assert_eq!(distance_quantile_d(&cdfs, 10.0), (0.0, false));
        let two = vec![
            EmpiricalCdf::new((0..10).map(f64::from).collect(), false),
            EmpiricalCdf::new((0..5).map(f64::from).collect(), false),
        ];
        // reverse quantiles at 2.5: 0.7 and 0.4
        assert!((distance_quantile_d(&two, 2.5).0 - 0.4).abs() < 1e-12);
        assert_eq!(distance_quantile_d(&[EmpiricalCdf::default(), EmpiricalCdf::default()], 1.0), (0.0, true));
    }

    #[test]
    fn distance_cdfs_skip_zero_similarity() {
        let cdfs = distance_cdfs(&[1.0, 2.0, 3.0], &[0, 1, 2], &[0, 0, 1], 2);
        assert_eq!(cdfs[0].values(), &[2.0]);
        assert_eq!(cdfs[1].values(), &[3.0]);
    }

    fn arb_index() -> impl Strategy<Value = (SupportIndex, Vec<f64>, usize, Option<usize>)> {
        (1usize..25).prop_flat_map(|n| {
            (
                proptest::collection::vec(-3i32..3, n * 2),
                proptest::collection::vec(0usize..2, n),
                proptest::collection::vec(0usize..2, n),
                proptest::collection::vec(-3i32..3, 2),
                0usize..2,
                proptest::option::of(0..n),
            )
                .prop_map(move |(rows, preds, labels, h, yhat, excl)| {
                    // integer grid forces many exact ties
                    let rows = rows.into_iter().map(f64::from).collect();
                    let ids = (0..n).map(|i| i.to_string()).collect();
                    let index = SupportIndex::new(2, rows, preds, labels, ids).unwrap();
                    let excl = excl.filter(|_| n > 1);
                    (index, h.into_iter().map(f64::from).collect(), yhat, excl)
                })
        })
    }

    proptest! {
        #[test]
        fn agrees_with_brute_force((index, h, yhat, excl) in arb_index()) {
            let got = query(&index, &Query { hidden: &h, prediction: yhat, exclude: excl }, 0).unwrap();
            prop_assert_eq!((got.q, got.d_x), oracle(&index, &h, yhat, excl));
        }

        #[test]
        fn corrupting_a_prefix_row_caps_q((index, h, yhat, _) in arb_index(), k in 0usize..25) {
            let base = query(&index, &Query { hidden: &h, prediction: yhat, exclude: None }, index.len()).unwrap();
            prop_assume!(k < base.nearest.len());
            let row = base.nearest[k];
            let mut labels = index.labels().to_vec();
            labels[row] = 1 - labels[row];
            let flipped = SupportIndex::new(2, index.rows().to_vec(), index.predictions().to_vec(), labels, index.ids().to_vec()).unwrap();
            let after = query(&flipped, &Query { hidden: &h, prediction: yhat, exclude: None }, 0).unwrap();
            if index.admissible(row, yhat) {
                prop_assert!(after.q <= k);
            }
        }

        #[test]
        fn depth_is_monotone(values in proptest::collection::vec(0.0f64..10.0, 0..20), a in 0.0f64..12.0, b in 0.0f64..12.0) {
            let cdfs = vec![EmpiricalCdf::new(values.clone(), false), EmpiricalCdf::new(values.iter().map(|v| v * 0.5).collect(), false)];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(distance_quantile_d(&cdfs, lo).0 >= distance_quantile_d(&cdfs, hi).0);
        }
    }
}
