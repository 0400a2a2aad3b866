//! Accuracy over admitted points, stratified by true and predicted class,
//! and the audit list of confident disagreements.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::estimator::Verdict;

/// One scored point with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judged {
    pub prediction: usize,
    pub label: usize,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub total: usize,
    pub admitted: usize,
    pub correct: usize,
    /// Accuracy over admitted points; `None` when nothing was admitted.
    pub accuracy: Option<f64>,
    /// Admitted share of the stratum.
    pub fraction: f64,
}

impl Cell {
    fn from_counts(total: usize, admitted: usize, correct: usize) -> Self {
        Self {
            total,
            admitted,
            correct,
            accuracy: (admitted > 0).then(|| correct as f64 / admitted as f64),
            fraction: if total == 0 { 0.0 } else { admitted as f64 / total as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub estimator: String,
    pub alpha_prime: f64,
    pub marginal: Cell,
    pub by_true_class: Vec<Cell>,
    pub by_predicted_class: Vec<Cell>,
    /// Every nonempty admitted stratum reaches `alpha_prime`.
    pub passes: bool,
    /// Strata below `alpha_prime`, e.g. `"true=1"`.
    pub failing: Vec<String>,
}

pub fn evaluate_estimator(points: &[Judged], classes: usize, alpha_prime: f64, estimator: &str) -> CalibrationReport {
    let mut by_true = vec![(0, 0, 0); classes];
    let mut by_pred = vec![(0, 0, 0); classes];
    let (mut admitted, mut correct) = (0, 0);
    for p in points {
        let ok = p.prediction == p.label;
        by_true[p.label].0 += 1;
        by_pred[p.prediction].0 += 1;
        if p.admitted {
            admitted += 1;
            by_true[p.label].1 += 1;
            by_pred[p.prediction].1 += 1;
            if ok {
                correct += 1;
                by_true[p.label].2 += 1;
                by_pred[p.prediction].2 += 1;
            }
        }
    }
    let cells = |v: Vec<(usize, usize, usize)>| -> Vec<Cell> { v.into_iter().map(|(t, a, c)| Cell::from_counts(t, a, c)).collect() };
    let by_true_class = cells(by_true);
    let by_predicted_class = cells(by_pred);
    let mut failing = Vec::new();
    for (name, strata) in [("true", &by_true_class), ("predicted", &by_predicted_class)] {
        for (c, cell) in strata.iter().enumerate() {
            if cell.accuracy.is_some_and(|a| a < alpha_prime) {
                failing.push(format!("{name}={c}"));
            }
        }
    }
    CalibrationReport {
        estimator: estimator.to_string(),
        alpha_prime,
        marginal: Cell::from_counts(points.len(), admitted, correct),
        by_true_class,
        by_predicted_class,
        passes: failing.is_empty(),
        failing,
    }
}

fn accuracy_text(cell: &Cell) -> String {
    cell.accuracy.map_or("N/A".to_string(), |a| format!("{a:.3}"))
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: accuracy with 3 decimals, admitted fraction with 2.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "estimator: {}  alpha': {}", self.estimator, self.alpha_prime);
        let _ = writeln!(out, "{:<14} {:>8} {:>8} {:>9}", "stratum", "acc", "frac", "n");
        let mut row = |name: String, cell: &Cell| {
            let _ = writeln!(
                out,
                "{:<14} {:>8} {:>8.2} {:>9}",
                name,
                accuracy_text(cell),
                cell.fraction,
                format!("{}/{}", cell.admitted, cell.total)
            );
        };
        for (c, cell) in self.by_true_class.iter().enumerate() {
            row(format!("y={c}"), cell);
        }
        for (c, cell) in self.by_predicted_class.iter().enumerate() {
            row(format!("yhat={c}"), cell);
        }
        row("marginal".to_string(), &self.marginal);
        let status = if self.passes {
            "pass".to_string()
        } else {
            format!("fail ({})", self.failing.join(", "))
        };
        let _ = writeln!(out, "index-conditional at alpha': {status}");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suspect {
    pub id: String,
    pub label: usize,
    pub prediction: usize,
    pub p_lower: f64,
    pub q: usize,
    pub hard_qbin: u64,
    pub exemplar_ids: Vec<String>,
}

/// Admitted points whose label disagrees with the prediction, highest
/// adjusted lower probability first (stable on ties).
pub fn suspect_annotation_report(verdicts: &[Verdict], labels: &[usize]) -> Vec<Suspect> {
    let mut out: Vec<Suspect> = verdicts
        .iter()
        .zip(labels)
        .filter(|(v, y)| v.admitted && v.prediction != **y)
        .map(|(v, y)| Suspect {
            id: v.id.clone(),
            label: *y,
            prediction: v.prediction,
            p_lower: v.p_lower.unwrap_or(0.0),
            q: v.q,
            hard_qbin: v.hard_qbin,
            exemplar_ids: v.exemplar_ids.clone(),
        })
        .collect();
    out.sort_by(|a, b| b.p_lower.total_cmp(&a.p_lower));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judged(prediction: usize, label: usize, admitted: bool) -> Judged {
        Judged {
            prediction,
            label,
            admitted,
        }
    }

    #[test]
    fn all_rejected_passes_vacuously() {
        let pts = vec![judged(0, 1, false), judged(1, 1, false)];
        let r = evaluate_estimator(&pts, 2, 0.95, "sdm");
        assert!(r.passes);
        assert!(r.by_true_class.iter().chain(&r.by_predicted_class).all(|c| c.accuracy.is_none()));
        assert!(r.to_text().contains("N/A"));
    }

    #[test]
    fn all_correct_admitted() {
        let pts: Vec<_> = (0..10).map(|i| judged(i % 2, i % 2, true)).collect();
        let r = evaluate_estimator(&pts, 2, 0.95, "sdm");
        assert!(r.passes);
        assert_eq!(r.marginal.fraction, 1.0);
        assert_eq!(r.marginal.accuracy, Some(1.0));
    }

    #[test]
    fn failing_stratum_is_named() {
        let mut pts: Vec<_> = (0..9).map(|_| judged(0, 0, true)).collect();
        pts.push(judged(1, 0, true));
        pts.extend((0..10).map(|_| judged(1, 1, true)));
        let r = evaluate_estimator(&pts, 2, 0.95, "sdm");
        assert!(!r.passes);
        assert!(r.failing.contains(&"true=0".to_string()));
        assert_eq!(r.by_true_class[0].accuracy, Some(0.9));
    }

    #[test]
    fn marginal_fraction_matches_predicted_counts() {
        let pts = vec![judged(0, 0, true), judged(1, 0, false), judged(1, 1, true), judged(0, 1, false)];
        let r = evaluate_estimator(&pts, 2, 0.9, "x");
        let admitted: usize = r.by_predicted_class.iter().map(|c| c.admitted).sum();
        assert_eq!(r.marginal.fraction, admitted as f64 / pts.len() as f64);
        assert_eq!(r.to_json(), evaluate_estimator(&pts, 2, 0.9, "x").to_json());
    }

    fn verdict(id: &str, prediction: usize, p: Option<f64>) -> Verdict {
        Verdict {
            id: id.into(),
            prediction,
            admitted: p.is_some(),
            p_lower: p,
            q: 3,
            d: 0.5,
            soft_qbin: 1.2,
            hard_qbin: 1,
            exemplar_ids: vec![],
            d_x: 0.0,
            soft_qbin_lower: 1.1,
            p_lower_raw: p.unwrap_or(0.0),
            offset: 0.0,
            rejection: None,
        }
    }

    #[test]
    fn suspects_are_sorted_descending() {
        let v = vec![
            verdict("a", 0, Some(0.97)),
            verdict("b", 0, Some(0.99)),
            verdict("c", 1, Some(0.995)),
            verdict("d", 0, None),
            verdict("e", 0, Some(0.96)),
        ];
        let s = suspect_annotation_report(&v, &[1, 1, 1, 1, 1]);
        let ids: Vec<&str> = s.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, vec!["b", "a", "e"]);
        assert!(suspect_annotation_report(&v, &[0, 0, 1, 0, 0]).is_empty());
    }
}
