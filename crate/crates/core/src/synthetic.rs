//! Seeded synthetic datasets for tests, examples and the CLI.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::activation::softmax;
use crate::data::{LabeledInstance, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Distance between neighboring class means.
    pub separation: f64,
    pub sigma: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            dim: 8,
            separation: 3.0,
            sigma: 1.0,
        }
    }
}

impl BlobSpec {
    /// Class means. Two classes sit at `±separation/2` on axis 0; otherwise
    /// class `c` sits on axis `c mod dim` so that any two means are
    /// `separation` apart.
    pub fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        if self.classes == 2 {
            m[0] = if class == 0 { -self.separation / 2.0 } else { self.separation / 2.0 };
        } else {
            m[class % self.dim] = self.separation / std::f64::consts::SQRT_2;
        }
        m
    }
}

/// `n_per_class` Gaussian points per class, interleaved by class.
pub fn gaussian_blobs(spec: &BlobSpec, n_per_class: usize, seed: u64, prefix: &str, split: Option<Split>) -> Vec<LabeledInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.sigma).expect("positive sigma");
    let means: Vec<Vec<f64>> = (0..spec.classes).map(|c| spec.mean(c)).collect();
    let mut out = Vec::with_capacity(n_per_class * spec.classes);
    for i in 0..n_per_class * spec.classes {
        let y = i % spec.classes;
        let embedding = means[y].iter().map(|m| m + noise.sample(&mut rng)).collect();
        let mut r = LabeledInstance::new(format!("{prefix}{i}"), y, embedding);
        r.split = split;
        out.push(r);
    }
    out
}

/// Translates every coordinate by `delta`.
pub fn shifted(records: &[LabeledInstance], delta: f64) -> Vec<LabeledInstance> {
    records
        .iter()
        .map(|r| {
            let mut s = r.clone();
            s.embedding.iter_mut().for_each(|v| *v += delta);
            s
        })
        .collect()
}

/// Reassigns a random `fraction` of labels to a different class. Returns the
/// modified records and the ids that were flipped.
pub fn flip_labels(records: &[LabeledInstance], classes: usize, fraction: f64, seed: u64) -> (Vec<LabeledInstance>, BTreeSet<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    let mut positions: Vec<usize> = (0..out.len()).collect();
    positions.shuffle(&mut rng);
    let k = (fraction * out.len() as f64).round() as usize;
    let mut flipped = BTreeSet::new();
    for &i in &positions[..k.min(out.len())] {
        let shift = rng.random_range(1..classes);
        out[i].label = (out[i].label + shift) % classes;
        flipped.insert(out[i].id.clone());
    }
    (out, flipped)
}

/// Exchangeable classification outputs: random logits with labels drawn from
/// their softmax, so the probabilities are calibrated by construction.
pub fn exchangeable_probabilities(n: usize, classes: usize, logit_scale: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, logit_scale).expect("positive scale");
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..classes).map(|_| normal.sample(&mut rng)).collect();
        let p = softmax(&z, 1.0);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let y = p
            .iter()
            .position(|pi| {
                acc += pi;
                u < acc
            })
            .unwrap_or(classes - 1);
        probs.push(p);
        labels.push(y);
    }
    (probs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let spec = BlobSpec::default();
        let a = gaussian_blobs(&spec, 10, 1, "b", None);
        assert_eq!(a, gaussian_blobs(&spec, 10, 1, "b", None));
        assert_eq!(a.iter().filter(|r| r.label == 0).count(), 10);
        assert!(a.iter().all(|r| r.embedding.len() == 8));
    }

    #[test]
    fn flips_change_exactly_the_reported_labels() {
        let data = gaussian_blobs(&BlobSpec::default(), 50, 2, "b", None);
        let (flipped, ids) = flip_labels(&data, 2, 0.1, 3);
        assert_eq!(ids.len(), 10);
        for (a, b) in data.iter().zip(&flipped) {
            assert_eq!(a.label != b.label, ids.contains(&a.id));
        }
    }

    #[test]
    fn exchangeable_rows_are_distributions() {
        let (p, y) = exchangeable_probabilities(100, 5, 2.0, 4);
        assert!(p.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        assert!(y.iter().all(|c| *c < 5));
    }
}
