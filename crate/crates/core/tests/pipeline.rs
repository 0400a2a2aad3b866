use std::collections::BTreeMap;

use sdm_core::archive;
use sdm_core::data::{DatasetBundle, LabeledInstance, Split};
use sdm_core::estimator::EstimatorArchive;
use sdm_core::numerics::AdaptorConfig;
use sdm_core::report::{evaluate_estimator, Judged};
use sdm_core::synthetic::{gaussian_blobs, BlobSpec};
use sdm_core::training::TrainingRunConfig;

fn split(seed: u64, prefix: &str, split: Split) -> Vec<LabeledInstance> {
    let mut rows = gaussian_blobs(&BlobSpec::default(), 120, seed, prefix, None);
    rows.iter_mut().for_each(|r| r.split = Some(split));
    rows
}

fn small_config() -> TrainingRunConfig {
    TrainingRunConfig {
        rounds: 2,
        max_epochs: 20,
        batch_size: 32,
        learning_rate: 1e-3,
        alpha_prime: 0.9,
        seed: 3,
        adaptor: AdaptorConfig {
            filters: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn build_save_load_predict() {
    let bundle = DatasetBundle::new(2, split(1, "tr", Split::Train), split(2, "ca", Split::Calibration), split(3, "te", Split::Test), 0).unwrap();
    let built = EstimatorArchive::build(&bundle, &small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = archive::save(&built, dir.path(), BTreeMap::new()).unwrap();
    assert_eq!(manifest.classes, 2);
    let (loaded, _) = archive::load(dir.path()).unwrap();
    assert_eq!(loaded, built);

    let items: Vec<(&str, &[f64])> = bundle.test.iter().map(|r| (r.id.as_str(), r.embedding.as_slice())).collect();
    let verdicts = loaded.predict_batch(&items).unwrap();
    assert_eq!(verdicts.len(), bundle.test.len());
    let judged: Vec<Judged> = verdicts
        .iter()
        .zip(&bundle.test)
        .map(|(v, r)| Judged {
            prediction: v.prediction,
            label: r.label,
            admitted: v.admitted,
        })
        .collect();
    let report = evaluate_estimator(&judged, 2, 0.9, "sdm");
    let correct = judged.iter().filter(|j| j.prediction == j.label).count();
    let accuracy = correct as f64 / judged.len() as f64;
    assert!(accuracy > 0.8, "accuracy {accuracy}");
    if report.marginal.fraction > 0.0 {
        assert!(report.marginal.accuracy.unwrap() > 0.9);
    }
}

#[test]
fn far_away_points_are_rejected() {
    let bundle = DatasetBundle::new(2, split(4, "tr", Split::Train), split(5, "ca", Split::Calibration), split(6, "te", Split::Test), 0).unwrap();
    let built = EstimatorArchive::build(&bundle, &small_config()).unwrap();
    let far = vec![1e3; bundle.test[0].embedding.len()];
    let verdict = built.predict("far", &far).unwrap();
    assert!(!verdict.admitted);
}
