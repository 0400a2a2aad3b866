//! Labelled embedding datasets: JSON-lines ingestion, validation and
//! class-stratified splitting.
//!
//! One record per line:
//!
//! ```text
//! {"id": "a1", "label": 0, "task_label": 3, "embedding": [0.1, -2.0], "text": "...", "split": "train"}
//! ```
//!
//! `task_label`, `text` and `split` are optional. Records without a split are
//! pooled and divided evenly, per class, between train and calibration.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_label: Option<u64>,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl LabeledInstance {
    pub fn new(id: impl Into<String>, label: usize, embedding: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            label,
            task_label: None,
            embedding,
            text: None,
            split: None,
        }
    }

    fn validate(&self, classes: usize, dim: usize) -> Result<()> {
        if self.embedding.len() != dim {
            return Err(SdmError::DimensionMismatch {
                id: self.id.clone(),
                expected: dim,
                found: self.embedding.len(),
            });
        }
        if self.label >= classes {
            return Err(SdmError::LabelOutOfRange {
                id: self.id.clone(),
                label: self.label,
                classes,
            });
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(SdmError::NonFinite { id: self.id.clone() });
        }
        Ok(())
    }
}

/// Options for [`load_and_validate`].
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Maximum allowed spread (max - min) of per-class counts in the train and
    /// calibration splits.
    pub balance_tolerance: usize,
    /// Seed for dividing records without an explicit split.
    pub split_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            balance_tolerance: 0,
            split_seed: 0,
        }
    }
}

/// Train, calibration and test instances sharing a class count and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub classes: usize,
    pub dim: usize,
    pub train: Vec<LabeledInstance>,
    pub calibration: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
}

impl DatasetBundle {
    /// Builds and validates a bundle from pre-split instances.
    pub fn new(
        classes: usize,
        train: Vec<LabeledInstance>,
        calibration: Vec<LabeledInstance>,
        test: Vec<LabeledInstance>,
        balance_tolerance: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(SdmError::InvalidArgument(format!(
                "at least two classes are required, got {classes}"
            )));
        }
        let dim = train
            .iter()
            .chain(&calibration)
            .chain(&test)
            .next()
            .map(|r| r.embedding.len())
            .ok_or_else(|| SdmError::Empty("dataset has no records".into()))?;
        if dim == 0 {
            return Err(SdmError::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        let bundle = Self {
            classes,
            dim,
            train,
            calibration,
            test,
        };
        for (split, records) in bundle.splits() {
            let mut seen = HashSet::new();
            for r in records {
                r.validate(classes, dim)?;
                if !seen.insert(r.id.as_str()) {
                    return Err(SdmError::DuplicateId {
                        id: r.id.clone(),
                        split: split.name().into(),
                    });
                }
            }
        }
        check_balance(Split::Train, &bundle.train, classes, balance_tolerance)?;
        check_balance(Split::Calibration, &bundle.calibration, classes, balance_tolerance)?;
        Ok(bundle)
    }

    pub fn splits(&self) -> [(Split, &[LabeledInstance]); 3] {
        [
            (Split::Train, &self.train),
            (Split::Calibration, &self.calibration),
            (Split::Test, &self.test),
        ]
    }

    /// Per-class counts over every split.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for (_, records) in self.splits() {
            for r in records {
                *counts.entry(r.label).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Train and calibration pooled, in that order.
    pub fn pooled(&self) -> Vec<LabeledInstance> {
        self.train.iter().chain(&self.calibration).cloned().collect()
    }
}

pub fn per_class_counts(records: &[LabeledInstance], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for r in records {
        if r.label < classes {
            counts[r.label] += 1;
        }
    }
    counts
}

fn check_balance(
    split: Split,
    records: &[LabeledInstance],
    classes: usize,
    tolerance: usize,
) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let counts = per_class_counts(records, classes);
    let (lo, hi) = (
        *counts.iter().min().unwrap_or(&0),
        *counts.iter().max().unwrap_or(&0),
    );
    if hi - lo > tolerance {
        return Err(SdmError::Imbalanced {
            split: split.name().into(),
            counts,
            tolerance,
        });
    }
    Ok(())
}

/// Shuffles each class with `seed` and sends the first half of every class to
/// the first output, the rest to the second (odd counts favour the first).
pub fn stratified_even_split(
    records: &[LabeledInstance],
    classes: usize,
    seed: u64,
) -> (Vec<LabeledInstance>, Vec<LabeledInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<&LabeledInstance>> = vec![Vec::new(); classes];
    for r in records {
        by_class[r.label.min(classes - 1)].push(r);
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for mut members in by_class {
        members.shuffle(&mut rng);
        let cut = members.len().div_ceil(2);
        first.extend(members[..cut].iter().map(|r| (*r).clone()));
        second.extend(members[cut..].iter().map(|r| (*r).clone()));
    }
    (first, second)
}

/// Parses every record of a JSON-lines file. Blank lines are skipped.
pub fn read_instances(path: &Path) -> Result<Vec<LabeledInstance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabeledInstance =
            serde_json::from_str(&line).map_err(|e| SdmError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_instances(path: &Path, records: &[LabeledInstance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset file, validates every record against `classes`, assigns
/// unsplit records and checks class balance of train and calibration.
pub fn load_and_validate(path: &Path, classes: usize, options: LoadOptions) -> Result<DatasetBundle> {
    let records = read_instances(path)?;
    if records.is_empty() {
        return Err(SdmError::Empty(format!("{} has no records", path.display())));
    }
    let dim = records[0].embedding.len();
    for r in &records {
        r.validate(classes, dim)?;
    }
    let (mut train, mut calibration, mut test, mut unassigned) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in records {
        match r.split {
            Some(Split::Train) => train.push(r),
            Some(Split::Calibration) => calibration.push(r),
            Some(Split::Test) => test.push(r),
            None => unassigned.push(r),
        }
    }
    if !unassigned.is_empty() {
        let (a, b) = stratified_even_split(&unassigned, classes, options.split_seed);
        train.extend(a);
        calibration.extend(b);
    }
    let bundle = DatasetBundle::new(classes, train, calibration, test, options.balance_tolerance)?;
    log::info!("loaded {}: class counts {:?}", path.display(), bundle.class_counts());
    Ok(bundle)
}
