//! On-disk estimator archive: a directory of little-endian binary blocks and
//! a JSON manifest with SHA-256 checksums, written last.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibrationTables, Rescaler};
use crate::data::LabeledInstance;
use crate::error::{Result, SdmError};
use crate::estimator::{EstimatorArchive, FORMAT_VERSION};
use crate::numerics::{AdaptorWeights, Nonlinearity, Normalization};
use crate::region::{BinMedian, OffsetEntry, RegionRecord, RegionThresholds, RoundStats};
use crate::similarity::SupportIndex;
use crate::stats::EmpiricalCdf;
use crate::training::{AdaptorModel, TrainingRunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
const MAGIC: &[u8; 4] = b"SDMB";

/// Length-prefixed little-endian encoder.
#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(tag: &str) -> Self {
        let mut e = Self::default();
        e.buf.extend_from_slice(MAGIC);
        e.u32(FORMAT_VERSION);
        e.str(tag);
        e
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }

    pub fn str(&mut self, v: &str) {
        self.usize(v.len());
        self.buf.extend_from_slice(v.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.usize(*x));
    }

    pub fn strs(&mut self, v: &[String]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.str(x));
    }

    pub fn opt_f64(&mut self, v: Option<f64>) {
        self.bool(v.is_some());
        if let Some(x) = v {
            self.f64(x);
        }
    }

    pub fn opt_f64s(&mut self, v: Option<&[f64]>) {
        self.bool(v.is_some());
        if let Some(x) = v {
            self.f64s(x);
        }
    }

    pub fn ecdf(&mut self, cdf: &EmpiricalCdf) {
        self.bool(cdf.is_saturating());
        self.f64s(cdf.values());
    }

    pub fn ecdfs(&mut self, v: &[EmpiricalCdf]) {
        self.usize(v.len());
        v.iter().for_each(|c| self.ecdf(c));
    }

    pub fn matrix(&mut self, rows: &[Vec<f64>]) {
        self.usize(rows.len());
        rows.iter().for_each(|r| self.f64s(r));
    }
}

/// Decoder matching [`Encoder`]; every read is bounds-checked.
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    name: String,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], name: &str, tag: &str) -> Result<Self> {
        let mut d = Self {
            buf,
            pos: 0,
            name: name.to_string(),
        };
        if d.take(4)? != MAGIC {
            return Err(d.error("bad magic"));
        }
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(d.error(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let found = d.str()?;
        if found != tag {
            return Err(d.error(&format!("block tag {found:?}, expected {tag:?}")));
        }
        Ok(d)
    }

    fn error(&self, what: &str) -> SdmError {
        SdmError::Archive(format!("{}: {what} at byte {}", self.name, self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| self.error("truncated block"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.error("length overflow"))
    }

    /// Length prefix checked against the remaining bytes.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(self.error("length prefix exceeds block"));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.error("invalid flag")),
        }
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.error("invalid utf-8"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.str()).collect()
    }

    pub fn opt_f64(&mut self) -> Result<Option<f64>> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }

    pub fn opt_f64s(&mut self) -> Result<Option<Vec<f64>>> {
        Ok(if self.bool()? { Some(self.f64s()?) } else { None })
    }

    pub fn ecdf(&mut self) -> Result<EmpiricalCdf> {
        let saturating = self.bool()?;
        EmpiricalCdf::from_sorted(self.f64s()?, saturating)
    }

    pub fn ecdfs(&mut self) -> Result<Vec<EmpiricalCdf>> {
        let n = self.len(9)?;
        (0..n).map(|_| self.ecdf()).collect()
    }

    pub fn matrix(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64s()).collect()
    }
}

pub fn encode_weights(e: &mut Encoder, w: &AdaptorWeights) {
    e.usize(w.input_dim);
    e.usize(w.kernel_span);
    e.usize(w.filters);
    e.usize(w.classes);
    e.u8(match w.nonlinearity {
        Nonlinearity::Identity => 0,
        Nonlinearity::Tanh => 1,
    });
    e.f64s(&w.g);
    e.f64s(&w.g_bias);
    e.f64s(&w.w);
    e.f64s(&w.b);
}

pub fn decode_weights(d: &mut Decoder<'_>) -> Result<AdaptorWeights> {
    let input_dim = d.usize()?;
    let kernel_span = d.usize()?;
    let filters = d.usize()?;
    let classes = d.usize()?;
    let nonlinearity = match d.u8()? {
        0 => Nonlinearity::Identity,
        1 => Nonlinearity::Tanh,
        _ => return Err(d.error("unknown nonlinearity")),
    };
    let w = AdaptorWeights {
        input_dim,
        kernel_span,
        filters,
        classes,
        nonlinearity,
        g: d.f64s()?,
        g_bias: d.f64s()?,
        w: d.f64s()?,
        b: d.f64s()?,
    };
    if w.g.len() != filters * kernel_span || w.g_bias.len() != filters || w.w.len() != filters * classes || w.b.len() != classes {
        return Err(d.error("adaptor tensor shapes are inconsistent"));
    }
    Ok(w)
}

fn encode_model(m: &AdaptorModel) -> Vec<u8> {
    let mut e = Encoder::new("adaptor");
    encode_weights(&mut e, &m.weights);
    e.f64s(&m.normalization.mean);
    e.f64s(&m.normalization.std);
    e.strs(&m.train_ids);
    e.strs(&m.calibration_ids);
    e.f64s(&m.train_q);
    e.f64s(&m.train_d);
    e.f64(m.metric);
    e.usize(m.round);
    e.usize(m.epoch);
    e.finish()
}

fn decode_model(buf: &[u8]) -> Result<AdaptorModel> {
    let mut d = Decoder::new(buf, "adaptor.bin", "adaptor")?;
    let m = AdaptorModel {
        weights: decode_weights(&mut d)?,
        normalization: Normalization {
            mean: d.f64s()?,
            std: d.f64s()?,
        },
        train_ids: d.strs()?,
        calibration_ids: d.strs()?,
        train_q: d.f64s()?,
        train_d: d.f64s()?,
        metric: d.f64()?,
        round: d.usize()?,
        epoch: d.usize()?,
    };
    d.finish()?;
    Ok(m)
}

fn encode_index(index: &SupportIndex) -> Vec<u8> {
    let mut e = Encoder::new("support");
    e.usize(index.dim());
    e.f64s(index.rows());
    e.usizes(index.predictions());
    e.usizes(index.labels());
    e.strs(index.ids());
    e.finish()
}

fn decode_index(buf: &[u8]) -> Result<SupportIndex> {
    let mut d = Decoder::new(buf, "support.bin", "support")?;
    let index = SupportIndex::new(d.usize()?, d.f64s()?, d.usizes()?, d.usizes()?, d.strs()?)?;
    d.finish()?;
    Ok(index)
}

fn encode_tables(t: &CalibrationTables) -> Vec<u8> {
    let mut e = Encoder::new("tables");
    e.usize(t.classes);
    e.f64(t.alpha_prime);
    e.ecdfs(&t.distance_cdfs);
    e.ecdfs(&t.output_cdfs);
    e.ecdfs(&t.softqbin_cdfs);
    e.usizes(&t.class_counts);
    e.usize(t.rescaler.classes);
    e.f64s(&t.rescaler.weights);
    e.finish()
}

fn decode_tables(buf: &[u8]) -> Result<CalibrationTables> {
    let mut d = Decoder::new(buf, "tables.bin", "tables")?;
    let t = CalibrationTables {
        classes: d.usize()?,
        alpha_prime: d.f64()?,
        distance_cdfs: d.ecdfs()?,
        output_cdfs: d.ecdfs()?,
        softqbin_cdfs: d.ecdfs()?,
        class_counts: d.usizes()?,
        rescaler: Rescaler {
            classes: d.usize()?,
            weights: d.f64s()?,
        },
    };
    d.finish()?;
    Ok(t)
}

fn encode_round(e: &mut Encoder, s: &RoundStats) {
    e.usize(s.round);
    e.f64(s.metric);
    e.opt_f64(s.min_valid_qbin);
    e.opt_f64s(s.psi.as_deref());
    e.usize(s.centroid_medians.len());
    for m in &s.centroid_medians {
        e.usize(m.prediction);
        e.u64(m.bin);
        e.f64(m.median);
    }
}

fn decode_round(d: &mut Decoder<'_>) -> Result<RoundStats> {
    let round = d.usize()?;
    let metric = d.f64()?;
    let min_valid_qbin = d.opt_f64()?;
    let psi = d.opt_f64s()?;
    let n = d.len(24)?;
    let centroid_medians = (0..n)
        .map(|_| {
            Ok(BinMedian {
                prediction: d.usize()?,
                bin: d.u64()?,
                median: d.f64()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RoundStats {
        round,
        metric,
        min_valid_qbin,
        psi,
        centroid_medians,
    })
}

fn encode_thresholds(t: &RegionThresholds, rounds: &[RoundStats]) -> Vec<u8> {
    let mut e = Encoder::new("thresholds");
    e.f64(t.alpha_prime);
    e.opt_f64(t.min_valid_qbin);
    e.opt_f64s(t.psi.as_deref());
    e.opt_f64(t.robust_min_valid_qbin);
    e.usize(t.offsets.len());
    for o in &t.offsets {
        e.usize(o.prediction);
        e.u64(o.bin);
        e.f64(o.mad);
        e.f64(o.offset);
    }
    e.usize(t.min_valid_samples.len());
    t.min_valid_samples.iter().for_each(|s| e.opt_f64(*s));
    e.usize(rounds.len());
    rounds.iter().for_each(|r| encode_round(&mut e, r));
    e.finish()
}

fn decode_thresholds(buf: &[u8]) -> Result<(RegionThresholds, Vec<RoundStats>)> {
    let mut d = Decoder::new(buf, "thresholds.bin", "thresholds")?;
    let alpha_prime = d.f64()?;
    let min_valid_qbin = d.opt_f64()?;
    let psi = d.opt_f64s()?;
    let robust_min_valid_qbin = d.opt_f64()?;
    let n = d.len(32)?;
    let offsets = (0..n)
        .map(|_| {
            Ok(OffsetEntry {
                prediction: d.usize()?,
                bin: d.u64()?,
                mad: d.f64()?,
                offset: d.f64()?,
            })
        })
        .collect::<Result<_>>()?;
    let n = d.len(1)?;
    let min_valid_samples = (0..n).map(|_| d.opt_f64()).collect::<Result<_>>()?;
    let n = d.len(1)?;
    let rounds = (0..n).map(|_| decode_round(&mut d)).collect::<Result<_>>()?;
    d.finish()?;
    Ok((
        RegionThresholds {
            alpha_prime,
            min_valid_qbin,
            psi,
            robust_min_valid_qbin,
            offsets,
            min_valid_samples,
        },
        rounds,
    ))
}

fn encode_records(rounds: &[Vec<RegionRecord>]) -> Vec<u8> {
    let mut e = Encoder::new("records");
    e.usize(rounds.len());
    for records in rounds {
        e.usize(records.len());
        for r in records {
            e.f64(r.soft_qbin);
            e.f64(r.o_true);
            e.usize(r.label);
            e.usize(r.prediction);
            e.f64(r.p_centroid);
        }
    }
    e.finish()
}

fn decode_records(buf: &[u8]) -> Result<Vec<Vec<RegionRecord>>> {
    let mut d = Decoder::new(buf, "records.bin", "records")?;
    let n = d.len(8)?;
    let out = (0..n)
        .map(|_| {
            let m = d.len(40)?;
            (0..m)
                .map(|_| {
                    Ok(RegionRecord {
                        soft_qbin: d.f64()?,
                        o_true: d.f64()?,
                        label: d.usize()?,
                        prediction: d.usize()?,
                        p_centroid: d.f64()?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    d.finish()?;
    Ok(out)
}

fn encode_baselines(logits: &[Vec<f64>], labels: &[usize]) -> Vec<u8> {
    let mut e = Encoder::new("baselines");
    e.matrix(logits);
    e.usizes(labels);
    e.finish()
}

fn decode_baselines(buf: &[u8]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut d = Decoder::new(buf, "baselines.bin", "baselines")?;
    let out = (d.matrix()?, d.usizes()?);
    d.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub classes: usize,
    pub dim: usize,
    pub alpha_prime: f64,
    pub winner_round: usize,
    pub top_k: usize,
    pub config: TrainingRunConfig,
    /// SHA-256 of every block file, by file name.
    pub checksums: BTreeMap<String, String>,
    pub datasets: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content fingerprint of a split: ids, labels and embedding bits in order.
pub fn dataset_fingerprint(records: &[LabeledInstance]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0]);
        h.update((r.label as u64).to_le_bytes());
        for v in &r.embedding {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Exclusive writer lock on an archive directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SdmError::Archive(format!(
                "{} is locked by another writer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes `files` plus a manifest built by `manifest` from their checksums.
/// The old manifest is removed first and the new one renamed into place
/// last, so an interrupted write never leaves a loadable archive.
pub fn write_blocks<M: Serialize>(dir: &Path, files: &[(&str, Vec<u8>)], manifest: impl FnOnce(BTreeMap<String, String>) -> M) -> Result<()> {
    let _lock = DirLock::acquire(dir)?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let mut checksums = BTreeMap::new();
    for (name, bytes) in files {
        let mut f = File::create(dir.join(name))?;
        f.write_all(bytes)?;
        f.sync_all()?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let json = serde_json::to_string_pretty(&manifest(checksums))?;
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &manifest_path)?;
    Ok(())
}

/// Reads a block and checks it against the manifest checksum.
pub fn read_block(dir: &Path, name: &str, checksums: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let expected = checksums
        .get(name)
        .ok_or_else(|| SdmError::Archive(format!("manifest has no checksum for {name}")))?;
    let bytes = fs::read(dir.join(name))?;
    let found = sha256_hex(&bytes);
    if &found != expected {
        return Err(SdmError::Checksum {
            file: name.to_string(),
            expected: expected.clone(),
            found,
        });
    }
    Ok(bytes)
}

pub fn read_manifest<M: for<'de> Deserialize<'de>>(dir: &Path) -> Result<M> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| SdmError::Archive(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Seconds since the Unix epoch.
pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn save(archive: &EstimatorArchive, dir: &Path, datasets: BTreeMap<String, String>) -> Result<ArchiveManifest> {
    let files = [
        ("adaptor.bin", encode_model(&archive.model)),
        ("support.bin", encode_index(&archive.index)),
        ("tables.bin", encode_tables(&archive.tables)),
        ("thresholds.bin", encode_thresholds(&archive.thresholds, &archive.rounds)),
        ("records.bin", encode_records(&archive.round_records)),
        ("baselines.bin", encode_baselines(&archive.calibration_logits, &archive.calibration_labels)),
    ];
    let mut out = None;
    write_blocks(dir, &files, |checksums| {
        let m = ArchiveManifest {
            format_version: archive.format_version,
            created: now(),
            classes: archive.classes,
            dim: archive.dim,
            alpha_prime: archive.alpha_prime(),
            winner_round: archive.winner_round,
            top_k: archive.top_k,
            config: archive.config,
            checksums,
            datasets,
        };
        out = Some(m.clone());
        m
    })?;
    Ok(out.expect("manifest built"))
}

pub fn load(dir: &Path) -> Result<(EstimatorArchive, ArchiveManifest)> {
    let manifest: ArchiveManifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(SdmError::Archive(format!(
            "archive format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let block = |name: &str| read_block(dir, name, &manifest.checksums);
    let model = decode_model(&block("adaptor.bin")?)?;
    let index = decode_index(&block("support.bin")?)?;
    let tables = decode_tables(&block("tables.bin")?)?;
    let (thresholds, rounds) = decode_thresholds(&block("thresholds.bin")?)?;
    let round_records = decode_records(&block("records.bin")?)?;
    let (calibration_logits, calibration_labels) = decode_baselines(&block("baselines.bin")?)?;
    let c = manifest.classes;
    if model.weights.classes != c
        || model.weights.input_dim != manifest.dim
        || tables.classes != c
        || index.dim() != model.weights.filters
        || thresholds.psi.as_ref().is_some_and(|p| p.len() != c)
    {
        return Err(SdmError::Archive("archive blocks have inconsistent shapes".into()));
    }
    let archive = EstimatorArchive {
        format_version: manifest.format_version,
        classes: c,
        dim: manifest.dim,
        config: manifest.config,
        model,
        index,
        tables,
        thresholds,
        rounds,
        round_records,
        winner_round: manifest.winner_round,
        calibration_logits,
        calibration_labels,
        top_k: manifest.top_k,
    };
    Ok((archive, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::RescalerConfig;
    use crate::data::{stratified_even_split, DatasetBundle};
    use crate::numerics::AdaptorConfig;
    use crate::synthetic::{gaussian_blobs, BlobSpec};

    fn small_archive() -> EstimatorArchive {
        let data = gaussian_blobs(&BlobSpec { dim: 3, ..Default::default() }, 60, 1, "p", None);
        let (train, cal) = stratified_even_split(&data, 2, 0);
        let bundle = DatasetBundle::new(2, train, cal, vec![], 0).unwrap();
        let config = TrainingRunConfig {
            rounds: 2,
            max_epochs: 2,
            batch_size: 20,
            learning_rate: 1e-2,
            alpha_prime: 0.9,
            adaptor: AdaptorConfig { filters: 4, ..Default::default() },
            rescaler: RescalerConfig { max_epochs: 5, ..Default::default() },
            ..Default::default()
        };
        EstimatorArchive::build(&bundle, &config).unwrap()
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = small_archive();
        save(&a, dir.path(), BTreeMap::new()).unwrap();
        let (b, m) = load(dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.checksums.len(), 6);
        assert!(!dir.path().join(LOCK).exists());
    }

    #[test]
    fn second_save_is_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = small_archive();
        save(&a, d1.path(), BTreeMap::new()).unwrap();
        let (b, _) = load(d1.path()).unwrap();
        save(&b, d2.path(), BTreeMap::new()).unwrap();
        for name in ["adaptor.bin", "support.bin", "tables.bin", "thresholds.bin", "records.bin", "baselines.bin"] {
            assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap());
        }
    }

    #[test]
    fn corrupted_block_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save(&small_archive(), dir.path(), BTreeMap::new()).unwrap();
        let path = dir.path().join("tables.bin");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(SdmError::Checksum { .. })));
    }

    #[test]
    fn missing_manifest_is_not_loadable() {
        let dir = tempfile::tempdir().unwrap();
        save(&small_archive(), dir.path(), BTreeMap::new()).unwrap();
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn lock_excludes_a_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let held = DirLock::acquire(dir.path()).unwrap();
        assert!(save(&small_archive(), dir.path(), BTreeMap::new()).is_err());
        drop(held);
        assert!(save(&small_archive(), dir.path(), BTreeMap::new()).is_ok());
    }

    #[test]
    fn truncated_block_is_rejected() {
        let mut e = Encoder::new("x");
        e.f64s(&[1.0, 2.0]);
        let bytes = e.finish();
        let mut d = Decoder::new(&bytes[..bytes.len() - 3], "x.bin", "x").unwrap();
        assert!(d.f64s().is_err());
        assert!(Decoder::new(&bytes, "x.bin", "y").is_err());
    }

    #[test]
    fn fingerprints_track_content() {
        let a = gaussian_blobs(&BlobSpec::default(), 5, 1, "p", None);
        let mut b = a.clone();
        assert_eq!(dataset_fingerprint(&a), dataset_fingerprint(&b));
        b[0].label = 1 - b[0].label;
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&b));
    }
}
