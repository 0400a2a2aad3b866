//! Desk-scale SDM language model: a frozen toy hidden map, a joint
//! negative+positive output vocabulary, the masked log-space regularizer,
//! verification-driven next-token training and verified greedy generation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{argmax, sdm_log_backward, sdm_log_probabilities, sdm_probabilities, softmax, DEFAULT_KEPS};
use crate::archive::{self, Decoder, Encoder};
use crate::data::{stratified_even_split, DatasetBundle, LabeledInstance};
use crate::error::{Result, SdmError};
use crate::estimator::{EstimatorArchive, Verdict, FORMAT_VERSION};
use crate::numerics::{Adam, AdamConfig};
use crate::training::TrainingRunConfig;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const MARKER: usize = 2;
/// First ordinary (non-control) token id.
pub const FIRST_CONTENT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            embed_dim: 16,
            hidden_dim: 128,
            seed: 0,
        }
    }
}

/// Output heads are `hidden_dim × vocab`, row-major by hidden unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub embeddings: Vec<f64>,
    /// `hidden_dim × 3·embed_dim`.
    pub mix: Vec<f64>,
    pub mix_bias: Vec<f64>,
    pub w_ref: Vec<f64>,
    pub w_neg: Vec<f64>,
    pub w_pos: Vec<f64>,
}

impl ToyLm {
    pub fn new(config: &ToyLmConfig) -> Result<Self> {
        if config.vocab <= FIRST_CONTENT || config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(SdmError::InvalidArgument(format!(
                "toy LM needs vocab > {FIRST_CONTENT} and nonzero dimensions, got {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let (v, e, h) = (config.vocab, config.embed_dim, config.hidden_dim);
        let embeddings = (0..v * e).map(|_| unit.sample(&mut rng)).collect();
        let fan_in = 3 * e;
        let scale = (1.0 / fan_in as f64).sqrt();
        let mix = (0..h * fan_in).map(|_| unit.sample(&mut rng) * scale).collect();
        let mix_bias = (0..h).map(|_| unit.sample(&mut rng) * 0.1).collect();
        let bound = 1.0 / (h as f64).sqrt();
        let w_ref: Vec<f64> = (0..h * v).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            vocab: v,
            embed_dim: e,
            hidden_dim: h,
            embeddings,
            mix,
            mix_bias,
            w_neg: w_ref.clone(),
            w_pos: w_ref.clone(),
            w_ref,
        })
    }

    fn embedding(&self, token: usize) -> &[f64] {
        &self.embeddings[token * self.embed_dim..(token + 1) * self.embed_dim]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|t| **t >= self.vocab) {
            Some(t) => Err(SdmError::InvalidArgument(format!("token {t} is outside the vocabulary of {}", self.vocab))),
            None => Ok(()),
        }
    }

    /// Hidden state at every position: `tanh(A·[mean prefix; last; previous] + a)`.
    /// Position `t` is the state that predicts token `t + 1`.
    pub fn hidden_states(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let e = self.embed_dim;
        let mut sum = vec![0.0; e];
        let mut out = Vec::with_capacity(tokens.len());
        let mut input = vec![0.0; 3 * e];
        for (t, &tok) in tokens.iter().enumerate() {
            for (s, x) in sum.iter_mut().zip(self.embedding(tok)) {
                *s += x;
            }
            let n = (t + 1) as f64;
            for k in 0..e {
                input[k] = sum[k] / n;
            }
            input[e..2 * e].copy_from_slice(self.embedding(tok));
            if t > 0 {
                input[2 * e..].copy_from_slice(self.embedding(tokens[t - 1]));
            } else {
                input[2 * e..].iter_mut().for_each(|x| *x = 0.0);
            }
            let h = (0..self.hidden_dim)
                .map(|j| {
                    let row = &self.mix[j * 3 * e..(j + 1) * 3 * e];
                    (row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>() + self.mix_bias[j]).tanh()
                })
                .collect();
            out.push(h);
        }
        Ok(out)
    }

    pub fn head_logits(&self, head: &[f64], hidden: &[f64]) -> Vec<f64> {
        let v = self.vocab;
        let mut z = vec![0.0; v];
        for (k, hk) in hidden.iter().enumerate() {
            for (zj, w) in z.iter_mut().zip(&head[k * v..(k + 1) * v]) {
                *zj += hk * w;
            }
        }
        z
    }

    /// `[z_neg; z_pos]`, length `2·vocab`.
    pub fn joint_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut z = self.head_logits(&self.w_neg, hidden);
        z.extend(self.head_logits(&self.w_pos, hidden));
        z
    }

    /// `[z_ref; z_ref]`.
    pub fn reference_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let z = self.head_logits(&self.w_ref, hidden);
        let mut out = z.clone();
        out.extend(z);
        out
    }

    /// Resets both trainable and frozen heads to the reference head.
    pub fn reset_heads(&mut self) {
        self.w_neg = self.w_ref.clone();
        self.w_pos = self.w_ref.clone();
    }

    /// Trains the reference head with softmax cross-entropy on every
    /// completion token in `instances`, then clones it into both heads.
    pub fn pretrain_reference(&mut self, instances: &[GenAiInstance], epochs: usize, learning_rate: f64, batch_size: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rows = Vec::new();
        for inst in instances {
            let hs = self.hidden_states(&inst.tokens)?;
            for t in inst.marker..inst.tokens.len().saturating_sub(1) {
                rows.push((hs[t].clone(), inst.tokens[t + 1]));
            }
        }
        if rows.is_empty() {
            return Err(SdmError::Empty("no completion tokens to pretrain on".into()));
        }
        let mut adam = Adam::new(&[self.w_ref.len()], AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        let v = self.vocab;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(batch_size.max(1)) {
                let mut grad = vec![0.0; self.w_ref.len()];
                let inv = 1.0 / batch.len() as f64;
                for &i in batch {
                    let (h, y) = &rows[i];
                    let p = softmax(&self.head_logits(&self.w_ref, h), 1.0);
                    total -= p[*y].max(f64::MIN_POSITIVE).ln();
                    for (k, hk) in h.iter().enumerate() {
                        for j in 0..v {
                            let g = p[j] - f64::from(u8::from(j == *y));
                            grad[k * v + j] += hk * g * inv;
                        }
                    }
                }
                adam.update(&mut [&mut self.w_ref], &[&grad], learning_rate)?;
            }
            history.push(total / rows.len() as f64);
        }
        self.reset_heads();
        Ok(history)
    }
}

/// Maps a joint-vocabulary index back to its token.
pub fn decode_joint_index(index: usize, vocab: usize) -> usize {
    index % vocab
}

/// SDM activation over the concatenated negative and positive logits for the
/// state after `prefix`.
pub fn joint_vocab_sdm_forward(lm: &ToyLm, prefix: &[usize], q: f64, d: f64, log_form: bool) -> Result<Vec<f64>> {
    let hs = lm.hidden_states(prefix)?;
    let h = hs.last().ok_or_else(|| SdmError::Empty("empty prefix".into()))?;
    let z = lm.joint_logits(h);
    Ok(if log_form {
        sdm_log_probabilities(&z, q, d, DEFAULT_KEPS)
    } else {
        sdm_probabilities(&z, q, d)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenAiInstance {
    #[serde(default)]
    pub id: String,
    pub tokens: Vec<usize>,
    /// Position of the completion marker; the completion is everything after it.
    pub marker: usize,
    pub y: usize,
    /// Expected first completion token, when the instance encodes a task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_label: Option<usize>,
    #[serde(skip, default)]
    pub q: f64,
    #[serde(skip, default)]
    pub d: f64,
}

impl GenAiInstance {
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..=self.marker]
    }

    pub fn completion(&self) -> &[usize] {
        &self.tokens[self.marker + 1..]
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if self.marker >= self.tokens.len() {
            return Err(SdmError::InvalidArgument(format!("{}: marker {} is outside the sequence", self.id, self.marker)));
        }
        if self.y > 1 {
            return Err(SdmError::InvalidArgument(format!("{}: verification label must be 0 or 1", self.id)));
        }
        if let Some(t) = self.tokens.iter().find(|t| **t >= vocab) {
            return Err(SdmError::InvalidArgument(format!("{}: token {t} is outside the vocabulary of {vocab}", self.id)));
        }
        Ok(())
    }
}

/// Reads a JSON-lines corpus; missing ids become `line<n>`.
pub fn read_corpus(path: &Path) -> Result<Vec<GenAiInstance>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut inst: GenAiInstance = serde_json::from_str(&line).map_err(|e| SdmError::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if inst.id.is_empty() {
            inst.id = format!("line{}", i + 1);
        }
        if inst.marker >= inst.tokens.len() {
            return Err(SdmError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("marker {} is outside the sequence", inst.marker),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &[GenAiInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for inst in corpus {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub prompt_len: usize,
    pub completion_len: usize,
    pub instances: usize,
    pub task_labels: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 32,
            prompt_len: 3,
            completion_len: 2,
            instances: 400,
            task_labels: true,
            seed: 0,
        }
    }
}

/// Two-pattern language. Verified completions follow the chain
/// `next = content[(i + 1) mod K]` from the last prompt token; corrupted
/// completions follow `content[(i + 3) mod K]`. Labels alternate 1, 0.
pub fn two_pattern_corpus(spec: &CorpusSpec) -> Vec<GenAiInstance> {
    let k = spec.vocab - FIRST_CONTENT;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let step = |tok: usize, by: usize| FIRST_CONTENT + (tok - FIRST_CONTENT + by) % k;
    (0..spec.instances)
        .map(|n| {
            let y = usize::from(n % 2 == 0);
            let mut tokens: Vec<usize> = (0..spec.prompt_len).map(|_| FIRST_CONTENT + rng.random_range(0..k)).collect();
            let last = *tokens.last().unwrap_or(&FIRST_CONTENT);
            tokens.push(MARKER);
            let marker = tokens.len() - 1;
            let by = if y == 1 { 1 } else { 3 };
            let mut cur = last;
            for _ in 0..spec.completion_len {
                cur = step(cur, by);
                tokens.push(cur);
            }
            tokens.push(EOS);
            GenAiInstance {
                id: format!("g{n}"),
                tokens,
                marker,
                y,
                task_label: spec.task_labels.then(|| step(last, 1)),
                q: 0.0,
                d: 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub completion: Vec<usize>,
    pub truncated: bool,
}

/// Greedy decoding over the joint vocabulary. The SDM activation with
/// `q = e − 2, d = 1` has the same argmax as the joint logits.
pub fn greedy_decode(lm: &ToyLm, prompt: &[usize], cap: usize) -> Result<Generation> {
    let mut seq = prompt.to_vec();
    let mut completion = Vec::new();
    while completion.len() < cap {
        let hs = lm.hidden_states(&seq)?;
        let h = hs.last().ok_or_else(|| SdmError::Empty("empty prompt".into()))?;
        let tok = decode_joint_index(argmax(&lm.joint_logits(h)), lm.vocab);
        seq.push(tok);
        completion.push(tok);
        if tok == EOS {
            return Ok(Generation { completion, truncated: false });
        }
    }
    Ok(Generation { completion, truncated: true })
}

/// Verification features: mean hidden state over the completion positions
/// concatenated with the state that predicts the final token. A sequence
/// with no completion uses the marker state alone.
pub fn verification_features(lm: &ToyLm, tokens: &[usize], marker: usize) -> Result<Vec<f64>> {
    let hs = lm.hidden_states(tokens)?;
    let end = tokens.len().saturating_sub(1).max(marker + 1).min(hs.len());
    let states = &hs[marker.min(end - 1)..end];
    let mut out = vec![0.0; 2 * lm.hidden_dim];
    for h in states {
        for (o, x) in out.iter_mut().zip(h) {
            *o += x / states.len() as f64;
        }
    }
    out[lm.hidden_dim..].copy_from_slice(&states[states.len() - 1]);
    Ok(out)
}

/// Builds the binary verification estimator from force-decoded features of
/// every instance.
pub fn build_verification_layer(lm: &ToyLm, corpus: &[GenAiInstance], config: &TrainingRunConfig) -> Result<EstimatorArchive> {
    let records = corpus
        .par_iter()
        .map(|inst| {
            inst.validate(lm.vocab)?;
            Ok(LabeledInstance::new(inst.id.clone(), inst.y, verification_features(lm, &inst.tokens, inst.marker)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, cal) = stratified_even_split(&records, 2, config.seed);
    let bundle = DatasetBundle::new(2, train, cal, vec![], usize::MAX)?;
    EstimatorArchive::build(&bundle, config)
}

/// Generates from the prompt and scores the result with the verifier.
pub fn generate_verified(lm: &ToyLm, verifier: &EstimatorArchive, id: &str, prompt: &[usize], cap: usize) -> Result<(Generation, Verdict)> {
    let g = greedy_decode(lm, prompt, cap)?;
    let mut seq = prompt.to_vec();
    seq.extend(&g.completion);
    let features = verification_features(lm, &seq, prompt.len() - 1)?;
    let verdict = verifier.predict(id, &features)?;
    Ok((g, verdict))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub epochs: usize,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.0,
            beta_max: 0.1,
            epochs: 5,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min >= 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(SdmError::InvalidArgument(format!(
                "need 0 <= beta_min <= beta_max, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        if self.epochs == 0 {
            return Err(SdmError::InvalidArgument("at least one epoch is required".into()));
        }
        Ok(())
    }

    /// β used for each of `batches` mini-batches: starts at `beta_min` and
    /// grows by `(beta_max − beta_min) / batches` per batch.
    pub fn betas(&self, batches: usize) -> Vec<f64> {
        let step = (self.beta_max - self.beta_min) / batches.max(1) as f64;
        (0..batches).map(|i| self.beta_min + step * i as f64).collect()
    }
}

/// One next-token training row.
#[derive(Debug, Clone, Copy)]
pub struct TokenRow<'a> {
    pub hidden: &'a [f64],
    /// Joint-vocabulary label (token + vocab for verified instances).
    pub label: usize,
    pub q: f64,
    pub d: f64,
}

/// Zeroes the argmax of each reference half, the negative and positive
/// argmaxes and the label.
pub fn regularization_mask(reference_log: &[f64], joint_log: &[f64], label: usize, vocab: usize) -> Vec<f64> {
    let mut mask = vec![1.0; 2 * vocab];
    for i in [
        argmax(&reference_log[..vocab]),
        argmax(&reference_log[vocab..]) + vocab,
        argmax(&joint_log[..vocab]),
        argmax(&joint_log[vocab..]) + vocab,
        label,
    ] {
        mask[i] = 0.0;
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenLoss {
    pub total: f64,
    pub nll: f64,
    /// Batch-mean masked L2 distance.
    pub regularizer: f64,
    /// Rescaled regularizer added with weight β.
    pub rescaled: f64,
    /// Exponent scale, held constant for differentiation.
    pub scale: f64,
    /// Gradient with respect to the positive head.
    pub grad: Vec<f64>,
}

/// `R' = sqrt(max(R, 1)^clamp(s, 0, 1))` and `dR'/dR`.
fn rescale_regularizer(r: f64, s: f64) -> (f64, f64) {
    let e = s.clamp(0.0, 1.0);
    if r > 1.0 {
        let value = r.powf(e / 2.0);
        (value, 0.5 * e * r.powf(e / 2.0 - 1.0))
    } else {
        (1.0, 0.0)
    }
}

pub fn regularizer_scale(nll: f64, r: f64, k_eps: f64) -> f64 {
    (nll + k_eps).ln() / ((r + k_eps).ln() + k_eps)
}

/// Mean joint-vocabulary NLL plus `β·R'`, with the gradient w.r.t. `w_pos`.
/// `fixed_scale` overrides the loss-derived exponent scale.
pub fn next_token_loss_and_grad(lm: &ToyLm, rows: &[TokenRow<'_>], beta: f64, k_eps: f64, fixed_scale: Option<f64>) -> Result<NextTokenLoss> {
    if rows.is_empty() {
        return Err(SdmError::Empty("empty next-token batch".into()));
    }
    let v = lm.vocab;
    let n = rows.len() as f64;
    struct Fwd {
        joint: Vec<f64>,
        masked_diff: Vec<f64>,
        norm: f64,
    }
    let mut fwd = Vec::with_capacity(rows.len());
    let (mut nll, mut reg) = (0.0, 0.0);
    for r in rows {
        if r.label >= 2 * v {
            return Err(SdmError::InvalidArgument(format!("joint label {} out of range", r.label)));
        }
        let joint = lm.joint_logits(r.hidden);
        let joint_log = sdm_log_probabilities(&joint, r.q, r.d, k_eps);
        let reference_log = sdm_log_probabilities(&lm.reference_logits(r.hidden), r.q, r.d, k_eps);
        let mask = regularization_mask(&reference_log, &joint_log, r.label, v);
        let masked_diff: Vec<f64> = (0..2 * v).map(|i| mask[i] * (reference_log[i] - joint_log[i])).collect();
        let norm = masked_diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        nll -= joint_log[r.label];
        reg += norm;
        fwd.push(Fwd {
            joint,
            masked_diff,
            norm,
        });
    }
    nll /= n;
    reg /= n;
    let scale = fixed_scale.unwrap_or_else(|| regularizer_scale(nll, reg, k_eps));
    let (rescaled, d_rescaled) = rescale_regularizer(reg, scale);
    let total = nll + beta * rescaled;
    if !total.is_finite() {
        return Err(SdmError::NonFiniteLoss {
            loss: total,
            epoch: 0,
            context: "next-token loss".into(),
        });
    }
    let reg_weight = beta * d_rescaled / n;
    let mut grad = vec![0.0; lm.hidden_dim * v];
    for (r, f) in rows.iter().zip(&fwd) {
        let mut upstream = vec![0.0; 2 * v];
        upstream[r.label] -= 1.0 / n;
        if reg_weight != 0.0 && f.norm > 0.0 {
            // d||m ⊙ (ref − joint)|| / d joint = −m ⊙ diff / ||·||; mask² = mask.
            for (u, diff) in upstream.iter_mut().zip(&f.masked_diff) {
                *u -= reg_weight * diff / f.norm;
            }
        }
        let dz = sdm_log_backward(&f.joint, r.q, r.d, k_eps, &upstream);
        for (k, hk) in r.hidden.iter().enumerate() {
            for (g, dzj) in grad[k * v..(k + 1) * v].iter_mut().zip(&dz[v..]) {
                *g += hk * dzj;
            }
        }
    }
    Ok(NextTokenLoss {
        total,
        nll,
        regularizer: reg,
        rescaled,
        scale,
        grad,
    })
}

/// Per-instance regularizer diagnostics.
pub fn regularization_term(lm: &ToyLm, prefix: &[usize], label: usize, q: f64, d: f64, k_eps: f64) -> Result<(f64, Vec<f64>)> {
    let hs = lm.hidden_states(prefix)?;
    let h = hs.last().ok_or_else(|| SdmError::Empty("empty prefix".into()))?;
    let joint_log = sdm_log_probabilities(&lm.joint_logits(h), q, d, k_eps);
    let reference_log = sdm_log_probabilities(&lm.reference_logits(h), q, d, k_eps);
    let mask = regularization_mask(&reference_log, &joint_log, label, lm.vocab);
    let r = mask
        .iter()
        .zip(reference_log.iter().zip(&joint_log))
        .map(|(m, (a, b))| (m * (a - b)).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((r, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkTrainConfig {
    pub schedule: TrainingSchedule,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub k_eps: f64,
    /// Decoding length cap; defaults to 4× the longest completion.
    pub length_cap: Option<usize>,
}

impl Default for NetworkTrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainingSchedule::default(),
            batch_size: 16,
            learning_rate: 5e-3,
            seed: 0,
            k_eps: DEFAULT_KEPS,
            length_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub regularizer: f64,
    pub final_beta: f64,
    pub metric: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone)]
pub struct NetworkOutcome {
    /// Weights of the selected epoch, or the initial weights if no epoch
    /// admitted more than zero points.
    pub lm: ToyLm,
    /// 0 means the initial weights were kept.
    pub selected_epoch: usize,
    pub selected_metric: usize,
    /// Admitted count before any next-token update.
    pub initial_metric: usize,
    pub history: Vec<NetworkEpochLog>,
    pub length_cap: usize,
}

pub fn default_length_cap(corpus: &[GenAiInstance]) -> usize {
    4 * corpus.iter().map(|i| i.completion().len()).max().unwrap_or(1).max(1)
}

/// Count of instances whose generation the verifier admits with ŷ = 1 and,
/// when a task label is present, whose first generated token matches it.
/// Also returns how many generations hit the length cap.
pub fn admitted_count(lm: &ToyLm, verifier: &EstimatorArchive, instances: &[&GenAiInstance], cap: usize) -> Result<(usize, usize)> {
    let results = instances
        .par_iter()
        .map(|inst| {
            let (g, v) = generate_verified(lm, verifier, &inst.id, inst.prompt(), cap)?;
            let task_ok = inst.task_label.is_none_or(|t| g.completion.first() == Some(&t));
            Ok((v.admitted && v.prediction == 1 && task_ok, g.truncated))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((results.iter().filter(|r| r.0).count(), results.iter().filter(|r| r.1).count()))
}

/// Decodes a throwaway completion for every instance and caches the
/// verifier's `(q, d)` on it.
pub fn refresh_similarity(lm: &ToyLm, verifier: &EstimatorArchive, instances: &mut [GenAiInstance], cap: usize) -> Result<usize> {
    let scored = instances
        .par_iter()
        .map(|inst| {
            let g = greedy_decode(lm, inst.prompt(), cap)?;
            let mut seq = inst.prompt().to_vec();
            seq.extend(&g.completion);
            let features = verification_features(lm, &seq, inst.marker)?;
            let (_, q, _, d, _, _) = verifier.uncertainty(&features)?;
            Ok((q as f64, d, g.truncated))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut truncated = 0;
    for (inst, (q, d, t)) in instances.iter_mut().zip(scored) {
        inst.q = q;
        inst.d = d;
        truncated += usize::from(t);
    }
    Ok(truncated)
}

/// Fine-tunes the positive head against a fixed verifier. The verifier's
/// train/calibration assignment selects which instances are trained on and
/// which are used for epoch selection.
pub fn sdm_network_train(lm: &ToyLm, corpus: &[GenAiInstance], verifier: &EstimatorArchive, config: &NetworkTrainConfig) -> Result<NetworkOutcome> {
    config.schedule.validate()?;
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(SdmError::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    for inst in corpus {
        inst.validate(lm.vocab)?;
    }
    let train_ids: HashSet<&str> = verifier.model.train_ids.iter().map(String::as_str).collect();
    let cal_ids: HashSet<&str> = verifier.model.calibration_ids.iter().map(String::as_str).collect();
    let mut positives: Vec<GenAiInstance> = corpus.iter().filter(|i| i.y == 1 && train_ids.contains(i.id.as_str())).cloned().collect();
    let calibration: Vec<&GenAiInstance> = corpus.iter().filter(|i| cal_ids.contains(i.id.as_str())).collect();
    if positives.is_empty() || calibration.is_empty() {
        return Err(SdmError::Empty("verifier split leaves no verified training or calibration instances".into()));
    }
    let cap = config.length_cap.unwrap_or_else(|| default_length_cap(corpus));
    let hidden: Vec<Vec<Vec<f64>>> = positives.par_iter().map(|i| lm.hidden_states(&i.tokens)).collect::<Result<_>>()?;

    let mut current = lm.clone();
    let (initial_metric, _) = admitted_count(&current, verifier, &calibration, cap)?;
    log::info!("initial admitted count {initial_metric}");
    let mut best = (current.clone(), 0usize, 0usize);
    refresh_similarity(&current, verifier, &mut positives, cap)?;

    let mut adam = Adam::new(&[current.w_pos.len()], AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.schedule.epochs);
    for epoch in 1..=config.schedule.epochs {
        let mut rows = Vec::new();
        for (inst, hs) in positives.iter().zip(&hidden) {
            for t in inst.marker..inst.tokens.len().saturating_sub(1) {
                rows.push(TokenRow {
                    hidden: &hs[t],
                    label: inst.tokens[t + 1] + current.vocab,
                    q: inst.q,
                    d: inst.d,
                });
            }
        }
        rows.shuffle(&mut rng);
        let batches: Vec<&[TokenRow<'_>]> = rows.chunks(config.batch_size).collect();
        let betas = config.schedule.betas(batches.len());
        let (mut loss_sum, mut nll_sum, mut reg_sum) = (0.0, 0.0, 0.0);
        for (batch, beta) in batches.iter().zip(&betas) {
            let out = next_token_loss_and_grad(&current, batch, *beta, config.k_eps, None).map_err(|e| match e {
                SdmError::NonFiniteLoss { loss, context, .. } => SdmError::NonFiniteLoss { loss, epoch, context },
                other => other,
            })?;
            adam.update(&mut [&mut current.w_pos], &[&out.grad], config.learning_rate)?;
            loss_sum += out.total;
            nll_sum += out.nll;
            reg_sum += out.regularizer;
        }
        let nb = batches.len().max(1) as f64;
        let truncated = refresh_similarity(&current, verifier, &mut positives, cap)?;
        let (metric, _) = admitted_count(&current, verifier, &calibration, cap)?;
        log::info!("net epoch={epoch} loss={:.6} metric={metric}", loss_sum / nb);
        history.push(NetworkEpochLog {
            epoch,
            loss: loss_sum / nb,
            nll: nll_sum / nb,
            regularizer: reg_sum / nb,
            final_beta: betas.last().copied().unwrap_or(config.schedule.beta_min),
            metric,
            truncated,
        });
        if metric > best.2 {
            best = (current.clone(), epoch, metric);
        }
    }
    Ok(NetworkOutcome {
        lm: best.0,
        selected_epoch: best.1,
        selected_metric: best.2,
        initial_metric,
        history,
        length_cap: cap,
    })
}

fn encode_lm(lm: &ToyLm) -> Vec<u8> {
    let mut e = Encoder::new("toylm");
    e.usize(lm.vocab);
    e.usize(lm.embed_dim);
    e.usize(lm.hidden_dim);
    for t in [&lm.embeddings, &lm.mix, &lm.mix_bias, &lm.w_ref, &lm.w_neg, &lm.w_pos] {
        e.f64s(t);
    }
    e.finish()
}

fn decode_lm(buf: &[u8]) -> Result<ToyLm> {
    let mut d = Decoder::new(buf, "lm.bin", "toylm")?;
    let lm = ToyLm {
        vocab: d.usize()?,
        embed_dim: d.usize()?,
        hidden_dim: d.usize()?,
        embeddings: d.f64s()?,
        mix: d.f64s()?,
        mix_bias: d.f64s()?,
        w_ref: d.f64s()?,
        w_neg: d.f64s()?,
        w_pos: d.f64s()?,
    };
    d.finish()?;
    let (v, e, h) = (lm.vocab, lm.embed_dim, lm.hidden_dim);
    if lm.embeddings.len() != v * e
        || lm.mix.len() != h * 3 * e
        || lm.mix_bias.len() != h
        || [&lm.w_ref, &lm.w_neg, &lm.w_pos].iter().any(|w| w.len() != h * v)
    {
        return Err(SdmError::Archive("toy LM tensor shapes are inconsistent".into()));
    }
    Ok(lm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmManifest {
    pub format_version: u32,
    pub created: u64,
    pub vocab: usize,
    pub hidden_dim: usize,
    pub length_cap: usize,
    pub selected_epoch: usize,
    pub checksums: BTreeMap<String, String>,
}

pub const VERIFIER_DIR: &str = "verifier";

/// Saves the LM under `dir` and the verifier under `dir/verifier`.
pub fn save_lm(dir: &Path, lm: &ToyLm, verifier: &EstimatorArchive, length_cap: usize, selected_epoch: usize) -> Result<()> {
    archive::save(verifier, &dir.join(VERIFIER_DIR), BTreeMap::new())?;
    archive::write_blocks(dir, &[("lm.bin", encode_lm(lm))], |checksums| LmManifest {
        format_version: FORMAT_VERSION,
        created: archive::now(),
        vocab: lm.vocab,
        hidden_dim: lm.hidden_dim,
        length_cap,
        selected_epoch,
        checksums,
    })
}

pub fn load_lm(dir: &Path) -> Result<(ToyLm, EstimatorArchive, LmManifest)> {
    let manifest: LmManifest = archive::read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(SdmError::Archive(format!("unsupported LM format {}", manifest.format_version)));
    }
    let lm = decode_lm(&archive::read_block(dir, "lm.bin", &manifest.checksums)?)?;
    let (verifier, _) = archive::load(&dir.join(VERIFIER_DIR))?;
    Ok((lm, verifier, manifest))
}

/// Standard softmax cross-entropy over the joint vocabulary, used as a
/// reference for the `q = e − 2, d = 1` case.
pub fn joint_cross_entropy(lm: &ToyLm, hidden: &[f64], label: usize) -> f64 {
    -softmax(&lm.joint_logits(hidden), 1.0)[label].ln()
}
