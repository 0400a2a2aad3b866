//! Seven-value feature vectors from structured multiple-choice LLM responses.
//!
//! Each response line carries the three JSON values of the answer schema plus
//! the top-1 log probability of every emitted token:
//!
//! ```text
//! {"answer_letter": "A", "confidence_in_answer_letter": 0.9,
//!  "short_explanation_for_answer_confidence": "...",
//!  "token_logprobs": [{"token": "{\"", "logprob": -0.01}, ...]}
//! ```
//!
//! The concatenated token text is the raw JSON the model produced; the tokens
//! overlapping each value's character span are averaged in probability space.
//! Explicit token index ranges can be supplied instead through `token_spans`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const ANSWER_KEY: &str = "answer_letter";
pub const CONFIDENCE_KEY: &str = "confidence_in_answer_letter";
pub const EXPLANATION_KEY: &str = "short_explanation_for_answer_confidence";

/// Keys in feature order.
pub const FEATURE_KEYS: [&str; 3] = [ANSWER_KEY, CONFIDENCE_KEY, EXPLANATION_KEY];

pub const FEATURE_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LlmResponseRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default)]
    pub answer_letter: Option<serde_json::Value>,
    #[serde(default)]
    pub confidence_in_answer_letter: Option<serde_json::Value>,
    #[serde(default)]
    pub short_explanation_for_answer_confidence: Option<serde_json::Value>,
    #[serde(default)]
    pub token_logprobs: Vec<TokenLogprob>,
    /// Half-open token index ranges per key, overriding span detection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_spans: Option<BTreeMap<String, [usize; 2]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmFeatures {
    pub values: [f64; FEATURE_DIM],
    /// Set when the record was treated as a refusal.
    pub refusal: bool,
    pub warning: Option<String>,
}

impl LlmFeatures {
    fn refusal(reason: impl Into<String>) -> Self {
        Self {
            values: [0.0; FEATURE_DIM],
            refusal: true,
            warning: Some(reason.into()),
        }
    }
}

/// Choice letters, in soft one-hot order.
#[derive(Debug, Clone)]
pub struct ChoiceSet(pub [char; 4]);

impl Default for ChoiceSet {
    fn default() -> Self {
        Self(['A', 'B', 'C', 'D'])
    }
}

impl ChoiceSet {
    /// Position of the answer letter, ignoring surrounding punctuation and
    /// whitespace (`"$A"`, `" b "`).
    pub fn parse(&self, raw: &str) -> Option<usize> {
        let mut letters = raw.chars().filter(|c| c.is_alphanumeric());
        let letter = letters.next()?.to_ascii_uppercase();
        if letters.next().is_some() {
            return None;
        }
        self.0.iter().position(|c| *c == letter)
    }
}

/// Mean of exponentiated log probabilities over a token range.
fn mean_probability(tokens: &[TokenLogprob], span: [usize; 2]) -> Option<f64> {
    let [start, end] = span;
    if start >= end || end > tokens.len() {
        return None;
    }
    let slice = &tokens[start..end];
    if slice.iter().any(|t| !(t.logprob <= 0.0)) {
        return None;
    }
    Some(slice.iter().map(|t| t.logprob.exp()).sum::<f64>() / slice.len() as f64)
}

/// Character range of the value of `key` in a JSON text, excluding string
/// quotes.
fn value_char_span(text: &str, key: &str) -> Option<(usize, usize)> {
    let needle = format!("\"{key}\"");
    let key_at = text.find(&needle)?;
    let mut rest = key_at + needle.len();
    let bytes = text.as_bytes();
    while rest < bytes.len() && bytes[rest].is_ascii_whitespace() {
        rest += 1;
    }
    if bytes.get(rest) != Some(&b':') {
        return None;
    }
    rest += 1;
    while rest < bytes.len() && bytes[rest].is_ascii_whitespace() {
        rest += 1;
    }
    if bytes.get(rest) == Some(&b'"') {
        let start = rest + 1;
        let mut i = start;
        while i < bytes.len() {
            match bytes[i] {
                b'\\' => i += 2,
                b'"' => return Some((start, i)),
                _ => i += 1,
            }
        }
        None
    } else {
        let start = rest;
        let mut i = start;
        while i < bytes.len() && !matches!(bytes[i], b',' | b'}' | b']') && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        (i > start).then_some((start, i))
    }
}

/// Token index range overlapping a character range of the concatenated text.
fn token_span_for_chars(tokens: &[TokenLogprob], chars: (usize, usize)) -> Option<[usize; 2]> {
    let (lo, hi) = chars;
    let mut offset = 0;
    let (mut first, mut last) = (None, None);
    for (i, t) in tokens.iter().enumerate() {
        let end = offset + t.token.len();
        if end > lo && offset < hi {
            first.get_or_insert(i);
            last = Some(i + 1);
        }
        offset = end;
    }
    Some([first?, last?])
}

fn key_span(record: &LlmResponseRecord, key: &str, text: &str) -> Option<[usize; 2]> {
    if let Some(spans) = &record.token_spans {
        return spans.get(key).copied();
    }
    token_span_for_chars(&record.token_logprobs, value_char_span(text, key)?)
}

/// Builds the 7-value feature vector: three per-value mean token
/// probabilities followed by a soft one-hot over the answer choices carrying
/// the verbalized confidence. Refusals and unparseable records map to zeros.
pub fn build_llm_features(record: &LlmResponseRecord, choices: &ChoiceSet) -> LlmFeatures {
    let letter = match &record.answer_letter {
        Some(serde_json::Value::String(s)) => s.clone(),
        _ => return LlmFeatures::refusal("missing answer_letter"),
    };
    let Some(choice) = choices.parse(&letter) else {
        return LlmFeatures::refusal(format!("unparseable answer letter {letter:?}"));
    };
    let confidence = match &record.confidence_in_answer_letter {
        Some(serde_json::Value::Number(n)) => n.as_f64(),
        Some(serde_json::Value::String(s)) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    let Some(confidence) = confidence.filter(|c| (0.0..=1.0).contains(c)) else {
        return LlmFeatures::refusal("missing or out-of-range confidence");
    };
    if !matches!(
        record.short_explanation_for_answer_confidence,
        Some(serde_json::Value::String(_))
    ) {
        return LlmFeatures::refusal("missing explanation");
    }
    let text: String = record.token_logprobs.iter().map(|t| t.token.as_str()).collect();
    let mut values = [0.0; FEATURE_DIM];
    for (slot, key) in FEATURE_KEYS.iter().enumerate() {
        let Some(mean) = key_span(record, key, &text).and_then(|s| mean_probability(&record.token_logprobs, s)) else {
            return LlmFeatures::refusal(format!("no token probabilities for {key}"));
        };
        values[slot] = mean;
    }
    values[3 + choice] = confidence;
    LlmFeatures {
        values,
        refusal: false,
        warning: None,
    }
}
