//! Vocabulary construction, MLM masking, and data ingestion.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

mod io;
pub mod synth;

pub use io::{
    load_labeled, load_pairs, load_triplets, write_labeled, write_pairs, write_triplets,
};
pub use synth::{gen_style_corpus, Style, SynthCorpus};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const CLS: u32 = 3;
pub const SEP: u32 = 4;

const RESERVED: [&str; 5] = ["<pad>", "<mask>", "<unk>", "<cls>", "<sep>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown style '{0}' (valid: uppercase, emoji, misspell, contraction)")]
    UnknownStyle(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Pos,
    Neg,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    #[serde(default)]
    pub style: Option<String>,
    #[serde(default)]
    pub polarity: Option<Polarity>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub style: String,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuthorPair {
    pub a: String,
    pub b: String,
    pub same: bool,
}

/// Word-level vocabulary with fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Keep the most frequent whitespace-split tokens (case preserved).
    /// Ties break lexicographically; deterministic for identical input order.
    pub fn build(texts: &[String], max_size: usize) -> Result<Vocab> {
        if max_size < 6 {
            return Err(CorpusError::InvalidArgument(format!(
                "max_size must be >= 6, got {max_size}"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Vocab::from_tokens(id_to_token))
    }

    /// Rebuild from a full id -> token list (reserved ids first).
    pub fn from_tokens(id_to_token: Vec<String>) -> Vocab {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Whitespace-split encode; unknown tokens map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }
}

/// One masked batch: inputs with masking applied, per-position recovery
/// targets (None where unmasked), and the flat list of masked coordinates.
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    pub masked: Vec<Vec<u32>>,
    pub targets: Vec<Vec<Option<u32>>>,
    pub positions: Vec<(usize, usize)>,
}

/// BERT-style masking: each non-PAD position is selected independently with
/// probability `mask_rate`; of the selected, 80% become MASK, 10% a random
/// non-reserved token, 10% stay unchanged. Deterministic under `rng_seed`.
pub fn mask_batch(
    token_ids: &[Vec<u32>],
    vocab_size: usize,
    mask_rate: f64,
    rng_seed: u64,
) -> Result<MaskedBatch> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(CorpusError::InvalidArgument(format!(
            "mask_rate must be in (0, 1), got {mask_rate}"
        )));
    }
    if vocab_size <= RESERVED.len() {
        return Err(CorpusError::InvalidArgument(format!(
            "vocab_size must exceed {} reserved ids",
            RESERVED.len()
        )));
    }
    if token_ids.is_empty() || token_ids.iter().any(|row| row.iter().all(|&t| t == PAD)) {
        return Err(CorpusError::InvalidArgument("batch contains an all-PAD row".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut masked = Vec::with_capacity(token_ids.len());
    let mut targets = Vec::with_capacity(token_ids.len());
    let mut positions = Vec::new();
    for (r, row) in token_ids.iter().enumerate() {
        let mut mrow = row.clone();
        let mut trow = vec![None; row.len()];
        for (c, &tok) in row.iter().enumerate() {
            if tok == PAD {
                continue;
            }
            if rng.random::<f64>() < mask_rate {
                trow[c] = Some(tok);
                positions.push((r, c));
                let roll: f64 = rng.random();
                if roll < 0.8 {
                    mrow[c] = MASK;
                } else if roll < 0.9 {
                    mrow[c] = rng.random_range(RESERVED.len() as u32..vocab_size as u32);
                } // else unchanged
            }
        }
        masked.push(mrow);
        targets.push(trow);
    }
    Ok(MaskedBatch { masked, targets, positions })
}
