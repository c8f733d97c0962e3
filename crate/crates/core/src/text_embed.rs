//! Category feature embedding (KI-S): triples are rendered to sentences with
//! a fixed template and encoded into one unit vector per category.
//!
//! Two encoders are provided. [`HashEncoder`] is a deterministic bag-of-tokens
//! feature hasher that needs no model files. [`load_external_features`] reads
//! vectors produced out of process by a pretrained sentence encoder.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::kiemb::{EmbeddingFile, KiembError};
use crate::knowledge::{normalize_entity, Triple};
use crate::linalg;
use crate::scale::Scale;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("missing category {0:?}")]
    MissingCategory(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding file holds scale {found}, expected {expected}")]
    WrongScale { expected: Scale, found: Scale },
    #[error("hash dimension must be at least 8, got {0}")]
    DimTooSmall(usize),
    #[error(transparent)]
    Kiemb(#[from] KiembError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSet {
    pub category: String,
    pub sentences: Vec<String>,
}

impl SentenceSet {
    /// One sentence per triple, in triple order.
    pub fn from_triples(category: &str, triples: &[Triple]) -> Self {
        Self {
            category: normalize_entity(category),
            sentences: triples.iter().map(template_sentence).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFeature {
    pub category: String,
    pub vector: Vec<f32>,
    pub encoder_id: String,
}

/// `<subject> <relation with '/' as spaces> <object>.`
pub fn template_sentence(t: &Triple) -> String {
    format!("{} {} {}.", t.subject(), t.relation().replace('/', " "), t.object())
}

/// Lower-cased alphanumeric runs.
pub fn tokenize(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// FNV-1a over the seed and the token bytes, finished with a splitmix64 mix.
fn token_hash(token: &str, seed: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    crate::rng::splitmix64(h)
}

pub trait CategoryEncoder {
    fn encoder_id(&self) -> String;
    fn encode(&self, sentences: &SentenceSet) -> Result<CategoryFeature, EmbedError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim < 8 {
            return Err(EmbedError::DimTooSmall(dim));
        }
        Ok(Self { dim, seed })
    }
}

impl CategoryEncoder for HashEncoder {
    fn encoder_id(&self) -> String {
        format!("hash-{}-{}", self.dim, self.seed)
    }

    fn encode(&self, sentences: &SentenceSet) -> Result<CategoryFeature, EmbedError> {
        hash_encode(sentences, self.dim, self.seed)
    }
}

/// Signed feature hashing of each sentence, averaged over sentences and
/// L2-normalized. The empty set encodes to the zero vector.
pub fn hash_encode(sentences: &SentenceSet, dim: usize, seed: u64) -> Result<CategoryFeature, EmbedError> {
    if dim < 8 {
        return Err(EmbedError::DimTooSmall(dim));
    }
    let mut acc = vec![0f64; dim];
    for s in &sentences.sentences {
        for tok in tokenize(s) {
            let h = token_hash(&tok, seed);
            let idx = (h % dim as u64) as usize;
            acc[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
    }
    if !sentences.sentences.is_empty() {
        let n = sentences.sentences.len() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Ok(CategoryFeature {
        category: sentences.category.clone(),
        vector: linalg::normalized_f32(&acc),
        encoder_id: format!("hash-{dim}-{seed}"),
    })
}

/// Reads KI-S vectors written by an external encoder. Every expected
/// category must be present; vectors are re-normalized on load.
pub fn load_external_features(
    path: &Path,
    expected_categories: &[String],
    expected_dim: Option<usize>,
) -> Result<Vec<CategoryFeature>, EmbedError> {
    let file = EmbeddingFile::read(path)?;
    features_from_file(&file, expected_categories, expected_dim)
}

pub fn features_from_file(
    file: &EmbeddingFile,
    expected_categories: &[String],
    expected_dim: Option<usize>,
) -> Result<Vec<CategoryFeature>, EmbedError> {
    if let Some(expected) = expected_dim {
        if expected != file.dim {
            return Err(EmbedError::DimensionMismatch { expected, found: file.dim });
        }
    }
    let encoder_id = format!("kiemb-{}", file.scale.tag());
    expected_categories
        .iter()
        .map(|c| {
            let name = normalize_entity(c);
            let v = file.get(&name).ok_or_else(|| EmbedError::MissingCategory(name.clone()))?;
            let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            Ok(CategoryFeature {
                category: name,
                vector: linalg::normalized_f32(&v),
                encoder_id: encoder_id.clone(),
            })
        })
        .collect()
}

pub fn features_to_file(scale: Scale, features: &[CategoryFeature]) -> Result<EmbeddingFile, EmbedError> {
    let dim = features.first().map_or(0, |f| f.vector.len());
    let mut file = EmbeddingFile::new(scale, dim);
    for f in features {
        if f.vector.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                found: f.vector.len(),
            });
        }
        file.rows.push((f.category.clone(), f.vector.clone()));
    }
    Ok(file)
}

/// `{ "<category>": ["sentence", ...] }`, the input of the external exporter.
pub fn sentence_sets_to_json(sets: &[SentenceSet]) -> serde_json::Value {
    let map: BTreeMap<&str, &Vec<String>> = sets.iter().map(|s| (s.category.as_str(), &s.sentences)).collect();
    serde_json::to_value(map).expect("string map serializes")
}
