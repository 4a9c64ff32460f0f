//! Token embedders standing in for a fine-tuned small language model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub(crate) fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Deterministic per-token vectors: FNV-1a of `(seed, token)` seeds a ChaCha
/// stream that yields `dim` uniform values in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn vector(&self, token: &str) -> Vec<f64> {
        let h = fnv1a64(&[&self.seed.to_le_bytes(), token.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..self.dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
    }
}

/// Trainable lookup table over a corpus vocabulary. Rows start at the hash
/// vectors; tokens outside the vocabulary fall back to the hash embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTable {
    pub vocab: BTreeMap<String, usize>,
    pub weights: Matrix,
    pub fallback: HashEmbedder,
}

impl TokenTable {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>, hash: HashEmbedder) -> Self {
        let mut vocab = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t) {
                let next = vocab.len();
                vocab.entry(tok).or_insert(next);
            }
        }
        let mut weights = Matrix::zeros(vocab.len(), hash.dim);
        for (tok, &i) in &vocab {
            weights.row_mut(i).copy_from_slice(&hash.vector(tok));
        }
        Self {
            vocab,
            weights,
            fallback: hash,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Embedder {
    Hash(HashEmbedder),
    Table(TokenTable),
}

impl Embedder {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Hash(h) => h.dim,
            Embedder::Table(t) => t.fallback.dim,
        }
    }

    /// Trainable weights, if any.
    pub fn weights(&self) -> Option<&Matrix> {
        match self {
            Embedder::Hash(_) => None,
            Embedder::Table(t) => Some(&t.weights),
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Matrix> {
        match self {
            Embedder::Hash(_) => None,
            Embedder::Table(t) => Some(&mut t.weights),
        }
    }
}

/// `m x d` token embeddings plus the table row behind each token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingMatrix {
    pub data: Matrix,
    pub table_rows: Vec<Option<usize>>,
}

impl TokenEmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }
}

pub fn embed_tokens(text: &str, embedder: &Embedder, dim: usize) -> Result<TokenEmbeddingMatrix> {
    if embedder.dim() != dim {
        return Err(Error::shape("embed_tokens dim", dim, embedder.dim()));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::invalid("cannot embed empty text"));
    }
    let mut data = Matrix::zeros(tokens.len(), dim);
    let mut table_rows = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        match embedder {
            Embedder::Hash(h) => {
                data.row_mut(i).copy_from_slice(&h.vector(tok));
                table_rows.push(None);
            }
            Embedder::Table(t) => match t.vocab.get(tok) {
                Some(&r) => {
                    data.row_mut(i).copy_from_slice(t.weights.row(r));
                    table_rows.push(Some(r));
                }
                None => {
                    data.row_mut(i).copy_from_slice(&t.fallback.vector(tok));
                    table_rows.push(None);
                }
            },
        }
    }
    Ok(TokenEmbeddingMatrix { data, table_rows })
}
