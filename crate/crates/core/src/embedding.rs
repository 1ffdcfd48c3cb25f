//! Fixed-dimension unit-norm instruction vectors.
//!
//! The built-in embedder is signed feature-hashed TF-IDF over instruction text. Externally
//! computed vectors (for example from a sentence encoder) can be loaded instead.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::jsonl;

pub const MIN_HASHED_DIM: usize = 16;
const RENORMALIZE_TOLERANCE: f64 = 1e-4;

/// Row-major matrix of per-sample vectors keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f64>,
    zero_rows: Vec<bool>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from raw rows, rescaling each non-zero row to unit norm.
    pub fn from_rows(dim: usize, ids: Vec<u64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if ids.len() != rows.len() {
            return Err(Error::invalid("ids and rows differ in length"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        let mut zero_rows = Vec::with_capacity(ids.len());
        for (id, mut row) in ids.iter().zip(rows) {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: *id,
                    expected: dim,
                    got: row.len(),
                });
            }
            zero_rows.push(normalize(&mut row, 0.0));
            data.extend_from_slice(&row);
        }
        Ok(Self {
            dim,
            ids,
            data,
            zero_rows,
        })
    }

    /// Builds a matrix from raw coordinates without normalizing them. Useful for geometric
    /// inputs that are not embeddings of text.
    pub fn from_points(dim: usize, ids: Vec<u64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 || ids.len() != rows.len() {
            return Err(Error::invalid("points need a positive dimension and one id per row"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        let mut zero_rows = Vec::with_capacity(ids.len());
        for (id, row) in ids.iter().zip(rows) {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: *id,
                    expected: dim,
                    got: row.len(),
                });
            }
            zero_rows.push(row.iter().all(|v| *v == 0.0));
            data.extend_from_slice(&row);
        }
        Ok(Self {
            dim,
            ids,
            data,
            zero_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row_at(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn row(&self, id: u64) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.row_at(i))
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Whether the row is the all-zero vector (no usable tokens in the source text).
    pub fn is_zero_row(&self, index: usize) -> bool {
        self.zero_rows[index]
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows whose id satisfies `keep`, in the original order.
    pub fn filter(&self, keep: impl Fn(u64) -> bool) -> Self {
        let mut out = Self {
            dim: self.dim,
            ids: Vec::new(),
            data: Vec::new(),
            zero_rows: Vec::new(),
        };
        for (i, (id, row)) in self.rows().enumerate() {
            if keep(id) {
                out.ids.push(id);
                out.data.extend_from_slice(row);
                out.zero_rows.push(self.zero_rows[i]);
            }
        }
        out
    }
}

/// Scales `row` to unit norm when its norm is off by more than `tolerance`.
/// Returns true if the row is zero.
fn normalize(row: &mut [f64], tolerance: f64) -> bool {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        row.iter_mut().for_each(|v| *v = 0.0);
        return true;
    }
    if (norm - 1.0).abs() > tolerance {
        row.iter_mut().for_each(|v| *v /= norm);
    }
    false
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Terms used by the hashed embedder: whitespace tokens, lowercased, with leading and
/// trailing non-alphanumeric characters stripped. Tokens that strip to nothing are dropped.
pub fn embedding_terms(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// The text embedded for a pair: its instruction, followed by its input when present.
pub fn instruction_text(corpus: &Corpus, index: usize) -> String {
    let pair = &corpus.pairs()[index];
    match &pair.input {
        Some(input) => format!("{}\n{}", pair.instruction, input),
        None => pair.instruction.clone(),
    }
}

/// Seeded 64-bit FNV-1a with a splitmix64 finalizer.
pub fn seeded_hash(bytes: &[u8], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

const SIGN_SEED_SALT: u64 = 0x5bd1_e995_0000_0001;

/// `(bucket, sign)` for a term under `seed`. Bucket and sign come from independent hashes.
pub fn hash_feature(term: &str, dim: usize, seed: u64) -> (usize, f64) {
    let bucket = (seeded_hash(term.as_bytes(), seed) % dim as u64) as usize;
    let sign = if seeded_hash(term.as_bytes(), seed ^ SIGN_SEED_SALT) & 1 == 0 {
        1.0
    } else {
        -1.0
    };
    (bucket, sign)
}

/// Smoothed IDF: `ln((N + 1) / (df + 1)) + 1`.
pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((n_docs as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

/// Signed feature-hashed TF-IDF over instruction text, L2-normalized.
pub fn embed_hashed_tfidf(corpus: &Corpus, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if dim < MIN_HASHED_DIM {
        return Err(Error::invalid(format!(
            "hashed embedding dimension must be at least {MIN_HASHED_DIM}, got {dim}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("cannot embed an empty corpus"));
    }
    let docs: Vec<Vec<String>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| embedding_terms(&instruction_text(corpus, i)))
        .collect();

    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &docs {
        let uniq: HashSet<&str> = doc.iter().map(String::as_str).collect();
        for term in uniq {
            *df.entry(term).or_default() += 1;
        }
    }
    let n_docs = docs.len();

    let rows: Vec<(Vec<f64>, bool)> = docs
        .par_iter()
        .map(|doc| {
            let mut tf: Vec<(&str, usize)> = Vec::new();
            {
                let mut counts: HashMap<&str, usize> = HashMap::new();
                for t in doc {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
                tf.extend(counts);
            }
            // Fixed accumulation order keeps rows bit-identical across runs.
            tf.sort_unstable();
            let mut row = vec![0.0; dim];
            for (term, count) in tf {
                let (bucket, sign) = hash_feature(term, dim, seed);
                row[bucket] += sign * count as f64 * smoothed_idf(n_docs, df[term]);
            }
            let zero = normalize(&mut row, 0.0);
            (row, zero)
        })
        .collect();

    let mut data = Vec::with_capacity(n_docs * dim);
    let mut zero_rows = Vec::with_capacity(n_docs);
    for (row, zero) in rows {
        data.extend_from_slice(&row);
        zero_rows.push(zero);
    }
    let zeros = zero_rows.iter().filter(|z| **z).count();
    if zeros > 0 {
        log::warn!("{zeros} instructions produced no embedding terms; using zero vectors");
    }
    Ok(EmbeddingMatrix {
        dim,
        ids: corpus.ids(),
        data,
        zero_rows,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    id: u64,
    vector: Vec<f64>,
}

/// Loads `{"id", "vector"}` lines; rows come back in corpus order.
pub fn load_embeddings(path: &Path, corpus_ids: &[u64]) -> Result<EmbeddingMatrix> {
    let records = jsonl::read_records::<EmbeddingRecord>(path)?;
    let Some((_, first)) = records.first() else {
        return Err(Error::EmptyFile { path: path.into() });
    };
    let dim = first.vector.len();
    if dim == 0 {
        return Err(Error::invalid("embedding vectors must be non-empty"));
    }
    let wanted: HashSet<u64> = corpus_ids.iter().copied().collect();
    let mut by_id: HashMap<u64, Vec<f64>> = HashMap::with_capacity(records.len());
    let mut unknown = Vec::new();
    for (line, rec) in records {
        if rec.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                id: rec.id,
                expected: dim,
                got: rec.vector.len(),
            });
        }
        if !wanted.contains(&rec.id) {
            unknown.push(rec.id);
            continue;
        }
        if by_id.insert(rec.id, rec.vector).is_some() {
            return Err(Error::parse(path, line, format!("duplicate id {}", rec.id)));
        }
    }
    let missing: Vec<u64> = corpus_ids
        .iter()
        .copied()
        .filter(|id| !by_id.contains_key(id))
        .take(10)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    if !unknown.is_empty() {
        unknown.truncate(10);
        return Err(Error::UnknownIds(unknown));
    }

    let mut data = Vec::with_capacity(corpus_ids.len() * dim);
    let mut zero_rows = Vec::with_capacity(corpus_ids.len());
    for id in corpus_ids {
        let mut row = by_id.remove(id).expect("coverage checked");
        zero_rows.push(normalize(&mut row, RENORMALIZE_TOLERANCE));
        data.extend_from_slice(&row);
    }
    Ok(EmbeddingMatrix {
        dim,
        ids: corpus_ids.to_vec(),
        data,
        zero_rows,
    })
}

pub fn write_embeddings(path: &Path, emb: &EmbeddingMatrix) -> Result<()> {
    let records: Vec<EmbeddingRecord> = emb
        .rows()
        .map(|(id, row)| EmbeddingRecord {
            id,
            vector: row.to_vec(),
        })
        .collect();
    jsonl::write_plain(path, &records)
}
