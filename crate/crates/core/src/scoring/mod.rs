//! Perplexity and instruction-following difficulty (IFD).
//!
//! `PPL(a | q) = exp(-(1/N) * sum_j ln P(a_j | q, a_<j))` over the `N` response tokens, and
//! `IFD(a | q) = PPL(a | q) / PPL(a)`. A high IFD means the instruction does little to make the
//! response predictable. Only response tokens are scored; prompt tokens (template markers
//! included) serve as context.

mod ngram;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RenderedSample;
use crate::error::{Error, Result};
use crate::jsonl;

pub use ngram::{train_ngram, NGramLm};

/// Source of per-token natural-log probabilities.
pub trait LogProbProvider: Sync {
    /// The provider's own token count for `text`; `score` returns this many values.
    fn token_count(&self, text: &str) -> usize;

    /// Log-probabilities of each token of `target`, conditioned on `context` (may be empty).
    fn score(&self, context: &str, target: &str) -> Result<Vec<f64>>;
}

impl<P: LogProbProvider + ?Sized> LogProbProvider for &P {
    fn token_count(&self, text: &str) -> usize {
        (**self).token_count(text)
    }

    fn score(&self, context: &str, target: &str) -> Result<Vec<f64>> {
        (**self).score(context, target)
    }
}

/// Perplexity from per-token natural-log probabilities.
pub fn ppl(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::invalid("perplexity of an empty token sequence"));
    }
    if let Some(bad) = logprobs.iter().find(|v| !(**v <= 0.0)) {
        return Err(Error::invalid(format!("log-probability {bad} is not <= 0")));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: u64,
    pub ppl_cond: f64,
    pub ppl_uncond: f64,
    pub ifd: f64,
}

impl ScoreRecord {
    /// Builds a record, computing `ifd` as the perplexity ratio.
    pub fn from_perplexities(id: u64, ppl_cond: f64, ppl_uncond: f64) -> Result<Self> {
        for (name, v) in [("ppl_cond", ppl_cond), ("ppl_uncond", ppl_uncond)] {
            if !v.is_finite() {
                return Err(Error::Score {
                    id,
                    message: format!("{name} is not finite ({v})"),
                });
            }
            if v <= 0.0 {
                return Err(Error::Score {
                    id,
                    message: format!("{name} must be positive ({v})"),
                });
            }
        }
        let ifd = ppl_cond / ppl_uncond;
        if !ifd.is_finite() || ifd <= 0.0 {
            return Err(Error::Score {
                id,
                message: format!("ifd is not a positive finite number ({ifd})"),
            });
        }
        Ok(Self {
            id,
            ppl_cond,
            ppl_uncond,
            ifd,
        })
    }

    pub fn from_logprobs(id: u64, cond: &[f64], uncond: &[f64]) -> Result<Self> {
        let wrap = |e: Error| Error::Score {
            id,
            message: e.to_string(),
        };
        Self::from_perplexities(id, ppl(cond).map_err(wrap)?, ppl(uncond).map_err(wrap)?)
    }
}

/// Scores keyed by sample id.
pub type ScoreTable = BTreeMap<u64, ScoreRecord>;

pub fn ifd(sample: &RenderedSample, provider: &impl LogProbProvider) -> Result<ScoreRecord> {
    let expected = provider.token_count(&sample.response_text);
    let cond = provider.score(&sample.prompt_text, &sample.response_text)?;
    let uncond = provider.score("", &sample.response_text)?;
    for got in [cond.len(), uncond.len()] {
        if got != expected {
            return Err(Error::TokenCountMismatch {
                id: sample.id,
                expected,
                got,
            });
        }
    }
    ScoreRecord::from_logprobs(sample.id, &cond, &uncond)
}

/// Scores every sample in parallel; the result is keyed by id.
pub fn score_samples(samples: &[RenderedSample], provider: &impl LogProbProvider) -> Result<ScoreTable> {
    let records: Vec<ScoreRecord> = samples
        .par_iter()
        .map(|s| ifd(s, provider))
        .collect::<Result<_>>()?;
    Ok(records.into_iter().map(|r| (r.id, r)).collect())
}

pub fn write_scores(path: &Path, scores: &ScoreTable) -> Result<()> {
    jsonl::write_plain(path, scores.values())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ExternalScore {
    Perplexities {
        id: u64,
        ppl_cond: f64,
        ppl_uncond: f64,
    },
    LogProbs {
        id: u64,
        cond_logprobs: Vec<f64>,
        uncond_logprobs: Vec<f64>,
    },
}

/// Loads externally computed scores, either as two perplexities or as two log-probability
/// lists per record. Any `ifd` field present in the file is ignored and recomputed.
pub fn load_logprob_file(path: &Path, corpus_ids: &[u64]) -> Result<ScoreTable> {
    let wanted: HashSet<u64> = corpus_ids.iter().copied().collect();
    let mut out = ScoreTable::new();
    for (line, rec) in jsonl::read_records::<ExternalScore>(path)? {
        let rec = match rec {
            ExternalScore::Perplexities {
                id,
                ppl_cond,
                ppl_uncond,
            } => ScoreRecord::from_perplexities(id, ppl_cond, ppl_uncond),
            ExternalScore::LogProbs {
                id,
                cond_logprobs,
                uncond_logprobs,
            } => ScoreRecord::from_logprobs(id, &cond_logprobs, &uncond_logprobs),
        }
        .map_err(|e| Error::parse(path, line, e.to_string()))?;
        if !wanted.contains(&rec.id) {
            continue;
        }
        if out.insert(rec.id, rec).is_some() {
            return Err(Error::parse(path, line, format!("duplicate id {}", rec.id)));
        }
    }
    let missing: Vec<u64> = corpus_ids
        .iter()
        .copied()
        .filter(|id| !out.contains_key(id))
        .take(10)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    Ok(out)
}
