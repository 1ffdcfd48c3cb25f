//! Add-k smoothed n-gram language model over whitespace tokens.
//!
//! Each training sample contributes the stream `BOS^(order-1) prompt response`. Tokens never
//! seen in training map to a single unknown symbol, which takes part in normalization, so
//! `P(w | h) = (c(h, w) + k) / (c(h) + k * (V + 1))` sums to one over the vocabulary plus the
//! unknown symbol for every history `h`.

use std::collections::HashMap;

use super::LogProbProvider;
use crate::corpus::RenderedSample;
use crate::error::{Error, Result};

const BOS: u32 = 0;
const UNK: u32 = 1;
const FIRST_WORD: u32 = 2;

#[derive(Debug, Clone, Default)]
struct HistoryCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone)]
pub struct NGramLm {
    order: usize,
    add_k: f64,
    vocab: HashMap<String, u32>,
    counts: HashMap<Box<[u32]>, HistoryCounts>,
}

pub fn train_ngram(samples: &[RenderedSample], order: usize, add_k: f64) -> Result<NGramLm> {
    NGramLm::train(
        samples
            .iter()
            .map(|s| (s.prompt_text.as_str(), s.response_text.as_str())),
        order,
        add_k,
    )
}

impl NGramLm {
    /// Trains on `(prompt, response)` pairs.
    pub fn train<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        order: usize,
        add_k: f64,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if !(add_k > 0.0) || !add_k.is_finite() {
            return Err(Error::invalid("add_k must be positive"));
        }
        let mut lm = Self {
            order,
            add_k,
            vocab: HashMap::new(),
            counts: HashMap::new(),
        };
        let mut streams = 0usize;
        let ctx = order - 1;
        for (prompt, response) in pairs {
            streams += 1;
            let mut stream: Vec<u32> = vec![BOS; ctx];
            for tok in prompt.split_whitespace().chain(response.split_whitespace()) {
                let next = FIRST_WORD + lm.vocab.len() as u32;
                stream.push(*lm.vocab.entry(tok.to_owned()).or_insert(next));
            }
            for pos in ctx..stream.len() {
                let hist: Box<[u32]> = stream[pos - ctx..pos].into();
                let entry = lm.counts.entry(hist).or_default();
                entry.total += 1;
                *entry.next.entry(stream[pos]).or_default() += 1;
            }
        }
        if streams == 0 {
            return Err(Error::invalid("cannot train an n-gram model on an empty corpus"));
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Number of distinct training tokens (the unknown symbol not included).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn token_id(&self, tok: &str) -> u32 {
        self.vocab.get(tok).copied().unwrap_or(UNK)
    }

    fn prob_ids(&self, history: &[u32], token: u32) -> f64 {
        let denom_extra = self.add_k * (self.vocab.len() as f64 + 1.0);
        match self.counts.get(history) {
            Some(h) => {
                let c = h.next.get(&token).copied().unwrap_or(0) as f64;
                (c + self.add_k) / (h.total as f64 + denom_extra)
            }
            None => self.add_k / denom_extra,
        }
    }

    fn history_ids(&self, history: &[&str]) -> Vec<u32> {
        let ctx = self.order - 1;
        let mut h: Vec<u32> = vec![BOS; ctx.saturating_sub(history.len())];
        h.extend(
            history[history.len().saturating_sub(ctx)..]
                .iter()
                .map(|t| self.token_id(t)),
        );
        h
    }

    /// `P(token | history)` where `history` holds the preceding tokens (most recent last).
    /// Histories shorter than `order - 1` are left-padded with the start symbol.
    pub fn prob(&self, history: &[&str], token: &str) -> f64 {
        self.prob_ids(&self.history_ids(history), self.token_id(token))
    }

    /// Probabilities of every known token, then the unknown symbol, after `history`.
    pub fn distribution(&self, history: &[&str]) -> Vec<f64> {
        let h = self.history_ids(history);
        let mut ids: Vec<u32> = self.vocab.values().copied().collect();
        ids.sort_unstable();
        ids.push(UNK);
        ids.into_iter().map(|id| self.prob_ids(&h, id)).collect()
    }
}

impl LogProbProvider for NGramLm {
    fn token_count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn score(&self, context: &str, target: &str) -> Result<Vec<f64>> {
        let ctx = self.order - 1;
        let mut buf: Vec<u32> = vec![BOS; ctx];
        buf.extend(context.split_whitespace().map(|t| self.token_id(t)));
        let mut out = Vec::new();
        for tok in target.split_whitespace() {
            let id = self.token_id(tok);
            let hist = &buf[buf.len() - ctx..];
            out.push(self.prob_ids(hist, id).ln());
            buf.push(id);
        }
        Ok(out)
    }
}
