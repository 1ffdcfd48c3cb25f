#![allow(dead_code)]

use std::path::PathBuf;

use curate_core::corpus::{self, Corpus, PromptTemplate, RenderedSample, Schema, Tokenizer};

pub fn toy_corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy_corpus.jsonl")
}

pub fn toy_corpus() -> Corpus {
    corpus::load_dataset(&toy_corpus_path(), Schema::Alpaca).unwrap()
}

/// The first `n` toy samples rendered with the default template and whitespace tokens.
pub fn toy_samples(n: usize) -> Vec<RenderedSample> {
    let c = toy_corpus();
    let take: std::collections::HashSet<u64> = c.ids().into_iter().take(n).collect();
    corpus::render_corpus(&c.subset(&take), &PromptTemplate::default(), &Tokenizer::Whitespace).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub const START: &str = "\u{0}<s>";
pub const UNKNOWN: &str = "\u{0}<unk>";

/// Brute-force add-k n-gram model: every probability is counted by scanning the raw streams.
pub struct NgramOracle {
    order: usize,
    k: f64,
    streams: Vec<Vec<String>>,
    vocab: Vec<String>,
}

impl NgramOracle {
    pub fn new(samples: &[RenderedSample], order: usize, k: f64) -> Self {
        let mut streams = Vec::new();
        let mut vocab: Vec<String> = Vec::new();
        for s in samples {
            let mut st: Vec<String> = vec![START.to_string(); order - 1];
            for t in s.prompt_text.split_whitespace().chain(s.response_text.split_whitespace()) {
                if !vocab.iter().any(|v| v == t) {
                    vocab.push(t.to_string());
                }
                st.push(t.to_string());
            }
            streams.push(st);
        }
        Self { order, k, streams, vocab }
    }

    fn map(&self, t: &str) -> String {
        if t == START || self.vocab.iter().any(|v| v == t) {
            t.to_string()
        } else {
            UNKNOWN.to_string()
        }
    }

    pub fn prob(&self, hist: &[String], tok: &str) -> f64 {
        let ctx = self.order - 1;
        let hist: Vec<String> = hist.iter().map(|t| self.map(t)).collect();
        let tok = self.map(tok);
        let (mut c_h, mut c_hw) = (0u64, 0u64);
        for st in &self.streams {
            for p in ctx..st.len() {
                if st[p - ctx..p] == hist[..] {
                    c_h += 1;
                    if st[p] == tok {
                        c_hw += 1;
                    }
                }
            }
        }
        (c_hw as f64 + self.k) / (c_h as f64 + self.k * (self.vocab.len() as f64 + 1.0))
    }

    /// Chain-rule perplexity of `target` after `context`.
    pub fn ppl(&self, context: &str, target: &str) -> f64 {
        let ctx = self.order - 1;
        let mut buf: Vec<String> = vec![START.to_string(); ctx];
        buf.extend(context.split_whitespace().map(String::from));
        let mut log_sum = 0.0;
        let mut n = 0;
        for t in target.split_whitespace() {
            let h = buf[buf.len() - ctx..].to_vec();
            log_sum += self.prob(&h, t).ln();
            buf.push(t.to_string());
            n += 1;
        }
        (-log_sum / n as f64).exp()
    }
}
