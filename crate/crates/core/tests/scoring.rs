mod common;

use curate_core::corpus::RenderedSample;
use curate_core::scoring::{self, ifd, score_samples, train_ngram, LogProbProvider, NGramLm, ScoreRecord, ScoreTable};
use curate_core::Result;
use proptest::prelude::*;

use common::{rel_err, toy_samples, NgramOracle as Oracle, START};

fn assert_matches_oracle(samples: &[RenderedSample], order: usize, k: f64) {
    let lm = train_ngram(samples, order, k).unwrap();
    let oracle = Oracle::new(samples, order, k);
    let table = score_samples(samples, &lm).unwrap();
    for s in samples {
        let r = &table[&s.id];
        let cond = oracle.ppl(&s.prompt_text, &s.response_text);
        let uncond = oracle.ppl("", &s.response_text);
        assert!(rel_err(r.ppl_cond, cond) < 1e-9, "id {}: {} vs {cond}", s.id, r.ppl_cond);
        assert!(rel_err(r.ppl_uncond, uncond) < 1e-9, "id {}: {} vs {uncond}", s.id, r.ppl_uncond);
        assert!(rel_err(r.ifd, cond / uncond) < 1e-9);
    }
}

#[test]
fn bigram_matches_brute_force_on_five_pairs() {
    assert_matches_oracle(&toy_samples(5), 2, 1.0);
}

#[test]
fn other_orders_match_brute_force() {
    let samples = toy_samples(12);
    for (order, k) in [(1, 1.0), (2, 0.1), (3, 0.5), (4, 2.0)] {
        assert_matches_oracle(&samples, order, k);
    }
}

#[test]
fn held_out_sentence_follows_chain_rule() {
    let samples = toy_samples(8);
    let lm = train_ngram(&samples, 2, 1.0).unwrap();
    let oracle = Oracle::new(&samples, 2, 1.0);
    let text = "def reverse ( s ) : return never-seen-token";
    let got = lm.score("", text).unwrap();
    let mut buf = vec![START.to_string()];
    for (lp, t) in got.iter().zip(text.split_whitespace()) {
        let want = oracle.prob(&buf[buf.len() - 1..], t).ln();
        assert!((lp - want).abs() < 1e-12);
        buf.push(t.to_string());
    }
}

/// Multiplies every conditional token probability by `c`.
struct Scaled<'a> {
    inner: &'a NGramLm,
    ln_c: f64,
}

impl LogProbProvider for Scaled<'_> {
    fn token_count(&self, text: &str) -> usize {
        self.inner.token_count(text)
    }

    fn score(&self, context: &str, target: &str) -> Result<Vec<f64>> {
        let lp = self.inner.score(context, target)?;
        if context.is_empty() {
            Ok(lp)
        } else {
            Ok(lp.into_iter().map(|v| v + self.ln_c).collect())
        }
    }
}

#[test]
fn scaling_conditional_probabilities_scales_ifd() {
    let samples = toy_samples(10);
    let lm = train_ngram(&samples, 2, 1.0).unwrap();
    for c in [1.0, 0.5, 0.01] {
        let scaled = Scaled { inner: &lm, ln_c: f64::ln(c) };
        for s in &samples {
            let base = ifd(s, &lm).unwrap();
            let r = ifd(s, &scaled).unwrap();
            assert!(rel_err(r.ppl_cond, base.ppl_cond / c) < 1e-9);
            assert!(rel_err(r.ifd, base.ifd / c) < 1e-9);
            assert_eq!(r.ppl_uncond, base.ppl_uncond);
        }
    }
}

#[test]
fn permuting_the_corpus_permutes_scores() {
    let samples = toy_samples(30);
    let mut reversed = samples.clone();
    reversed.reverse();
    let a = score_samples(&samples, &train_ngram(&samples, 2, 1.0).unwrap()).unwrap();
    let b = score_samples(&reversed, &train_ngram(&reversed, 2, 1.0).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exported_scores_reimport_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.jsonl");
    let table: ScoreTable = (0..100u64)
        .map(|id| {
            let cond = 1.0 + (id as f64 * 0.37).sin().abs() * 20.0;
            let uncond = 1.5 + (id as f64 * 0.11).cos().abs() * 9.0;
            (id, ScoreRecord::from_perplexities(id, cond, uncond).unwrap())
        })
        .collect();
    scoring::write_scores(&path, &table).unwrap();
    let ids: Vec<u64> = table.keys().copied().collect();
    assert_eq!(scoring::load_logprob_file(&path, &ids).unwrap(), table);
}

proptest! {
    #[test]
    fn distributions_normalize(seed_words in prop::collection::vec("[a-e]{1,2}", 1..40), order in 1usize..4, k in 0.05f64..3.0) {
        let words: Vec<&str> = seed_words.iter().map(String::as_str).collect();
        let half = words.len() / 2;
        let prompt = words[..half].join(" ");
        let response = words[half..].join(" ");
        let lm = NGramLm::train([(prompt.as_str(), response.as_str())], order, k).unwrap();
        for i in 0..words.len() {
            let hist = &words[i.saturating_sub(order)..i];
            let total: f64 = lm.distribution(hist).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        let lp = lm.score(&prompt, &response).unwrap();
        prop_assert_eq!(lp.len(), lm.token_count(&response));
        prop_assert!(lp.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn ifd_is_the_perplexity_ratio(cond in prop::collection::vec(-8.0f64..0.0, 1..30), shift in -2.0f64..2.0) {
        let uncond: Vec<f64> = cond.iter().map(|v| (v + shift).min(0.0)).collect();
        let r = ScoreRecord::from_logprobs(0, &cond, &uncond).unwrap();
        prop_assert!(r.ifd > 0.0);
        prop_assert!(rel_err(r.ifd, r.ppl_cond / r.ppl_uncond) < 1e-9);
        prop_assert_eq!(r.ifd == 1.0, r.ppl_cond == r.ppl_uncond);
    }
}
