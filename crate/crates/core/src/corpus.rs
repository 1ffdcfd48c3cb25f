//! Instruction datasets: loading, prompt rendering, token counting and length statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// One `(instruction, optional input, response)` training record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub id: u64,
    pub instruction: String,
    pub input: Option<String>,
    pub response: String,
}

/// An ordered collection of pairs with strictly increasing ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pairs: Vec<InstructionPair>,
}

impl Corpus {
    /// Builds a corpus, checking the same invariants as [`load_dataset`].
    pub fn new(pairs: Vec<InstructionPair>) -> Result<Self> {
        for (idx, pair) in pairs.iter().enumerate() {
            check_pair(pair).map_err(|message| Error::Record {
                line: idx + 1,
                message,
            })?;
            if idx > 0 && pairs[idx - 1].id >= pair.id {
                return Err(Error::Record {
                    line: idx + 1,
                    message: format!("id {} does not increase over {}", pair.id, pairs[idx - 1].id),
                });
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[InstructionPair] {
        &self.pairs
    }

    pub fn ids(&self) -> Vec<u64> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&InstructionPair> {
        self.pairs
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|idx| &self.pairs[idx])
    }

    /// Keeps only the pairs whose id is in `ids`, preserving file order.
    pub fn subset(&self, ids: &HashSet<u64>) -> Corpus {
        Corpus {
            pairs: self
                .pairs
                .iter()
                .filter(|p| ids.contains(&p.id))
                .cloned()
                .collect(),
        }
    }

    fn ids_are_dense(&self) -> bool {
        self.pairs.iter().enumerate().all(|(i, p)| p.id == i as u64)
    }
}

fn check_pair(pair: &InstructionPair) -> std::result::Result<(), String> {
    if pair.instruction.trim().is_empty() {
        return Err("empty instruction".into());
    }
    if pair.response.trim().is_empty() {
        return Err("empty response".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schema {
    /// `{"instruction", "input", "output"}`
    #[default]
    Alpaca,
    /// `{"id"?, "prompt", "response"}`
    PromptResponse,
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpaca" => Ok(Schema::Alpaca),
            "prompt-response" => Ok(Schema::PromptResponse),
            other => Err(Error::invalid(format!("unknown schema `{other}`"))),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Alpaca => "alpaca",
            Schema::PromptResponse => "prompt-response",
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AlpacaRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    instruction: String,
    #[serde(default)]
    input: String,
    output: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptResponseRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    prompt: String,
    response: String,
}

/// Loads one record per line. Missing ids default to the 0-based record index.
pub fn load_dataset(path: &Path, schema: Schema) -> Result<Corpus> {
    let lines = jsonl::read_lines(path)?;
    if lines.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    let mut pairs: Vec<InstructionPair> = Vec::with_capacity(lines.len());
    let mut seen = HashSet::with_capacity(lines.len());
    for (index, (line, text)) in lines.iter().enumerate() {
        let parse_err = |e: serde_json::Error| Error::parse(path, *line, e.to_string());
        let pair = match schema {
            Schema::Alpaca => {
                let rec: AlpacaRecord = serde_json::from_str(text).map_err(parse_err)?;
                InstructionPair {
                    id: rec.id.unwrap_or(index as u64),
                    instruction: rec.instruction,
                    input: Some(rec.input).filter(|s| !s.is_empty()),
                    response: rec.output,
                }
            }
            Schema::PromptResponse => {
                let rec: PromptResponseRecord = serde_json::from_str(text).map_err(parse_err)?;
                InstructionPair {
                    id: rec.id.unwrap_or(index as u64),
                    instruction: rec.prompt,
                    input: None,
                    response: rec.response,
                }
            }
        };
        check_pair(&pair).map_err(|message| Error::Record {
            line: *line,
            message,
        })?;
        if !seen.insert(pair.id) {
            return Err(Error::Record {
                line: *line,
                message: format!("duplicate id {}", pair.id),
            });
        }
        if let Some(prev) = pairs.last() {
            if prev.id > pair.id {
                return Err(Error::Record {
                    line: *line,
                    message: format!("id {} does not increase over {}", pair.id, prev.id),
                });
            }
        }
        pairs.push(pair);
    }
    log::debug!("loaded {} records from {}", pairs.len(), path.display());
    Ok(Corpus { pairs })
}

/// Writes the corpus back in `schema`. Ids are emitted only when they differ from file order.
pub fn write_dataset(path: &Path, corpus: &Corpus, schema: Schema) -> Result<()> {
    let with_ids = !corpus.ids_are_dense();
    let lines: Vec<serde_json::Value> = corpus
        .pairs
        .iter()
        .map(|p| {
            let id = with_ids.then_some(p.id);
            match schema {
                Schema::Alpaca => serde_json::to_value(AlpacaRecord {
                    id,
                    instruction: p.instruction.clone(),
                    input: p.input.clone().unwrap_or_default(),
                    output: p.response.clone(),
                }),
                Schema::PromptResponse => serde_json::to_value(PromptResponseRecord {
                    id,
                    prompt: p.instruction.clone(),
                    response: p.response.clone(),
                }),
            }
            .expect("plain records serialize")
        })
        .collect();
    jsonl::write_plain(path, &lines)
}

/// Maps `(instruction, input)` to the complete prompt text.
///
/// `template` must contain `{instruction}` and may contain `{input_section}`, which expands to
/// `input_section` (with `{input}` substituted) when the pair has an input and to nothing
/// otherwise. Any other brace text is left untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub template: String,
    pub input_section: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            template: "### Instruction:\n{instruction}\n\n{input_section}### Response:\n".into(),
            input_section: "### Input:\n{input}\n\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>, input_section: impl Into<String>) -> Result<Self> {
        let t = Self {
            template: template.into(),
            input_section: input_section.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.template.contains("{instruction}") {
            return Err(Error::invalid("prompt template lacks the `{instruction}` placeholder"));
        }
        Ok(())
    }

    pub fn render(&self, instruction: &str, input: Option<&str>) -> Result<String> {
        self.validate()?;
        let section = match input {
            Some(input) => substitute(&self.input_section, &[("input", input)]),
            None => String::new(),
        };
        Ok(substitute(
            &self.template,
            &[("instruction", instruction), ("input_section", &section)],
        ))
    }
}

/// Single-pass placeholder expansion, so substituted text is never re-scanned.
fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Byte,
    ExternalCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_path: Option<PathBuf>,
}

impl TokenizerSpec {
    pub fn build(&self) -> Result<Tokenizer> {
        match self.kind {
            TokenizerKind::Whitespace => Ok(Tokenizer::Whitespace),
            TokenizerKind::Byte => Ok(Tokenizer::Byte),
            TokenizerKind::ExternalCounts => {
                let path = self.external_path.as_deref().ok_or_else(|| {
                    Error::Config("external-counts tokenizer requires external_path".into())
                })?;
                Ok(Tokenizer::External(ExternalCounts::load(path)?))
            }
        }
    }
}

/// Precomputed `(prompt_tokens, response_tokens)` per sample id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExternalCounts(HashMap<u64, (usize, usize)>);

#[derive(Debug, Serialize, Deserialize)]
struct CountRecord {
    id: u64,
    prompt_tokens: usize,
    response_tokens: usize,
}

impl ExternalCounts {
    pub fn load(path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        for (line, rec) in jsonl::read_records::<CountRecord>(path)? {
            if map.insert(rec.id, (rec.prompt_tokens, rec.response_tokens)).is_some() {
                return Err(Error::parse(path, line, format!("duplicate id {}", rec.id)));
            }
        }
        Ok(Self(map))
    }

    pub fn from_map(map: HashMap<u64, (usize, usize)>) -> Self {
        Self(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tokenizer {
    /// Unicode-whitespace splitting.
    Whitespace,
    /// One token per UTF-8 byte.
    Byte,
    External(ExternalCounts),
}

impl Tokenizer {
    /// Token counts of a sample's prompt and response.
    pub fn counts(&self, id: u64, prompt: &str, response: &str) -> Result<(usize, usize)> {
        match self {
            Tokenizer::Whitespace => Ok((
                prompt.split_whitespace().count(),
                response.split_whitespace().count(),
            )),
            Tokenizer::Byte => Ok((prompt.len(), response.len())),
            Tokenizer::External(counts) => counts
                .0
                .get(&id)
                .copied()
                .ok_or_else(|| Error::MissingIds(vec![id])),
        }
    }
}

/// A pair after prompt rendering and token counting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub id: u64,
    pub prompt_text: String,
    pub response_text: String,
    pub prompt_tokens: usize,
    pub response_tokens: usize,
    pub total_tokens: usize,
}

pub fn render_prompt(
    pair: &InstructionPair,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
) -> Result<RenderedSample> {
    let prompt_text = template.render(&pair.instruction, pair.input.as_deref())?;
    let (prompt_tokens, response_tokens) = tokenizer.counts(pair.id, &prompt_text, &pair.response)?;
    if prompt_tokens == 0 || response_tokens == 0 {
        return Err(Error::Score {
            id: pair.id,
            message: "prompt and response must each have at least one token".into(),
        });
    }
    Ok(RenderedSample {
        id: pair.id,
        prompt_text,
        response_text: pair.response.clone(),
        prompt_tokens,
        response_tokens,
        total_tokens: prompt_tokens + response_tokens,
    })
}

/// Renders every pair; output order equals corpus order.
pub fn render_corpus(
    corpus: &Corpus,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
) -> Result<Vec<RenderedSample>> {
    template.validate()?;
    if let Tokenizer::External(counts) = tokenizer {
        let missing: Vec<u64> = corpus
            .pairs
            .iter()
            .map(|p| p.id)
            .filter(|id| !counts.0.contains_key(id))
            .take(10)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
    }
    corpus
        .pairs
        .par_iter()
        .map(|p| render_prompt(p, template, tokenizer))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: usize,
    /// `bins[i]` counts lengths in `[i * bin_width, (i + 1) * bin_width)`.
    pub bins: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub total_tokens: u64,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub p50: usize,
    pub p90: usize,
    pub p99: usize,
    pub histogram: Histogram,
}

pub const DEFAULT_HISTOGRAM_BIN_WIDTH: usize = 64;

/// Length statistics over `total_tokens`. Percentiles use the nearest-rank definition.
pub fn corpus_stats(samples: &[RenderedSample], bin_width: usize) -> Result<LengthStats> {
    length_stats(samples.iter().map(|s| s.total_tokens), bin_width)
}

pub fn length_stats(lengths: impl IntoIterator<Item = usize>, bin_width: usize) -> Result<LengthStats> {
    if bin_width == 0 {
        return Err(Error::invalid("histogram bin width must be positive"));
    }
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut total: u64 = 0;
    let mut n = 0usize;
    for len in lengths {
        *counts.entry(len).or_default() += 1;
        total += len as u64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("length statistics of an empty corpus"));
    }
    let min = *counts.keys().next().unwrap();
    let max = *counts.keys().next_back().unwrap();

    let rank_of = |p: f64| ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    let percentile = |rank: usize| {
        let mut seen = 0u64;
        for (&len, &c) in &counts {
            seen += c;
            if seen >= rank as u64 {
                return len;
            }
        }
        max
    };

    let mut bins = vec![0u64; max / bin_width + 1];
    for (&len, &c) in &counts {
        bins[len / bin_width] += c;
    }
    Ok(LengthStats {
        count: n,
        total_tokens: total,
        min,
        max,
        mean: total as f64 / n as f64,
        p50: percentile(rank_of(50.0)),
        p90: percentile(rank_of(90.0)),
        p99: percentile(rank_of(99.0)),
        histogram: Histogram { bin_width, bins },
    })
}
