//! Pipeline configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{PromptTemplate, Schema, TokenizerKind, TokenizerSpec};
use crate::embedding::MIN_HASHED_DIM;
use crate::error::{Error, Result};
use crate::packing::PackStrategy;
use crate::selection::{Strategy, DEFAULT_M_PERCENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    #[default]
    Builtin,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub source: EmbeddingSource,
    pub dim: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            source: EmbeddingSource::Builtin,
            dim: 256,
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    /// Defaults to `max(2, round(sqrt(n / 2)))` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreProvider {
    #[default]
    Ngram,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub provider: ScoreProvider,
    pub order: usize,
    pub add_k: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Samples whose IFD exceeds this are removed from the selection pool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_ifd_above: Option<f64>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            provider: ScoreProvider::Ngram,
            order: 2,
            add_k: 1.0,
            path: None,
            drop_ifd_above: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub m_percent: f64,
    pub seed: u64,
    /// Graph Density neighbourhood size.
    pub knn: usize,
    /// Graph Density kernel width; `1 / dim` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Cdas,
            m_percent: DEFAULT_M_PERCENT,
            seed: 0,
            knn: 10,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackingConfig {
    pub strategy: PackStrategy,
    pub max_len: usize,
    pub batch_size: usize,
    pub separator_cost: usize,
    pub global: bool,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            strategy: PackStrategy::DynamicPack,
            max_len: 4096,
            batch_size: 512,
            separator_cost: 1,
            global: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_path: PathBuf,
    #[serde(default)]
    pub schema: Schema,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub packing: PackingConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("curate-out")
}

impl PipelineConfig {
    /// All defaults for `dataset_path`.
    pub fn for_dataset(dataset_path: impl Into<PathBuf>) -> Self {
        Self {
            dataset_path: dataset_path.into(),
            schema: Schema::default(),
            output_dir: default_output_dir(),
            template: PromptTemplate::default(),
            tokenizer: TokenizerSpec::default(),
            embedding: EmbeddingConfig::default(),
            clustering: ClusteringConfig::default(),
            scoring: ScoringConfig::default(),
            selection: SelectionConfig::default(),
            packing: PackingConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Applies one seed to embedding, clustering and selection.
    pub fn set_seed(&mut self, seed: u64) {
        self.embedding.seed = seed;
        self.clustering.seed = seed;
        self.selection.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.template.validate()?;
        if self.tokenizer.kind == TokenizerKind::ExternalCounts && self.tokenizer.external_path.is_none() {
            return bad("tokenizer.external_path is required for external-counts".into());
        }
        let e = &self.embedding;
        match e.source {
            EmbeddingSource::Builtin if e.dim < MIN_HASHED_DIM => {
                return bad(format!("embedding.dim must be at least {MIN_HASHED_DIM}"));
            }
            EmbeddingSource::File if e.path.is_none() => {
                return bad("embedding.path is required when source = \"file\"".into());
            }
            _ => {}
        }
        let c = &self.clustering;
        if c.k == Some(0) {
            return bad("clustering.k must be at least 1".into());
        }
        if c.max_iters < 1 {
            return bad("clustering.max_iters must be at least 1".into());
        }
        if !(c.tol >= 0.0 && c.tol.is_finite()) {
            return bad("clustering.tol must be a non-negative number".into());
        }
        let s = &self.scoring;
        if s.provider == ScoreProvider::File && s.path.is_none() {
            return bad("scoring.path is required when provider = \"file\"".into());
        }
        if s.order < 1 {
            return bad("scoring.order must be at least 1".into());
        }
        if !(s.add_k > 0.0 && s.add_k.is_finite()) {
            return bad("scoring.add_k must be positive".into());
        }
        if let Some(t) = s.drop_ifd_above {
            if !(t > 0.0 && t.is_finite()) {
                return bad("scoring.drop_ifd_above must be positive".into());
            }
        }
        let sel = &self.selection;
        if !(sel.m_percent > 0.0 && sel.m_percent <= 100.0) {
            return bad(format!("selection.m_percent must be in (0, 100], got {}", sel.m_percent));
        }
        if sel.knn < 1 {
            return bad("selection.knn must be at least 1".into());
        }
        if let Some(g) = sel.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return bad("selection.gamma must be positive".into());
            }
        }
        let p = &self.packing;
        if p.max_len < 1 || p.batch_size < 1 {
            return bad("packing.max_len and packing.batch_size must be at least 1".into());
        }
        Ok(())
    }
}
