//! Stage orchestration over an artifact directory.
//!
//! Each stage reads only the configuration and files written by earlier stages, so any stage
//! can be re-run on its own or replaced by an external tool that writes the same file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::{self, default_k, ClusterModel, GraphDensityParams, KMeansParams};
use crate::config::{EmbeddingSource, PipelineConfig, ScoreProvider};
use crate::corpus::{self, LengthStats, RenderedSample, DEFAULT_HISTOGRAM_BIN_WIDTH};
use crate::embedding::{self, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::packing::{self, EfficiencyReport, PackItem, PackStrategy};
use crate::scoring::{self, ScoreRecord, ScoreTable};
use crate::selection::{self, SelectionResult, Strategy};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.jsonl";
pub const CENTROIDS_FILE: &str = "centroids.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const SELECTION_FILE: &str = "selection.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const METADATA_FILE: &str = "metadata.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const SWEEP_FILE: &str = "sweep.json";
pub const FAILED_MARKER: &str = "FAILED";

/// Relative tolerance for re-checking `ifd = ppl_cond / ppl_uncond` on loaded scores.
const IFD_RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Embed,
    Cluster,
    Score,
    Select,
    Pack,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Cluster,
        Stage::Score,
        Stage::Select,
        Stage::Pack,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Pack => "pack",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage failure with the process exit status it maps to.
#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl PipelineError {
    /// 3 for invariant violations detected mid-pipeline, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.source.is_invariant_violation() {
            3
        } else {
            2
        }
    }
}

fn at(stage: Stage) -> impl FnOnce(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn load_samples(dir: &Path) -> Result<Vec<RenderedSample>> {
    Ok(jsonl::read_records(&dir.join(SAMPLES_FILE))?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// Loads a score file, re-checking each record's ratio.
pub fn load_scores(path: &Path) -> Result<ScoreTable> {
    let mut out = ScoreTable::new();
    for (line, rec) in jsonl::read_records::<ScoreRecord>(path)? {
        let expected = rec.ppl_cond / rec.ppl_uncond;
        if !((rec.ifd - expected).abs() <= IFD_RATIO_TOLERANCE * expected.abs()) {
            return Err(Error::Invariant(format!(
                "{}: line {line}: ifd {} != ppl_cond / ppl_uncond = {expected}",
                path.display(),
                rec.ifd
            )));
        }
        if out.insert(rec.id, rec).is_some() {
            return Err(Error::parse(path, line, format!("duplicate id {}", rec.id)));
        }
    }
    Ok(out)
}

/// Loads and renders the dataset; writes samples and length statistics.
pub fn ingest(cfg: &PipelineConfig) -> Result<Vec<RenderedSample>> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let corpus = corpus::load_dataset(&cfg.dataset_path, cfg.schema)?;
    let tokenizer = cfg.tokenizer.build()?;
    let samples = corpus::render_corpus(&corpus, &cfg.template, &tokenizer)?;
    let stats = corpus::corpus_stats(&samples, DEFAULT_HISTOGRAM_BIN_WIDTH)?;
    log::info!(
        "ingested {} samples ({} tokens, p50 {}, max {})",
        stats.count,
        stats.total_tokens,
        stats.p50,
        stats.max
    );
    jsonl::write_plain(&dir.join(SAMPLES_FILE), &samples)?;
    write_json(&dir.join(STATS_FILE), &stats)?;
    Ok(samples)
}

pub fn embed(cfg: &PipelineConfig) -> Result<EmbeddingMatrix> {
    let dir = &cfg.output_dir;
    let ids: Vec<u64> = load_samples(dir)?.iter().map(|s| s.id).collect();
    let emb = match cfg.embedding.source {
        EmbeddingSource::Builtin => {
            let corpus = corpus::load_dataset(&cfg.dataset_path, cfg.schema)?;
            if corpus.ids() != ids {
                return Err(Error::invalid(format!(
                    "{} no longer matches {SAMPLES_FILE}; re-run ingest",
                    cfg.dataset_path.display()
                )));
            }
            embedding::embed_hashed_tfidf(&corpus, cfg.embedding.dim, cfg.embedding.seed)?
        }
        EmbeddingSource::File => {
            let path = cfg
                .embedding
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("embedding.path is required".into()))?;
            embedding::load_embeddings(path, &ids)?
        }
    };
    log::info!("embedded {} samples in {} dimensions", emb.len(), emb.dim());
    embedding::write_embeddings(&dir.join(EMBEDDINGS_FILE), &emb)?;
    Ok(emb)
}

fn load_stage_embeddings(dir: &Path) -> Result<EmbeddingMatrix> {
    let ids: Vec<u64> = load_samples(dir)?.iter().map(|s| s.id).collect();
    embedding::load_embeddings(&dir.join(EMBEDDINGS_FILE), &ids)
}

pub fn kmeans_params(cfg: &PipelineConfig, n: usize) -> KMeansParams {
    KMeansParams {
        k: cfg.clustering.k.unwrap_or_else(|| default_k(n)),
        seed: cfg.clustering.seed,
        max_iters: cfg.clustering.max_iters,
        tol: cfg.clustering.tol,
        parallel: true,
    }
}

pub fn cluster(cfg: &PipelineConfig) -> Result<ClusterModel> {
    let dir = &cfg.output_dir;
    let emb = load_stage_embeddings(dir)?;
    let params = kmeans_params(cfg, emb.len());
    let model = clustering::kmeans(&emb, &params)?;
    for w in model.inertia_history.windows(2) {
        if w[1] > w[0] * (1.0 + 1e-9) {
            return Err(Error::Invariant(format!(
                "k-means inertia increased from {} to {}",
                w[0], w[1]
            )));
        }
    }
    log::info!(
        "k-means: k = {}, {} iterations, inertia {:.6}",
        model.k,
        model.inertia_history.len(),
        model.inertia
    );
    clustering::write_clusters(&dir.join(CLUSTERS_FILE), &dir.join(CENTROIDS_FILE), &model)?;
    Ok(model)
}

pub fn score(cfg: &PipelineConfig) -> Result<ScoreTable> {
    let dir = &cfg.output_dir;
    let samples = load_samples(dir)?;
    let scores = match cfg.scoring.provider {
        ScoreProvider::Ngram => {
            let lm = scoring::train_ngram(&samples, cfg.scoring.order, cfg.scoring.add_k)?;
            scoring::score_samples(&samples, &lm)?
        }
        ScoreProvider::File => {
            let path = cfg
                .scoring
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("scoring.path is required".into()))?;
            let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
            scoring::load_logprob_file(path, &ids)?
        }
    };
    log::info!(
        "scored {} samples; {} with ifd > 1",
        scores.len(),
        scores.values().filter(|r| r.ifd > 1.0).count()
    );
    scoring::write_scores(&dir.join(SCORES_FILE), &scores)?;
    Ok(scores)
}

/// The candidates a selector sees, after the optional IFD filter.
#[derive(Debug, Clone)]
pub struct SelectionPool {
    pub emb: EmbeddingMatrix,
    pub clusters: ClusterModel,
    pub scores: ScoreTable,
}

impl SelectionPool {
    pub fn new(
        emb: EmbeddingMatrix,
        clusters: ClusterModel,
        scores: ScoreTable,
        drop_ifd_above: Option<f64>,
    ) -> Result<Self> {
        if emb.ids() != clusters.ids.as_slice() {
            return Err(Error::invalid("cluster assignments do not match embedding ids"));
        }
        let missing: Vec<u64> = emb
            .ids()
            .iter()
            .copied()
            .filter(|id| !scores.contains_key(id))
            .take(10)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
        let Some(limit) = drop_ifd_above else {
            return Ok(Self { emb, clusters, scores });
        };
        let keep = |id: u64| scores.get(&id).is_some_and(|r| r.ifd <= limit);
        let emb = emb.filter(keep);
        if emb.is_empty() {
            return Err(Error::invalid(format!("no sample has ifd <= {limit}")));
        }
        let clusters = clusters.filter(keep);
        let scores = scores.into_iter().filter(|(_, r)| r.ifd <= limit).collect();
        Ok(Self { emb, clusters, scores })
    }

    pub fn len(&self) -> usize {
        self.emb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.is_empty()
    }
}

pub fn graph_density_params(cfg: &PipelineConfig, dim: usize) -> GraphDensityParams {
    GraphDensityParams {
        knn: cfg.selection.knn,
        gamma: cfg.selection.gamma.unwrap_or(1.0 / dim as f64),
    }
}

/// Runs `strategy` over `pool`.
pub fn select_from(
    pool: &SelectionPool,
    strategy: Strategy,
    m_percent: f64,
    seed: u64,
    gd: &GraphDensityParams,
) -> Result<SelectionResult> {
    let result = match strategy {
        Strategy::Cdas => selection::cdas_select(&pool.clusters, &pool.scores, m_percent)?,
        Strategy::Random => selection::random_select(pool.emb.ids(), m_percent, seed)?,
        Strategy::Complexity => selection::complexity_select(&pool.scores, m_percent)?,
        Strategy::Diversity => selection::diversity_select(&pool.clusters, m_percent, seed)?,
        Strategy::Kcenter => selection::kcenter_select(&pool.emb, m_percent, seed)?,
        Strategy::GraphDensity => selection::graph_density_select(&pool.emb, m_percent, gd)?,
    };
    let result = if result.per_cluster_counts.is_empty() {
        result.with_cluster_counts(&pool.clusters)
    } else {
        result
    };
    check_selection(pool, &result)?;
    Ok(result)
}

fn check_selection(pool: &SelectionPool, result: &SelectionResult) -> Result<()> {
    let target = selection::target_size(pool.len(), result.m_percent)?;
    if result.selected_ids.len() != target {
        return Err(Error::Invariant(format!(
            "{} selected {} samples, expected {target}",
            result.strategy,
            result.selected_ids.len()
        )));
    }
    let pool_ids: HashSet<u64> = pool.emb.ids().iter().copied().collect();
    let mut seen = HashSet::with_capacity(target);
    for id in &result.selected_ids {
        if !pool_ids.contains(id) || !seen.insert(*id) {
            return Err(Error::Invariant(format!(
                "{} selected id {id} twice or from outside the pool",
                result.strategy
            )));
        }
    }
    if matches!(result.strategy, Strategy::Cdas | Strategy::Diversity) {
        let sizes = pool.clusters.sizes();
        let quotas = selection::apportion(&sizes, target);
        for (c, q) in quotas.iter().enumerate() {
            let got = result.per_cluster_counts.get(&c).map_or(0, |cc| cc.selected);
            if got != *q {
                return Err(Error::Invariant(format!(
                    "cluster {c}: selected {got}, quota {q}"
                )));
            }
        }
    }
    Ok(())
}

fn load_pool(cfg: &PipelineConfig, base: &Path) -> Result<SelectionPool> {
    let emb = load_stage_embeddings(base)?;
    let clusters = clustering::load_clusters(&base.join(CLUSTERS_FILE), &base.join(CENTROIDS_FILE), Some(&emb))?;
    let scores = load_scores(&base.join(SCORES_FILE))?;
    SelectionPool::new(emb, clusters, scores, cfg.scoring.drop_ifd_above)
}

/// Select stage reading upstream artifacts from `base` and writing into `out`.
pub fn select_into(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<SelectionResult> {
    ensure_dir(out)?;
    let pool = load_pool(cfg, base)?;
    let gd = graph_density_params(cfg, pool.emb.dim());
    let s = &cfg.selection;
    let result = select_from(&pool, s.strategy, s.m_percent, s.seed, &gd)?;
    log::info!(
        "{} selected {} of {} samples (m = {}%)",
        result.strategy,
        result.selected_ids.len(),
        pool.len(),
        s.m_percent
    );
    selection::write_selection(&out.join(SELECTION_FILE), &result, &pool.clusters, &pool.scores)?;
    Ok(result)
}

pub fn select(cfg: &PipelineConfig) -> Result<SelectionResult> {
    select_into(cfg, &cfg.output_dir, &cfg.output_dir)
}

/// Selected samples as pack items, in corpus order.
fn selected_items(base: &Path, out: &Path) -> Result<Vec<PackItem>> {
    let (_, records) = selection::load_selection(&out.join(SELECTION_FILE))?;
    let chosen: HashSet<u64> = records.iter().map(|r| r.id).collect();
    let items: Vec<PackItem> = load_samples(base)?
        .iter()
        .filter(|s| chosen.contains(&s.id))
        .map(PackItem::from)
        .collect();
    if items.len() != chosen.len() {
        return Err(Error::invalid("selection lists ids that are not in the ingested samples"));
    }
    Ok(items)
}

fn plan_for(cfg: &PipelineConfig, items: &[PackItem], strategy: PackStrategy) -> Result<packing::PackPlan> {
    let p = &cfg.packing;
    let plan = match strategy {
        PackStrategy::Traditional => packing::plan_traditional(items, p.max_len, p.batch_size)?,
        PackStrategy::Dynamic => packing::plan_dynamic(items, p.max_len, p.batch_size)?,
        PackStrategy::DynamicPack if p.global => {
            packing::plan_global_pack(items, p.max_len, p.batch_size, p.separator_cost)?
        }
        PackStrategy::DynamicPack => {
            packing::plan_dynamic_pack(items, p.max_len, p.batch_size, p.separator_cost)?
        }
    };
    plan.validate(items)?;
    Ok(plan)
}

pub fn pack_into(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<packing::PackPlan> {
    let items = selected_items(base, out)?;
    let plan = plan_for(cfg, &items, cfg.packing.strategy)?;
    let eff = packing::plan_efficiency(&plan);
    log::info!(
        "{}: {} sequences, padding ratio {:.4}",
        plan.strategy,
        eff.total_sequences,
        eff.padding_ratio
    );
    packing::write_manifest(&out.join(MANIFEST_FILE), &plan)?;
    Ok(plan)
}

pub fn pack(cfg: &PipelineConfig) -> Result<packing::PackPlan> {
    pack_into(cfg, &cfg.output_dir, &cfg.output_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub inertia: f64,
    pub sizes: Vec<usize>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean_ifd: f64,
    pub min_ifd: f64,
    pub max_ifd: f64,
    pub above_one: usize,
    pub selected_mean_ifd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset_size: usize,
    pub pool_size: usize,
    pub strategy: Strategy,
    pub m_percent: f64,
    pub selected: usize,
    pub corpus_lengths: LengthStats,
    pub selected_lengths: LengthStats,
    pub clusters: ClusterSummary,
    pub scores: ScoreSummary,
    pub max_len: usize,
    pub batch_size: usize,
    pub separator_cost: usize,
    pub global_pack: bool,
    pub packing: EfficiencyReport,
}

pub fn report_into(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<Report> {
    let samples = load_samples(base)?;
    let pool = load_pool(cfg, base)?;
    let (header, records) = selection::load_selection(&out.join(SELECTION_FILE))?;
    let items = selected_items(base, out)?;
    let plans = PackStrategy::ALL
        .into_iter()
        .map(|s| plan_for(cfg, &items, s))
        .collect::<Result<Vec<_>>>()?;
    let packing = packing::efficiency_report(&plans)?;

    let mut selected = vec![0; pool.clusters.k];
    for r in &records {
        selected[r.cluster] += 1;
    }
    let full = clustering::load_clusters(&base.join(CLUSTERS_FILE), &base.join(CENTROIDS_FILE), Some(&load_stage_embeddings(base)?))?;
    let ifds: Vec<f64> = pool.scores.values().map(|r| r.ifd).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let selected_ifds: Vec<f64> = records.iter().map(|r| r.ifd).collect();
    let report = Report {
        dataset_size: samples.len(),
        pool_size: pool.len(),
        strategy: header.strategy,
        m_percent: header.m_percent,
        selected: records.len(),
        corpus_lengths: corpus::corpus_stats(&samples, DEFAULT_HISTOGRAM_BIN_WIDTH)?,
        selected_lengths: corpus::length_stats(items.iter().map(|i| i.len), DEFAULT_HISTOGRAM_BIN_WIDTH)?,
        clusters: ClusterSummary {
            k: full.k,
            inertia: full.inertia,
            sizes: pool.clusters.sizes(),
            selected,
        },
        scores: ScoreSummary {
            count: ifds.len(),
            mean_ifd: mean(&ifds),
            min_ifd: ifds.iter().copied().fold(f64::INFINITY, f64::min),
            max_ifd: ifds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            above_one: ifds.iter().filter(|v| **v > 1.0).count(),
            selected_mean_ifd: mean(&selected_ifds),
        },
        max_len: cfg.packing.max_len,
        batch_size: cfg.packing.batch_size,
        separator_cost: cfg.packing.separator_cost,
        global_pack: cfg.packing.global,
        packing,
    };
    ensure_dir(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn report(cfg: &PipelineConfig) -> Result<Report> {
    report_into(cfg, &cfg.output_dir, &cfg.output_dir)
}

/// Runs one stage against `cfg.output_dir`.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> std::result::Result<(), PipelineError> {
    cfg.validate().map_err(at(stage))?;
    match stage {
        Stage::Ingest => ingest(cfg).map(drop),
        Stage::Embed => embed(cfg).map(drop),
        Stage::Cluster => cluster(cfg).map(drop),
        Stage::Score => score(cfg).map(drop),
        Stage::Select => select(cfg).map(drop),
        Stage::Pack => pack(cfg).map(drop),
        Stage::Report => report(cfg).map(drop),
    }
    .map_err(at(stage))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageTiming {
    stage: Stage,
    seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    version: String,
    started_unix: f64,
    finished_unix: f64,
    succeeded: bool,
    stages: Vec<StageTiming>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// `cfg` with the cluster count filled in for a corpus of `n` samples.
pub fn resolve(cfg: &PipelineConfig, n: usize) -> PipelineConfig {
    let mut out = cfg.clone();
    out.clustering.k = Some(cfg.clustering.k.unwrap_or_else(|| default_k(n)));
    out
}

/// Runs every stage in order. On failure the outputs written so far are kept next to a
/// `FAILED` marker naming the stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<Report, PipelineError> {
    run_pipeline_until(cfg, Stage::Report)?.ok_or_else(|| PipelineError {
        stage: Stage::Report,
        source: Error::Invariant("report stage produced no report".into()),
    })
}

fn run_pipeline_until(cfg: &PipelineConfig, last: Stage) -> std::result::Result<Option<Report>, PipelineError> {
    let dir = cfg.output_dir.clone();
    ensure_dir(&dir).map_err(at(Stage::Ingest))?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| at(Stage::Ingest)(Error::io(&marker, e)))?;
    }
    let started = unix_now();
    let mut timings = Vec::new();
    let mut final_report = None;
    let mut resolved = cfg.clone();
    let outcome = (|| {
        cfg.validate().map_err(at(Stage::Ingest))?;
        for stage in Stage::ALL {
            let t = Instant::now();
            match stage {
                Stage::Ingest => {
                    let samples = ingest(cfg).map_err(at(stage))?;
                    resolved = resolve(cfg, samples.len());
                    resolved
                        .save(&dir.join(RESOLVED_CONFIG_FILE))
                        .map_err(at(stage))?;
                }
                Stage::Report => final_report = Some(report(&resolved).map_err(at(stage))?),
                other => run_stage(&resolved, other)?,
            }
            timings.push(StageTiming {
                stage,
                seconds: t.elapsed().as_secs_f64(),
            });
            if stage == last {
                break;
            }
        }
        Ok(())
    })();
    if let Err(e) = &outcome {
        // Best effort: the original error is what the caller needs to see.
        let _ = fs::write(&marker, format!("{e}\n"));
        if !dir.join(RESOLVED_CONFIG_FILE).exists() {
            let _ = cfg.save(&dir.join(RESOLVED_CONFIG_FILE));
        }
    }
    let meta = Metadata {
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix: started,
        finished_unix: unix_now(),
        succeeded: outcome.is_ok(),
        stages: timings,
    };
    let meta_result = write_json(&dir.join(METADATA_FILE), &meta);
    outcome?;
    meta_result.map_err(at(last))?;
    Ok(final_report)
}

/// Where selector benchmarks take their points and scores from.
#[derive(Debug, Clone)]
pub struct BenchInput {
    pub emb: EmbeddingMatrix,
    pub scores: ScoreTable,
}

impl BenchInput {
    /// Embeds and scores the configured dataset in memory.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = corpus::load_dataset(&cfg.dataset_path, cfg.schema)?;
        let tokenizer = cfg.tokenizer.build()?;
        let samples = corpus::render_corpus(&corpus, &cfg.template, &tokenizer)?;
        let emb = match cfg.embedding.source {
            EmbeddingSource::Builtin => embedding::embed_hashed_tfidf(&corpus, cfg.embedding.dim, cfg.embedding.seed)?,
            EmbeddingSource::File => embedding::load_embeddings(
                cfg.embedding.path.as_deref().ok_or_else(|| Error::Config("embedding.path is required".into()))?,
                &corpus.ids(),
            )?,
        };
        let scores = match cfg.scoring.provider {
            ScoreProvider::Ngram => {
                let lm = scoring::train_ngram(&samples, cfg.scoring.order, cfg.scoring.add_k)?;
                scoring::score_samples(&samples, &lm)?
            }
            ScoreProvider::File => scoring::load_logprob_file(
                cfg.scoring.path.as_deref().ok_or_else(|| Error::Config("scoring.path is required".into()))?,
                &corpus.ids(),
            )?,
        };
        Ok(Self { emb, scores })
    }

    /// `n` unit vectors in `dim` dimensions drawn around `components` random centres, with
    /// log-normal IFD scores.
    pub fn synthetic(n: usize, dim: usize, components: usize, seed: u64) -> Result<Self> {
        if n < 1 || dim < 1 || components < 1 {
            return Err(Error::invalid("synthetic points need n, dim and components >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres: Vec<Vec<f64>> = (0..components)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centres[rng.random_range(0..components)];
                c.iter()
                    .map(|x| x + 0.35 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let emb = EmbeddingMatrix::from_rows(dim, ids.clone(), rows)?;
        let scores = ids
            .iter()
            .map(|&id| {
                let z: f64 = StandardNormal.sample(&mut rng);
                ScoreRecord::from_perplexities(id, (0.3 * z).exp(), 1.0).map(|r| (id, r))
            })
            .collect::<Result<_>>()?;
        Ok(Self { emb, scores })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// The strategy name as requested.
    pub name: String,
    pub strategy: Strategy,
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub selected: usize,
    /// Overlap with the cdas subset, when cdas is among the benchmarked strategies.
    pub jaccard_vs_cdas: Option<f64>,
    #[serde(skip)]
    pub selected_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub n: usize,
    pub dim: usize,
    pub k: usize,
    pub m_percent: f64,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// Pairwise Jaccard overlap between the rows' subsets.
    pub jaccard: Vec<Vec<f64>>,
}

pub fn jaccard(a: &[u64], b: &[u64]) -> f64 {
    let a: HashSet<u64> = a.iter().copied().collect();
    let b: HashSet<u64> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times each strategy end to end. Clustering is part of the measured time for the
/// cluster-based strategies.
pub fn bench_selectors(
    cfg: &PipelineConfig,
    input: &BenchInput,
    strategies: &[String],
    repeats: usize,
) -> Result<BenchTable> {
    if repeats < 1 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    if strategies.is_empty() {
        return Err(Error::invalid("no strategies to benchmark"));
    }
    let parsed = strategies
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<Result<Vec<_>>>()?;
    let n = input.emb.len();
    let params = kmeans_params(cfg, n);
    let gd = graph_density_params(cfg, input.emb.dim());
    let m = cfg.selection.m_percent;
    let seed = cfg.selection.seed;

    let mut rows = Vec::with_capacity(parsed.len());
    for (name, &strategy) in strategies.iter().zip(&parsed) {
        let mut seconds = Vec::with_capacity(repeats);
        let mut ids = Vec::new();
        for _ in 0..repeats {
            let t = Instant::now();
            let result = run_bench_once(input, strategy, &params, m, seed, &gd)?;
            seconds.push(t.elapsed().as_secs_f64());
            ids = result.selected_ids;
        }
        rows.push(BenchRow {
            name: name.clone(),
            strategy,
            median_seconds: median(&seconds),
            seconds,
            selected: ids.len(),
            jaccard_vs_cdas: None,
            selected_ids: ids,
        });
    }
    let cdas = rows
        .iter()
        .find(|r| r.strategy == Strategy::Cdas)
        .map(|r| r.selected_ids.clone());
    if let Some(cdas) = cdas {
        for r in &mut rows {
            r.jaccard_vs_cdas = Some(jaccard(&r.selected_ids, &cdas));
        }
    }
    let jaccard = rows
        .iter()
        .map(|a| rows.iter().map(|b| jaccard(&a.selected_ids, &b.selected_ids)).collect())
        .collect();
    Ok(BenchTable {
        n,
        dim: input.emb.dim(),
        k: params.k,
        m_percent: m,
        repeats,
        rows,
        jaccard,
    })
}

fn run_bench_once(
    input: &BenchInput,
    strategy: Strategy,
    params: &KMeansParams,
    m: f64,
    seed: u64,
    gd: &GraphDensityParams,
) -> Result<SelectionResult> {
    match strategy {
        Strategy::Cdas | Strategy::Diversity => {
            let model = clustering::kmeans(&input.emb, params)?;
            if strategy == Strategy::Cdas {
                selection::cdas_select(&model, &input.scores, m)
            } else {
                selection::diversity_select(&model, m, seed)
            }
        }
        Strategy::Random => selection::random_select(input.emb.ids(), m, seed),
        Strategy::Complexity => selection::complexity_select(&input.scores, m),
        Strategy::Kcenter => selection::kcenter_select(&input.emb, m, seed),
        Strategy::GraphDensity => selection::graph_density_select(&input.emb, m, gd),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestingViolation {
    pub smaller_m: f64,
    pub larger_m: f64,
    pub cluster: usize,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub m_percent: f64,
    pub dir: PathBuf,
    pub selected: usize,
    pub padding_ratio: BTreeMap<PackStrategy, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub strategy: Strategy,
    pub entries: Vec<SweepEntry>,
    pub nesting_violations: Vec<NestingViolation>,
}

/// Directory name for one sweep point, e.g. `m_40` or `m_12.5`.
pub fn sweep_dir_name(m: f64) -> String {
    format!("m_{m}")
}

/// Runs the shared stages once, then selection, packing and reporting per `m` value in its
/// own subdirectory, and checks that each cluster's selection grows monotonically with `m`.
pub fn sweep_m(cfg: &PipelineConfig, m_values: &[f64]) -> std::result::Result<SweepSummary, PipelineError> {
    if m_values.is_empty() {
        return Err(at(Stage::Select)(Error::invalid("no m values given")));
    }
    if let Some(bad) = m_values.iter().find(|m| !(**m > 0.0 && **m <= 100.0)) {
        return Err(at(Stage::Select)(Error::invalid(format!("m must be in (0, 100], got {bad}"))));
    }
    run_pipeline_until(cfg, Stage::Score)?;
    let base = cfg.output_dir.clone();
    let resolved = PipelineConfig::load(&base.join(RESOLVED_CONFIG_FILE)).map_err(at(Stage::Select))?;

    let mut sorted = m_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut entries = Vec::new();
    let mut picks: Vec<(f64, Vec<(usize, u64)>)> = Vec::new();
    for &m in &sorted {
        let mut c = resolved.clone();
        c.selection.m_percent = m;
        let out = base.join(sweep_dir_name(m));
        let result = select_into(&c, &base, &out).map_err(at(Stage::Select))?;
        pack_into(&c, &base, &out).map_err(at(Stage::Pack))?;
        let report = report_into(&c, &base, &out).map_err(at(Stage::Report))?;
        let (_, records) = selection::load_selection(&out.join(SELECTION_FILE)).map_err(at(Stage::Select))?;
        picks.push((m, records.iter().map(|r| (r.cluster, r.id)).collect()));
        entries.push(SweepEntry {
            m_percent: m,
            dir: out,
            selected: result.selected_ids.len(),
            padding_ratio: report
                .packing
                .strategies
                .iter()
                .map(|s| (s.strategy, s.padding_ratio))
                .collect(),
        });
    }
    let mut nesting_violations = Vec::new();
    for w in picks.windows(2) {
        let larger: HashSet<(usize, u64)> = w[1].1.iter().copied().collect();
        for &(cluster, id) in &w[0].1 {
            if !larger.contains(&(cluster, id)) {
                nesting_violations.push(NestingViolation {
                    smaller_m: w[0].0,
                    larger_m: w[1].0,
                    cluster,
                    id,
                });
            }
        }
    }
    if !nesting_violations.is_empty() {
        log::warn!("{} nesting violations across the sweep", nesting_violations.len());
    }
    let summary = SweepSummary {
        strategy: resolved.selection.strategy,
        entries,
        nesting_violations,
    };
    write_json(&base.join(SWEEP_FILE), &summary).map_err(at(Stage::Report))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let input = PipelineError {
            stage: Stage::Ingest,
            source: Error::EmptyFile { path: "x".into() },
        };
        assert_eq!(input.exit_code(), 2);
        let inv = PipelineError {
            stage: Stage::Pack,
            source: Error::Invariant("bad".into()),
        };
        assert_eq!(inv.exit_code(), 3);
        assert!(inv.to_string().starts_with("pack stage failed"));
    }

    #[test]
    fn jaccard_and_median() {
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(jaccard(&[], &[]), 1.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn sweep_dir_names() {
        assert_eq!(sweep_dir_name(40.0), "m_40");
        assert_eq!(sweep_dir_name(12.5), "m_12.5");
    }

    #[test]
    fn synthetic_input_is_seeded() {
        let a = BenchInput::synthetic(50, 8, 3, 7).unwrap();
        let b = BenchInput::synthetic(50, 8, 3, 7).unwrap();
        assert_eq!(a.emb, b.emb);
        assert_eq!(a.scores, b.scores);
        assert_ne!(a.emb, BenchInput::synthetic(50, 8, 3, 8).unwrap().emb);
    }
}
