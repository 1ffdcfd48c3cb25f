use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use curate_core::config::{EmbeddingSource, ScoreProvider};
use curate_core::corpus::Schema;
use curate_core::packing::PackStrategy;
use curate_core::pipeline::{self, BenchInput, PipelineError, Stage};
use curate_core::selection::Strategy;
use curate_core::PipelineConfig;

/// Select complex and diverse instruction data and plan padding-efficient batches.
#[derive(Debug, Parser)]
#[command(name = "curate", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Artifact directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Seed for embedding, clustering and selection.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Per-field overrides applied on top of the configuration file.
#[derive(Debug, Args)]
struct Overrides {
    /// Input dataset (overrides `dataset_path`).
    #[arg(long, global = true, value_name = "PATH")]
    dataset: Option<PathBuf>,

    #[arg(long, global = true)]
    schema: Option<Schema>,

    /// Hashed embedding dimension.
    #[arg(long, global = true)]
    dim: Option<usize>,

    /// Precomputed embeddings file; switches the embedding source to `file`.
    #[arg(long, global = true, value_name = "PATH")]
    embeddings: Option<PathBuf>,

    /// Number of clusters.
    #[arg(long, short = 'k', global = true)]
    k: Option<usize>,

    /// n-gram order of the built-in scorer.
    #[arg(long, global = true)]
    order: Option<usize>,

    /// Precomputed log-probability or perplexity file; switches the scorer to `file`.
    #[arg(long, global = true, value_name = "PATH")]
    logprobs: Option<PathBuf>,

    /// Drop samples whose IFD exceeds this value before selection.
    #[arg(long, global = true)]
    drop_ifd_above: Option<f64>,

    /// Selection strategy.
    #[arg(long, global = true)]
    strategy: Option<Strategy>,

    /// Percentage of the pool to select, in (0, 100].
    #[arg(long, short = 'm', global = true)]
    m: Option<f64>,

    /// Padding strategy written to the manifest.
    #[arg(long, global = true)]
    pack_strategy: Option<PackStrategy>,

    #[arg(long, global = true)]
    max_len: Option<usize>,

    #[arg(long, global = true)]
    batch_size: Option<usize>,

    #[arg(long, global = true)]
    separator_cost: Option<usize>,

    /// Pack across the whole selection before batching.
    #[arg(long, global = true)]
    global_pack: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and render the dataset; write samples and length statistics.
    Ingest,
    /// Embed every sample.
    Embed,
    /// Run k-means over the embeddings.
    Cluster,
    /// Compute perplexities and IFD scores.
    Score,
    /// Select a subset.
    Select,
    /// Plan batches for the selected subset.
    Pack,
    /// Summarize selection and padding efficiency.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Time selection strategies and compare their subsets.
    BenchSelectors {
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "kmeans-cdas,kcenter,graph-density")]
        strategies: Vec<String>,

        #[arg(long, default_value_t = 5)]
        repeats: usize,

        /// Benchmark on this many synthetic points instead of the dataset.
        #[arg(long)]
        synthetic: Option<usize>,

        /// Dimension of synthetic points.
        #[arg(long, default_value_t = 64)]
        synthetic_dim: usize,

        /// Mixture components of synthetic points.
        #[arg(long, default_value_t = 20)]
        components: usize,
    },
    /// Select, pack and report for several sampling rates.
    SweepM {
        /// Comma-separated percentages.
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60")]
        m_values: Vec<f64>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let o = &cli.overrides;
    let synthetic = matches!(cli.command, Command::BenchSelectors { synthetic: Some(_), .. });
    let mut cfg = match (&cli.config, &o.dataset) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(dataset)) => PipelineConfig::for_dataset(dataset),
        (None, None) if synthetic => PipelineConfig::for_dataset(""),
        (None, None) => return Err(anyhow!("no dataset given: pass --config or --dataset")),
    };
    if let Some(d) = &o.dataset {
        cfg.dataset_path = d.clone();
    }
    if let Some(dir) = &cli.output {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(s) = o.schema {
        cfg.schema = s;
    }
    if let Some(d) = o.dim {
        cfg.embedding.dim = d;
    }
    if let Some(p) = &o.embeddings {
        cfg.embedding.source = EmbeddingSource::File;
        cfg.embedding.path = Some(p.clone());
    }
    if let Some(k) = o.k {
        cfg.clustering.k = Some(k);
    }
    if let Some(order) = o.order {
        cfg.scoring.order = order;
    }
    if let Some(p) = &o.logprobs {
        cfg.scoring.provider = ScoreProvider::File;
        cfg.scoring.path = Some(p.clone());
    }
    if let Some(t) = o.drop_ifd_above {
        cfg.scoring.drop_ifd_above = Some(t);
    }
    if let Some(s) = o.strategy {
        cfg.selection.strategy = s;
    }
    if let Some(m) = o.m {
        cfg.selection.m_percent = m;
    }
    if let Some(s) = o.pack_strategy {
        cfg.packing.strategy = s;
    }
    if let Some(v) = o.max_len {
        cfg.packing.max_len = v;
    }
    if let Some(v) = o.batch_size {
        cfg.packing.batch_size = v;
    }
    if let Some(v) = o.separator_cost {
        cfg.packing.separator_cost = v;
    }
    if o.global_pack {
        cfg.packing.global = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

enum Failure {
    Stage(PipelineError),
    Core(curate_core::Error),
    Other(anyhow::Error),
}

impl From<curate_core::Error> for Failure {
    fn from(e: curate_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Stage(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(cli)?;
    let stage = match &cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Embed => Stage::Embed,
        Command::Cluster => Stage::Cluster,
        Command::Score => Stage::Score,
        Command::Select => Stage::Select,
        Command::Pack => Stage::Pack,
        Command::Report => Stage::Report,
        Command::Pipeline => {
            let report = pipeline::run_pipeline(&cfg)?;
            log::info!("artifacts written to {}", cfg.output_dir.display());
            for s in &report.packing.strategies {
                log::info!(
                    "{:>13}: {} sequences, padding ratio {:.4}",
                    s.strategy.name(),
                    s.total_sequences,
                    s.padding_ratio
                );
            }
            return Ok(());
        }
        Command::BenchSelectors {
            strategies,
            repeats,
            synthetic,
            synthetic_dim,
            components,
        } => {
            let input = match synthetic {
                Some(n) => BenchInput::synthetic(*n, *synthetic_dim, *components, cfg.selection.seed),
                None => BenchInput::from_config(&cfg),
            }
            .context("preparing benchmark input")?;
            let table = pipeline::bench_selectors(&cfg, &input, strategies, *repeats)?;
            print_json(&table)?;
            return Ok(());
        }
        Command::SweepM { m_values } => {
            let summary = pipeline::sweep_m(&cfg, m_values)?;
            print_json(&summary)?;
            return Ok(());
        }
    };
    pipeline::run_stage(&cfg, stage)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invariant_violation() { 3 } else { 2 })
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
