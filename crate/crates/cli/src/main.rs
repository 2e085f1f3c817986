//! Command-line entry point: dataset generation, training, feature
//! extraction, retrieval evaluation, re-ranking, and the full experiment
//! matrix.
//!
//! Exit codes: 0 success, 2 validation failure, 3 some experiment cells
//! failed, 4 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use flipreid::error::{Error, Result};
use flipreid::eval::{InferenceMode, Protocol};
use flipreid::experiment::{
    eval_embeddings, ingest_manifest, run_experiment, ExperimentPlan,
};
use flipreid::io;
use flipreid::model::ModelConfig;
use flipreid::rerank::{rerank, RerankParams};
use flipreid::rng;
use flipreid::synth::{generate_dataset, split_dataset, DatasetSpec};
use flipreid::train::{train, write_history_jsonl, TrainConfig, TrainScheme};

#[derive(Parser)]
#[command(
    name = "flipreid",
    version,
    about = "Person re-identification toolkit: flip-consistent training, retrieval evaluation, re-ranking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (images + manifest) on disk.
    Generate(GenerateArgs),
    /// Train one model on a manifest's train split.
    Train(TrainArgs),
    /// Extract query/gallery features with a trained checkpoint.
    Embed(EmbedArgs),
    /// Score retrieval for query/gallery feature files.
    Evaluate(EvaluateArgs),
    /// Re-rank a query-gallery distance matrix.
    Rerank(RerankArgs),
    /// Run the full training/inference comparison matrix.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Flipreid,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InferenceArg {
    Single,
    Double,
}

impl From<InferenceArg> for InferenceMode {
    fn from(v: InferenceArg) -> Self {
        match v {
            InferenceArg::Single => InferenceMode::Single,
            InferenceArg::Double => InferenceMode::Double,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Standard,
    ExcludeSameCamera,
}

impl From<ProtocolArg> for Protocol {
    fn from(v: ProtocolArg) -> Self {
        match v {
            ProtocolArg::Standard => Protocol::Standard,
            ProtocolArg::ExcludeSameCamera => Protocol::ExcludeSameCamera,
        }
    }
}

/// Shared re-ranking flags.
#[derive(Args)]
struct RerankFlags {
    /// Neighborhood size for the reciprocal sets.
    #[arg(long, default_value_t = 20)]
    k1: usize,
    /// Encodings averaged in the smoothing step.
    #[arg(long, default_value_t = 6)]
    k2: usize,
    /// Blend weight of the original distance.
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
}

impl RerankFlags {
    fn params(&self) -> RerankParams {
        RerankParams {
            k1: self.k1,
            k2: self.k2,
            lambda: self.lambda,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON file with dataset spec + split settings (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the image-generation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (images/ + manifest.csv).
    #[arg(long)]
    out: PathBuf,
}

/// Dataset generation settings: the image spec plus how identities are split.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct GenerateConfig {
    spec: DatasetSpec,
    query_frac: f64,
    split_seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            spec: DatasetSpec::default(),
            query_frac: 0.34,
            split_seed: 97,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with {"model": ..., "train": ...} (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; training uses its train split.
    #[arg(long)]
    manifest: PathBuf,
    /// Training structure override.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Embedding-consistency term override (flipreid only).
    #[arg(long, value_enum)]
    flip_loss: Option<OnOff>,
    /// Training seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (checkpoint.frmc, model.json, history.jsonl).
    #[arg(long)]
    out: PathBuf,
}

/// Model + training settings for one `train` invocation.
#[derive(Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct TrainRunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Args)]
struct EmbedArgs {
    /// Trained checkpoint (.frmc).
    checkpoint: PathBuf,
    /// Resolved model configuration JSON written by `train`.
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest; embeds its query and gallery splits.
    #[arg(long)]
    manifest: PathBuf,
    /// Feature extraction mode.
    #[arg(long, value_enum, default_value = "single")]
    inference: InferenceArg,
    /// Output directory (query.frem, gallery.frem).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Query feature file (.frem).
    query: PathBuf,
    /// Gallery feature file (.frem).
    gallery: PathBuf,
    /// Re-rank distances before scoring.
    #[arg(long, value_enum, default_value = "off")]
    rerank: OnOff,
    #[command(flatten)]
    rerank_flags: RerankFlags,
    /// Gallery filtering rule.
    #[arg(long, value_enum, default_value = "standard")]
    protocol: ProtocolArg,
    /// Largest rank reported in the CMC curve.
    #[arg(long, default_value_t = flipreid::eval::DEFAULT_MAX_RANK)]
    max_rank: usize,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerankArgs {
    /// Query-to-gallery distances (.frdm).
    query_gallery: PathBuf,
    /// Query-to-query distances (.frdm).
    query_query: PathBuf,
    /// Gallery-to-gallery distances (.frdm).
    gallery_gallery: PathBuf,
    #[command(flatten)]
    rerank_flags: RerankFlags,
    /// Output distance file (.frdm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment plan JSON (the default comparison matrix when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the plan's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the plan's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides whether re-ranked rows are scored.
    #[arg(long, value_enum)]
    rerank: Option<OnOff>,
}

enum RunStatus {
    Clean,
    PartialFailures(usize),
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    io::write_text(path, &format!("{text}\n"))
}

fn cmd_generate(args: &GenerateArgs) -> Result<RunStatus> {
    let mut cfg: GenerateConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => GenerateConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.spec.seed = seed;
    }
    let samples = generate_dataset(&cfg.spec)?;
    let mut split_rng = rng::stream(cfg.split_seed, "split");
    let (train_s, query_s, gallery_s) = split_dataset(&samples, &mut split_rng, cfg.query_frac)?;

    let images_dir = args.out.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut rows = Vec::new();
    for (bucket, list) in [
        ("train", &train_s),
        ("query", &query_s),
        ("gallery", &gallery_s),
    ] {
        for (i, s) in list.iter().enumerate() {
            let rel = format!("images/{bucket}-{i:04}.frid");
            io::write_image(&args.out.join(&rel), &s.image)?;
            rows.push(io::ManifestRow {
                path: rel,
                identity: s.identity,
                camera: s.camera,
                split: s.split,
            });
        }
    }
    let manifest = args.out.join("manifest.csv");
    io::write_manifest(&manifest, &rows)?;
    write_json(&args.out.join("generate.json"), &cfg)?;
    println!(
        "wrote {} ({} train / {} query / {} gallery images)",
        manifest.display(),
        train_s.len(),
        query_s.len(),
        gallery_s.len()
    );
    Ok(RunStatus::Clean)
}

fn cmd_train(args: &TrainArgs) -> Result<RunStatus> {
    let mut cfg: TrainRunConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => TrainRunConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.train.scheme = match mode {
            ModeArg::Baseline => TrainScheme::Baseline,
            ModeArg::Flipreid => TrainScheme::FlipReid,
        };
    }
    if let Some(flip) = args.flip_loss {
        cfg.train.use_flipping_loss = flip.as_bool();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let (train_s, _, _) = ingest_manifest(&args.manifest)?;
    let outcome = train(&cfg.model, &cfg.train, &train_s)?;

    std::fs::create_dir_all(&args.out)?;
    let checkpoint = args.out.join("checkpoint.frmc");
    io::write_checkpoint(&checkpoint, &outcome.model.cfg, &outcome.model.params)?;
    write_json(&args.out.join("model.json"), &outcome.model.cfg)?;
    write_history_jsonl(&args.out.join("history.jsonl"), &outcome.history)?;
    let last = outcome.history.last().expect("at least one step");
    println!(
        "wrote {} ({} steps, final loss {:.6})",
        checkpoint.display(),
        outcome.history.len(),
        last.total
    );
    Ok(RunStatus::Clean)
}

fn cmd_embed(args: &EmbedArgs) -> Result<RunStatus> {
    let cfg: ModelConfig = load_json(&args.config)?;
    let params = io::read_checkpoint(&args.checkpoint, &cfg)?;
    let model = flipreid::model::Model { cfg, params };
    let (_, query_s, gallery_s) = ingest_manifest(&args.manifest)?;
    let mode: InferenceMode = args.inference.into();

    std::fs::create_dir_all(&args.out)?;
    for (name, samples) in [("query", &query_s), ("gallery", &gallery_s)] {
        let set = flipreid::eval::embed(&model, samples, mode)?;
        let path = args.out.join(format!("{name}.frem"));
        io::write_embeddings(&path, &set)?;
        println!("wrote {} ({} features of dim {})", path.display(), set.len(), set.dim());
    }
    Ok(RunStatus::Clean)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<RunStatus> {
    let report = eval_embeddings(
        &args.query,
        &args.gallery,
        args.rerank.as_bool(),
        &args.rerank_flags.params(),
        args.protocol.into(),
        args.max_rank,
    )?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?;
    println!("{text}");
    if let Some(out) = &args.out {
        io::write_text(out, &format!("{text}\n"))?;
    }
    Ok(RunStatus::Clean)
}

fn cmd_rerank(args: &RerankArgs) -> Result<RunStatus> {
    let q_g = io::read_distances(&args.query_gallery)?;
    let q_q = io::read_distances(&args.query_query)?;
    let g_g = io::read_distances(&args.gallery_gallery)?;
    let out = rerank(&q_g, &q_q, &g_g, &args.rerank_flags.params())?;
    io::write_distances(&args.out, &out)?;
    println!("wrote {} ({}x{})", args.out.display(), out.nrows(), out.ncols());
    Ok(RunStatus::Clean)
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<RunStatus> {
    let mut plan: ExperimentPlan = match &args.config {
        Some(path) => load_json(path)?,
        None => ExperimentPlan::default(),
    };
    if let Some(out) = &args.out {
        plan.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        plan.seeds = vec![seed];
    }
    if let Some(flag) = args.rerank {
        plan.rerank = flag.as_bool();
    }
    let outcome = run_experiment(&plan)?;
    print!("{}", outcome.table);
    println!(
        "wrote {} and {}",
        outcome.results_csv.display(),
        outcome.run_json.display()
    );
    if outcome.failed > 0 {
        Ok(RunStatus::PartialFailures(outcome.failed))
    } else {
        Ok(RunStatus::Clean)
    }
}

fn run(cli: &Cli) -> Result<RunStatus> {
    match &cli.cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Embed(args) => cmd_embed(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Rerank(args) => cmd_rerank(args),
        Cmd::Experiment(args) => cmd_experiment(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(RunStatus::Clean) => ExitCode::SUCCESS,
        Ok(RunStatus::PartialFailures(n)) => {
            eprintln!("{n} experiment cell(s) failed; see run.json");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) => ExitCode::from(4),
                _ => ExitCode::from(2),
            }
        }
    }
}
