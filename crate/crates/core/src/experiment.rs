//! End-to-end experiment orchestration.
//!
//! An [`ExperimentPlan`] names a dataset, a model, a list of training
//! variants, the inference modes to evaluate, and a list of seeds. Running it
//! trains every (variant, seed) cell, embeds the test split under each mode,
//! scores retrieval with and without re-ranking, and writes:
//!
//! - `results.csv` — one row per (variant, mode, rerank, seed),
//! - `run.json` — the full plan, per-cell artifacts with content hashes, and
//!   per-cell mean/std summaries,
//! - `table.txt` — the human-readable comparison table,
//!
//! plus per-cell checkpoints, loss histories, and embedding files. Cells run
//! on a small worker pool (capped by the `FLIPREID_THREADS` environment
//! variable); results are assembled in plan order, so identical plans produce
//! identical artifacts regardless of scheduling.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{embed, evaluate, evaluate_with_distances, mean_flip_gap};
use crate::eval::{EmbeddingSet, InferenceMode, Protocol, DEFAULT_MAX_RANK};
use crate::io;
use crate::model::ModelConfig;
use crate::rerank::{rerank_embeddings, RerankParams};
use crate::rng;
use crate::synth::{generate_dataset, split_dataset, DatasetSpec, Sample, Split};
use crate::train::{train, write_history_jsonl, TrainConfig, TrainScheme};

/// Where the experiment's samples come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate images on the fly and split identities into train and test.
    Synthetic {
        spec: DatasetSpec,
        /// Fraction of each test identity's images used as queries.
        query_frac: f64,
        /// Seed for the identity split (independent of the image seed).
        split_seed: u64,
    },
    /// Load images listed in a manifest CSV with explicit splits.
    Manifest { path: PathBuf },
}

/// A named training configuration; its `seed` field is replaced per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub train: TrainConfig,
}

/// The full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub data: DataSource,
    pub model: ModelConfig,
    pub variants: Vec<VariantConfig>,
    pub modes: Vec<InferenceMode>,
    /// Also score a re-ranked double-image row per variant.
    pub rerank: bool,
    pub rerank_params: RerankParams,
    pub protocol: Protocol,
    pub max_rank: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// The comparison matrix: the two training structures, the flipping-loss
/// toggle, both inference modes, and a re-ranked row per variant.
impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            data: DataSource::Synthetic {
                spec: DatasetSpec::default(),
                query_frac: 0.34,
                split_seed: 97,
            },
            model: ModelConfig::default(),
            variants: default_variants(30),
            modes: vec![InferenceMode::Single, InferenceMode::Double],
            rerank: true,
            rerank_params: RerankParams::default(),
            protocol: Protocol::Standard,
            max_rank: DEFAULT_MAX_RANK,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("experiment-out"),
        }
    }
}

/// The three standard training variants: the plain baseline, the two-branch
/// structure without the consistency term, and the full method.
pub fn default_variants(epochs: usize) -> Vec<VariantConfig> {
    let mut base = TrainConfig::default();
    base.epochs = epochs;
    let mut flip = base.clone();
    flip.scheme = TrainScheme::FlipReid;
    let mut flip_loss = flip.clone();
    flip_loss.use_flipping_loss = true;
    vec![
        VariantConfig {
            name: "baseline".into(),
            train: base,
        },
        VariantConfig {
            name: "flipreid".into(),
            train: flip,
        },
        VariantConfig {
            name: "flipreid-fliploss".into(),
            train: flip_loss,
        },
    ]
}

fn filename_safe(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::validation("plan needs at least one variant"));
        }
        if self.modes.is_empty() {
            return Err(Error::validation("plan needs at least one inference mode"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("plan needs at least one seed"));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.variants.len() {
            return Err(Error::validation("variant names must be unique"));
        }
        for v in &self.variants {
            if !filename_safe(&v.name) {
                return Err(Error::validation(format!(
                    "variant name '{}' must use only letters, digits, '-', '_', '.'",
                    v.name
                )));
            }
            v.train.validate()?;
        }
        let mut modes = self.modes.clone();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(Error::validation("inference modes must be distinct"));
        }
        if self.rerank {
            self.rerank_params.validate()?;
            if !self.modes.contains(&InferenceMode::Double) {
                return Err(Error::validation(
                    "re-ranked rows are scored on double-image features; add the double mode or disable rerank",
                ));
            }
        }
        if self.max_rank == 0 {
            return Err(Error::validation("max_rank must be >= 1"));
        }
        if let DataSource::Synthetic {
            spec, query_frac, ..
        } = &self.data
        {
            spec.validate()?;
            if !(0.0..=1.0).contains(query_frac) {
                return Err(Error::validation("query_frac must be in [0, 1]"));
            }
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One scored configuration at one seed, with its artifact provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub mode: InferenceMode,
    pub rerank: bool,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    /// SHA-256 of the resolved (model, train) configuration JSON.
    pub config_sha256: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub query_embeddings: String,
    pub query_sha256: String,
    pub gallery_embeddings: String,
    pub gallery_sha256: String,
}

/// Outcome of one (variant, seed) training cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub variant: String,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<String>,
    /// Mean relative feature disagreement under mirroring, on the test set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Mean and spread of one (variant, mode, rerank) configuration across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    /// Table label: family index (variant order) dot row slot.
    pub label: String,
    pub variant: String,
    pub mode: InferenceMode,
    pub rerank: bool,
    pub seeds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellReport>,
    pub summary: Vec<CellSummary>,
    pub table: String,
    pub results_csv: PathBuf,
    pub run_json: PathBuf,
    /// Number of failed (variant, seed) cells.
    pub failed: usize,
}

#[derive(Serialize)]
struct RunDocument<'a> {
    plan: &'a ExperimentPlan,
    plan_sha256: String,
    num_train: usize,
    num_query: usize,
    num_gallery: usize,
    cells: &'a [CellReport],
    rows: &'a [ResultRow],
    summary: &'a [CellSummary],
}

fn mode_str(mode: InferenceMode) -> &'static str {
    match mode {
        InferenceMode::Single => "single",
        InferenceMode::Double => "double",
    }
}

fn on_off(flag: bool) -> &'static str {
    if flag {
        "on"
    } else {
        "off"
    }
}

/// Load an experiment's samples, already split into train/query/gallery.
pub fn load_samples(data: &DataSource) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    match data {
        DataSource::Synthetic {
            spec,
            query_frac,
            split_seed,
        } => {
            let samples = generate_dataset(spec)?;
            let mut split_rng = rng::stream(*split_seed, "split");
            split_dataset(&samples, &mut split_rng, *query_frac)
        }
        DataSource::Manifest { path } => ingest_manifest(path),
    }
}

/// Load and validate a manifest dataset: every image must exist and share one
/// shape, train identities need at least two samples and must not leak into
/// the test splits, and every query identity needs a gallery entry. Errors
/// cite the offending manifest line.
pub fn ingest_manifest(path: &Path) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let rows = io::read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    // (identity, manifest line) per split, for the validations below.
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut train_lines: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    let mut query_lines: Vec<(u32, usize)> = Vec::new();
    let mut gallery_ids: std::collections::BTreeSet<u32> = Default::default();
    let mut test_lines: std::collections::BTreeMap<u32, usize> = Default::default();
    for (idx, row) in rows.iter().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let image = io::read_image(&base.join(&row.path))
            .map_err(|e| Error::format(format!("manifest line {line}: {e}")))?;
        let dim = image.dim();
        match dims {
            None => dims = Some(dim),
            Some(d) if d != dim => {
                return Err(Error::validation(format!(
                    "manifest line {line}: image shape {dim:?} differs from {d:?}"
                )))
            }
            _ => {}
        }
        let sample = Sample {
            image,
            identity: row.identity,
            camera: row.camera,
            split: row.split,
        };
        match row.split {
            Split::Train => {
                train_lines.entry(row.identity).or_default().push(line);
                train.push(sample);
            }
            Split::Query => {
                query_lines.push((row.identity, line));
                test_lines.entry(row.identity).or_insert(line);
                query.push(sample);
            }
            Split::Gallery => {
                gallery_ids.insert(row.identity);
                test_lines.entry(row.identity).or_insert(line);
                gallery.push(sample);
            }
        }
    }
    if train.is_empty() || query.is_empty() || gallery.is_empty() {
        return Err(Error::validation(format!(
            "manifest needs all three splits, got {} train / {} query / {} gallery rows",
            train.len(),
            query.len(),
            gallery.len()
        )));
    }
    for (id, lines) in &train_lines {
        if lines.len() < 2 {
            return Err(Error::validation(format!(
                "manifest line {}: train identity {id} has only one sample",
                lines[0]
            )));
        }
        if let Some(&test_line) = test_lines.get(id) {
            return Err(Error::validation(format!(
                "manifest line {test_line}: identity {id} appears in both train and test splits"
            )));
        }
    }
    for (id, line) in &query_lines {
        if !gallery_ids.contains(id) {
            return Err(Error::validation(format!(
                "manifest line {line}: query identity {id} has no gallery entry"
            )));
        }
    }
    Ok((train, query, gallery))
}

/// Parse a worker-count override; `None` means "use the default".
fn parse_thread_cap(raw: Option<&str>) -> Option<usize> {
    let raw = raw?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Some(n),
        _ => {
            log::warn!("ignoring invalid FLIPREID_THREADS value '{raw}'");
            None
        }
    }
}

fn worker_threads(num_cells: usize) -> usize {
    let default = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = parse_thread_cap(std::env::var("FLIPREID_THREADS").ok().as_deref());
    cap.unwrap_or(default).min(num_cells).max(1)
}

struct CellResult {
    checkpoint: String,
    history: String,
    flip_gap: f64,
    rows: Vec<ResultRow>,
}

fn run_cell(
    plan: &ExperimentPlan,
    v_idx: usize,
    seed: u64,
    train_samples: &[Sample],
    query_samples: &[Sample],
    gallery_samples: &[Sample],
    test_samples: &[Sample],
) -> Result<CellResult> {
    let variant = &plan.variants[v_idx];
    let mut cfg = variant.train.clone();
    cfg.seed = seed;
    let config_sha256 = io::sha256_bytes(
        serde_json::to_string(&(&plan.model, &cfg))
            .map_err(|e| Error::format(e.to_string()))?
            .as_bytes(),
    );

    let outcome = train(&plan.model, &cfg, train_samples)?;
    let model = &outcome.model;
    let stem = format!("{}-seed{}", variant.name, seed);

    let checkpoint_rel = format!("checkpoints/{stem}.frmc");
    let checkpoint_abs = plan.out_dir.join(&checkpoint_rel);
    io::write_checkpoint(&checkpoint_abs, &model.cfg, &model.params)?;
    let checkpoint_sha256 = io::sha256_file(&checkpoint_abs)?;

    let history_rel = format!("history/{stem}.jsonl");
    write_history_jsonl(&plan.out_dir.join(&history_rel), &outcome.history)?;

    let flip_gap = mean_flip_gap(model, test_samples)?;

    let mut rows = Vec::new();
    let mut score = |mode: InferenceMode,
                     reranked: bool,
                     q: &EmbeddingSet,
                     g: &EmbeddingSet,
                     q_rel: &str,
                     q_sha: &str,
                     g_rel: &str,
                     g_sha: &str|
     -> Result<()> {
        let report = if reranked {
            let dist = rerank_embeddings(&q.features, &g.features, &plan.rerank_params)?;
            evaluate_with_distances(
                &dist,
                &q.identities,
                &q.cameras,
                &g.identities,
                &g.cameras,
                plan.protocol,
                plan.max_rank,
            )?
        } else {
            evaluate(q, g, plan.protocol, plan.max_rank)?
        };
        rows.push(ResultRow {
            variant: variant.name.clone(),
            mode,
            rerank: reranked,
            seed,
            map: report.map,
            rank1: report.rank1(),
            config_sha256: config_sha256.clone(),
            checkpoint: checkpoint_rel.clone(),
            checkpoint_sha256: checkpoint_sha256.clone(),
            query_embeddings: q_rel.to_string(),
            query_sha256: q_sha.to_string(),
            gallery_embeddings: g_rel.to_string(),
            gallery_sha256: g_sha.to_string(),
        });
        Ok(())
    };

    for &mode in &plan.modes {
        let q = embed(model, query_samples, mode)?;
        let g = embed(model, gallery_samples, mode)?;
        let q_rel = format!("embeddings/{stem}-{}-query.frem", mode_str(mode));
        let g_rel = format!("embeddings/{stem}-{}-gallery.frem", mode_str(mode));
        io::write_embeddings(&plan.out_dir.join(&q_rel), &q)?;
        io::write_embeddings(&plan.out_dir.join(&g_rel), &g)?;
        let q_sha = io::sha256_file(&plan.out_dir.join(&q_rel))?;
        let g_sha = io::sha256_file(&plan.out_dir.join(&g_rel))?;
        score(mode, false, &q, &g, &q_rel, &q_sha, &g_rel, &g_sha)?;
        // The re-ranked row sits on top of double-image features, matching
        // how re-ranking is reported in the comparison table.
        if plan.rerank && mode == InferenceMode::Double {
            score(mode, true, &q, &g, &q_rel, &q_sha, &g_rel, &g_sha)?;
        }
    }
    Ok(CellResult {
        checkpoint: checkpoint_rel,
        history: history_rel,
        flip_gap,
        rows,
    })
}

/// The (mode, rerank) slots of one variant family, in table order.
fn family_slots(plan: &ExperimentPlan) -> Vec<(InferenceMode, bool)> {
    let mut slots: Vec<(InferenceMode, bool)> =
        plan.modes.iter().map(|&m| (m, false)).collect();
    if plan.rerank {
        slots.push((InferenceMode::Double, true));
    }
    slots
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn build_summary(plan: &ExperimentPlan, rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut summary = Vec::new();
    for (v_idx, variant) in plan.variants.iter().enumerate() {
        for (s_idx, &(mode, reranked)) in family_slots(plan).iter().enumerate() {
            let maps: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant.name && r.mode == mode && r.rerank == reranked)
                .map(|r| r.map)
                .collect();
            let ranks: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant.name && r.mode == mode && r.rerank == reranked)
                .map(|r| r.rank1)
                .collect();
            if maps.is_empty() {
                continue;
            }
            let (map_mean, map_std) = mean_std(&maps);
            let (rank1_mean, rank1_std) = mean_std(&ranks);
            summary.push(CellSummary {
                label: format!("{}.{}", v_idx + 1, s_idx + 1),
                variant: variant.name.clone(),
                mode,
                rerank: reranked,
                seeds: maps.len(),
                map_mean,
                map_std,
                rank1_mean,
                rank1_std,
            });
        }
    }
    summary
}

fn render_table(summary: &[CellSummary], cells: &[CellReport]) -> String {
    let name_w = summary
        .iter()
        .map(|s| s.variant.len())
        .chain(["variant".len()])
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<5} {:<name_w$} {:<6} {:<6} {:>5}  {:>17}  {:>17}\n",
        "row", "variant", "mode", "rerank", "seeds", "mAP mean+/-std", "rank1 mean+/-std"
    ));
    for s in summary {
        out.push_str(&format!(
            "{:<5} {:<name_w$} {:<6} {:<6} {:>5}  {:>8.6}+/-{:.6}  {:>8.6}+/-{:.6}\n",
            s.label,
            s.variant,
            mode_str(s.mode),
            on_off(s.rerank),
            s.seeds,
            s.map_mean,
            s.map_std,
            s.rank1_mean,
            s.rank1_std
        ));
    }
    let failed: Vec<&CellReport> = cells
        .iter()
        .filter(|c| c.status == CellStatus::Failed)
        .collect();
    if !failed.is_empty() {
        out.push_str("\nfailed cells:\n");
        for c in failed {
            out.push_str(&format!(
                "  {} seed {}: {}\n",
                c.variant,
                c.seed,
                c.error.as_deref().unwrap_or("unknown error")
            ));
        }
    }
    out
}

fn render_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("variant,mode,rerank,seed,mAP,rank1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.variant,
            mode_str(r.mode),
            on_off(r.rerank),
            r.seed,
            r.map,
            r.rank1
        ));
    }
    out
}

/// Run every (variant, seed) cell of the plan and write all artifacts under
/// `plan.out_dir`. Cell failures do not abort the run: they are recorded in
/// the outcome (and in `run.json`) while the remaining cells proceed.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let (train_samples, query_samples, gallery_samples) = load_samples(&plan.data)?;
    let mut test_samples = query_samples.clone();
    test_samples.extend(gallery_samples.iter().cloned());

    for sub in ["checkpoints", "history", "embeddings"] {
        std::fs::create_dir_all(plan.out_dir.join(sub))?;
    }

    let cells: Vec<(usize, usize)> = (0..plan.variants.len())
        .flat_map(|v| (0..plan.seeds.len()).map(move |s| (v, s)))
        .collect();
    let results: Mutex<Vec<Option<std::result::Result<CellResult, String>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = worker_threads(cells.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= cells.len() {
                    break;
                }
                let (v_idx, s_idx) = cells[idx];
                let res = run_cell(
                    plan,
                    v_idx,
                    plan.seeds[s_idx],
                    &train_samples,
                    &query_samples,
                    &gallery_samples,
                    &test_samples,
                )
                .map_err(|e| e.to_string());
                results.lock().expect("results lock")[idx] = Some(res);
            });
        }
    });

    let results = results.into_inner().expect("results lock");
    let mut rows = Vec::new();
    let mut cell_reports = Vec::new();
    let mut failed = 0usize;
    for (idx, &(v_idx, s_idx)) in cells.iter().enumerate() {
        let variant = plan.variants[v_idx].name.clone();
        let seed = plan.seeds[s_idx];
        match results[idx].as_ref().expect("cell result present") {
            Ok(cell) => {
                rows.extend(cell.rows.iter().cloned());
                cell_reports.push(CellReport {
                    variant,
                    seed,
                    status: CellStatus::Ok,
                    error: None,
                    checkpoint: Some(cell.checkpoint.clone()),
                    history: Some(cell.history.clone()),
                    flip_gap: Some(cell.flip_gap),
                });
            }
            Err(msg) => {
                failed += 1;
                log::warn!("cell {variant} seed {seed} failed: {msg}");
                cell_reports.push(CellReport {
                    variant,
                    seed,
                    status: CellStatus::Failed,
                    error: Some(msg.clone()),
                    checkpoint: None,
                    history: None,
                    flip_gap: None,
                });
            }
        }
    }

    let summary = build_summary(plan, &rows);
    let table = render_table(&summary, &cell_reports);

    let results_csv = plan.out_dir.join("results.csv");
    io::write_text(&results_csv, &render_csv(&rows))?;

    let plan_sha256 = io::sha256_bytes(
        serde_json::to_string(plan)
            .map_err(|e| Error::format(e.to_string()))?
            .as_bytes(),
    );
    let doc = RunDocument {
        plan,
        plan_sha256,
        num_train: train_samples.len(),
        num_query: query_samples.len(),
        num_gallery: gallery_samples.len(),
        cells: &cell_reports,
        rows: &rows,
        summary: &summary,
    };
    let run_json = plan.out_dir.join("run.json");
    io::write_text(
        &run_json,
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&doc).map_err(|e| Error::format(e.to_string()))?
        ),
    )?;
    io::write_text(&plan.out_dir.join("table.txt"), &table)?;

    Ok(ExperimentOutcome {
        rows,
        cells: cell_reports,
        summary,
        table,
        results_csv,
        run_json,
        failed,
    })
}

/// Evaluate feature files directly, with optional re-ranking — no model
/// involved.
pub fn eval_embeddings(
    query_file: &Path,
    gallery_file: &Path,
    reranked: bool,
    params: &RerankParams,
    protocol: Protocol,
    max_rank: usize,
) -> Result<crate::eval::EvalReport> {
    let q = io::read_embeddings(query_file)?;
    let g = io::read_embeddings(gallery_file)?;
    if q.dim() != g.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query features have {} dims, gallery {}",
            q.dim(),
            g.dim()
        )));
    }
    if reranked {
        let dist = rerank_embeddings(&q.features, &g.features, params)?;
        evaluate_with_distances(
            &dist,
            &q.identities,
            &q.cameras,
            &g.identities,
            &g.cameras,
            protocol,
            max_rank,
        )
    } else {
        evaluate(&q, &g, protocol, max_rank)
    }
}
