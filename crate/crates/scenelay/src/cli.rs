//! Command-line entry point. One executable, six subcommands:
//! build-dataset, train, eval, predict, gradcheck, audit.
//!
//! Exit codes are a stable contract: 0 success, 1 a numeric check failed
//! (gradient check over tolerance, non-finite loss or gradient during
//! training), 2 usage or input validation errors. Human-readable output
//! goes to stdout; machine-readable output always goes to files.
//!
//! Relative input paths that do not exist in the working directory are
//! retried under `$SCENELAY_DATA` when it is set. Output paths are used
//! as given. Subcommands that write files first write a run manifest
//! (command line, resolved config, input digests, version, timestamp)
//! next to their primary output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::alignment::{self, AlignConfig, ThresholdScope};
use crate::embeddings::EmbeddingTable;
use crate::encoders::{EncoderKind, PrecomputedStore};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalCase, MetricsReport};
use crate::model::{self, InputMode, ModelConfig};
use crate::training::{self, TrainConfig};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "scenelay",
    version,
    about = "Grounded spatial layout from image captions: dataset building, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Align (subject, relation, object) triplets to captions and emit
    /// training instances.
    BuildDataset(BuildDatasetArgs),
    /// Train with k-fold cross-validation (default) or a single split.
    Train(TrainArgs),
    /// Score a prediction file against its dataset.
    Eval(EvalArgs),
    /// Stream predictions for a dataset from a checkpoint.
    Predict(PredictArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a deterministic human-review sample of a dataset.
    Audit(AuditArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Concept triplets, JSONL.
    #[arg(long)]
    triplets: PathBuf,
    /// Caption sets, JSONL.
    #[arg(long)]
    captions: PathBuf,
    /// Word embeddings, text format: token then values.
    #[arg(long)]
    embeddings: PathBuf,
    /// Embedding dimension.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Output dataset, JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Output build report, JSON.
    #[arg(long)]
    report: PathBuf,
    /// Similarity threshold.
    #[arg(long, default_value_t = 0.75)]
    threshold: f64,
    /// Which similarities the threshold gates: so, sro, or sum.
    #[arg(long, default_value = "so")]
    threshold_scope: String,
    /// File with one banned relation term per line; defaults built in.
    #[arg(long)]
    banned_actions: Option<PathBuf>,
    /// Recorded in the manifest; dataset building itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset produced by build-dataset, JSONL.
    #[arg(long)]
    dataset: PathBuf,
    /// Word embeddings, text format.
    #[arg(long)]
    embeddings: PathBuf,
    /// Embedding dimension.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Directory for checkpoints, metrics, and loss curves.
    #[arg(long)]
    run_dir: PathBuf,
    /// caption, triplet, caption-plus-relation, or caption-no-so.
    #[arg(long, default_value = "caption")]
    mode: String,
    /// avg, bilstm, or precomputed.
    #[arg(long, default_value = "avg")]
    encoder: String,
    /// Precomputed caption vectors, JSONL; required with --encoder precomputed.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Global-norm gradient clip; off unless given.
    #[arg(long)]
    clip: Option<f64>,
    /// Keep all instances of an image in the same fold.
    #[arg(long)]
    group_by_image: bool,
    /// Train folds in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Single train/test split instead of cross-validation.
    #[arg(long)]
    no_cv: bool,
    /// Train fraction for --no-cv.
    #[arg(long, default_value_t = 0.9)]
    split: f64,
    /// Backpropagate into the BiLSTM's embedding layer.
    #[arg(long)]
    trainable_embeddings: bool,
    #[arg(long, default_value_t = 300)]
    cap_out: usize,
    #[arg(long, default_value_t = 128)]
    zc_dim: usize,
    #[arg(long, default_value_t = 64)]
    zh_dim: usize,
    #[arg(long, default_value_t = 150)]
    lstm_hidden: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions, JSONL (from predict).
    #[arg(long)]
    pred: PathBuf,
    /// The dataset the predictions index into, JSONL.
    #[arg(long)]
    dataset: PathBuf,
    /// Metrics report output, JSON.
    #[arg(long)]
    json: PathBuf,
    /// Row label in the printed table.
    #[arg(long, default_value = "run")]
    name: String,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to predict on, JSONL.
    #[arg(long)]
    dataset: PathBuf,
    /// Word embeddings; dimension comes from the checkpoint.
    #[arg(long)]
    embeddings: PathBuf,
    /// Precomputed caption vectors; required when the checkpoint used them.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Predictions output, JSONL.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// avg or bilstm.
    #[arg(long, default_value = "avg")]
    encoder: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AuditArgs {
    /// Dataset to sample, JSONL.
    #[arg(long)]
    dataset: PathBuf,
    /// Sample size.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Review file output.
    #[arg(long)]
    out: PathBuf,
}

/// Parse and dispatch. Clap prints usage and exits 2 on bad flags itself.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::BuildDataset(a) => cmd_build_dataset(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Audit(a) => cmd_audit(a),
    }
}

/// Relative inputs that are absent in the working directory are retried
/// under $SCENELAY_DATA.
fn resolve_input(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var_os("SCENELAY_DATA") {
        Some(root) => {
            let candidate = PathBuf::from(root).join(path);
            if candidate.exists() {
                candidate
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    /// Input label to SHA-256 of file bytes.
    inputs: BTreeMap<String, String>,
    version: String,
    timestamp_unix: u64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest the inputs and write the manifest. Runs before any long work, so
/// it doubles as the existence check for every input file.
fn write_manifest(
    path: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let mut digests = BTreeMap::new();
    for (label, input) in inputs {
        digests.insert(label.to_string(), sha256_file(input)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        inputs: digests,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn manifest_sibling(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_build_dataset(a: BuildDatasetArgs) -> Result<i32> {
    let scope: ThresholdScope = a.threshold_scope.parse()?;
    let banned = match &a.banned_actions {
        Some(path) => alignment::load_banned(&resolve_input(path))?,
        None => AlignConfig::default_banned(),
    };
    let cfg = AlignConfig::new(a.threshold, scope, banned)?;

    let triplets_path = resolve_input(&a.triplets);
    let captions_path = resolve_input(&a.captions);
    let embeddings_path = resolve_input(&a.embeddings);
    let mut manifest_inputs = vec![
        ("triplets", triplets_path.as_path()),
        ("captions", captions_path.as_path()),
        ("embeddings", embeddings_path.as_path()),
    ];
    let banned_path = a.banned_actions.as_ref().map(|p| resolve_input(p));
    if let Some(p) = &banned_path {
        manifest_inputs.push(("banned_actions", p.as_path()));
    }
    write_manifest(
        &manifest_sibling(&a.out),
        "build-dataset",
        serde_json::json!({
            "threshold": cfg.threshold,
            "threshold_scope": a.threshold_scope,
            "banned_actions": cfg.banned.iter().collect::<std::collections::BTreeSet<_>>(),
            "dim": a.dim,
            "seed": a.seed,
            "jobs": a.jobs,
        }),
        &manifest_inputs,
    )?;

    let (table, stats) = EmbeddingTable::load(&embeddings_path, a.dim)?;
    let (triplets, bad_triplet_lines) = alignment::read_triplets(&triplets_path)?;
    let (captions, bad_caption_lines) = alignment::read_caption_sets(&captions_path)?;

    let (instances, mut report) = alignment::build_dataset(&triplets, &captions, &table, &cfg, a.jobs);
    // File-level damage joins the report: a malformed triplet line is a
    // rejected triplet, a malformed caption line only gets a count.
    report.triplets_total += bad_triplet_lines;
    report.rejections.malformed += bad_triplet_lines;

    let out_file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    alignment::write_instances(std::io::BufWriter::new(out_file), &instances)?;
    let report_body =
        serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&a.report, report_body).map_err(|e| Error::io(&a.report, e))?;

    println!(
        "embeddings: {} vectors ({} lines skipped)",
        table.len(),
        stats.lines - stats.loaded
    );
    if bad_caption_lines > 0 {
        println!("captions: {bad_caption_lines} malformed lines skipped");
    }
    println!(
        "instances: {} accepted of {} triplets ({} rejected)",
        report.instances,
        report.triplets_total,
        report.rejections.total()
    );
    println!(
        "images: {}  captions used: {}  captions/image: {:.2}  pairs/caption: {:.2}",
        report.images, report.captions_used, report.captions_per_image, report.pairs_per_caption
    );
    Ok(0)
}

/// Everything train needs resolved from flags: the model configuration and
/// optionally the loaded precomputed store.
fn build_model_config(a: &TrainArgs) -> Result<(ModelConfig, Option<PrecomputedStore>)> {
    let mode: InputMode = a.mode.parse()?;
    let encoder: EncoderKind = a.encoder.parse()?;
    let store = match (encoder, a.store.as_deref()) {
        (EncoderKind::Precomputed, Some(p)) => Some(PrecomputedStore::load(&resolve_input(p))?),
        (EncoderKind::Precomputed, None) if mode.uses_caption() => {
            return Err(Error::InvalidConfig(
                "--encoder precomputed requires --store".into(),
            ))
        }
        _ => None,
    };
    let mut config = ModelConfig::standard(mode, encoder);
    config.emb_dim = a.dim;
    config.cap_out = a.cap_out;
    config.zc_dim = a.zc_dim;
    config.zh_dim = a.zh_dim;
    config.lstm_hidden = a.lstm_hidden;
    config.store_dim = store.as_ref().map(|s| s.dim());
    config.trainable_embeddings = a.trainable_embeddings;
    config.validate()?;
    Ok((config, store))
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let (model_cfg, store) = build_model_config(&a)?;
    let mut cfg = TrainConfig::new(model_cfg, a.seed);
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.lr = a.lr;
    cfg.folds = a.folds;
    cfg.clip = a.clip;
    cfg.group_by_image = a.group_by_image;
    cfg.jobs = a.jobs;
    cfg.validate()?;
    if a.no_cv && !(a.split > 0.0 && a.split < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "--split must lie strictly between 0 and 1, got {}",
            a.split
        )));
    }

    let dataset_path = resolve_input(&a.dataset);
    let embeddings_path = resolve_input(&a.embeddings);
    let mut manifest_inputs = vec![
        ("dataset", dataset_path.as_path()),
        ("embeddings", embeddings_path.as_path()),
    ];
    let store_path = a.store.as_ref().map(|p| resolve_input(p));
    if let Some(p) = &store_path {
        manifest_inputs.push(("store", p.as_path()));
    }
    fs::create_dir_all(&a.run_dir).map_err(|e| Error::io(&a.run_dir, e))?;
    write_manifest(
        &a.run_dir.join("manifest.json"),
        "train",
        serde_json::json!({
            "train": cfg,
            "no_cv": a.no_cv,
            "split": if a.no_cv { Some(a.split) } else { None },
        }),
        &manifest_inputs,
    )?;

    let (table, _) = EmbeddingTable::load(&embeddings_path, a.dim)?;
    let dataset = alignment::read_instances(&dataset_path)?;

    let outcome = if a.no_cv {
        training::train_holdout(&dataset, &table, store.as_ref(), &cfg, a.split)?
    } else {
        training::cross_validate(&dataset, &table, store.as_ref(), &cfg)?
    };
    training::write_run_artifacts(&a.run_dir, &cfg, &outcome)?;

    let mut rows: Vec<(String, MetricsReport)> = outcome
        .folds
        .iter()
        .map(|f| (format!("fold{}", f.fold), f.report.clone()))
        .collect();
    rows.push(("aggregate".into(), outcome.aggregate.clone()));
    print!("{}", metrics::format_table(&rows));
    let skipped: usize = outcome.folds.iter().map(|f| f.skipped_eval).sum();
    if skipped > 0 {
        println!("note: {skipped} held-out instances were skipped (out-of-vocabulary terms)");
    }
    println!("artifacts: {}", a.run_dir.display());
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let pred_path = resolve_input(&a.pred);
    let dataset_path = resolve_input(&a.dataset);
    write_manifest(
        &manifest_sibling(&a.json),
        "eval",
        serde_json::json!({ "name": a.name }),
        &[("pred", pred_path.as_path()), ("dataset", dataset_path.as_path())],
    )?;

    let dataset = alignment::read_instances(&dataset_path)?;
    let text = fs::read_to_string(&pred_path).map_err(|e| Error::io(&pred_path, e))?;
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pred: model::Prediction =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                path: pred_path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        let inst = dataset.get(pred.instance_index).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "prediction line {} points at instance {} but the dataset has {}",
                i + 1,
                pred.instance_index,
                dataset.len()
            ))
        })?;
        cases.push(EvalCase {
            pred: pred.pred_box,
            gold: pred.gold_box,
            subject: inst.subject_box,
        });
    }
    let report = metrics::evaluate(&cases)?;
    let body = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&a.json, body).map_err(|e| Error::io(&a.json, e))?;
    print!("{}", metrics::format_table(&[(a.name, report)]));
    Ok(0)
}

fn cmd_predict(a: PredictArgs) -> Result<i32> {
    let checkpoint_path = resolve_input(&a.checkpoint);
    let dataset_path = resolve_input(&a.dataset);
    let embeddings_path = resolve_input(&a.embeddings);
    let mut manifest_inputs = vec![
        ("checkpoint", checkpoint_path.as_path()),
        ("dataset", dataset_path.as_path()),
        ("embeddings", embeddings_path.as_path()),
    ];
    let store_path = a.store.as_ref().map(|p| resolve_input(p));
    if let Some(p) = &store_path {
        manifest_inputs.push(("store", p.as_path()));
    }
    write_manifest(
        &manifest_sibling(&a.out),
        "predict",
        serde_json::json!({ "jobs": a.jobs }),
        &manifest_inputs,
    )?;

    let (params, _, _) = model::load_checkpoint(&checkpoint_path)?;
    if params.config.encoder == EncoderKind::Precomputed && store_path.is_none() {
        return Err(Error::InvalidConfig(
            "this checkpoint needs --store (precomputed encoder)".into(),
        ));
    }
    let store = store_path.map(|p| PrecomputedStore::load(&p)).transpose()?;
    let (table, _) = EmbeddingTable::load(&embeddings_path, params.config.emb_dim)?;
    let dataset = alignment::read_instances(&dataset_path)?;
    let indexed: Vec<(usize, &alignment::Instance)> = dataset.iter().enumerate().collect();

    let (preds, skipped) = model::predict(&params, &indexed, &table, store.as_ref(), a.jobs)?;
    let mut out = std::io::BufWriter::new(
        fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?,
    );
    for p in &preds {
        let line = serde_json::to_string(p).expect("prediction serializes");
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(&a.out, e))?;
    }
    out.flush().map_err(|e| Error::io(&a.out, e))?;
    println!(
        "predicted {} of {} instances ({} skipped) -> {}",
        preds.len(),
        dataset.len(),
        skipped,
        a.out.display()
    );
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let encoder: EncoderKind = a.encoder.parse()?;
    let report = training::gradient_check(encoder, a.seed)?;
    println!(
        "gradcheck {encoder}: worst relative error {:.3e} at {} ({} parameters)",
        report.worst, report.worst_param, report.params_checked
    );
    if report.worst < GRADCHECK_TOLERANCE {
        println!("PASS (tolerance {GRADCHECK_TOLERANCE:.0e})");
        Ok(0)
    } else {
        println!("FAIL (tolerance {GRADCHECK_TOLERANCE:.0e})");
        Ok(1)
    }
}

fn cmd_audit(a: AuditArgs) -> Result<i32> {
    let dataset_path = resolve_input(&a.dataset);
    write_manifest(
        &manifest_sibling(&a.out),
        "audit",
        serde_json::json!({ "n": a.n, "seed": a.seed }),
        &[("dataset", dataset_path.as_path())],
    )?;
    let dataset = alignment::read_instances(&dataset_path)?;
    let sample = alignment::audit_sample(&dataset, a.n, a.seed)?;
    fs::write(&a.out, &sample).map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {} sampled instances -> {}", a.n, a.out.display());
    Ok(0)
}
