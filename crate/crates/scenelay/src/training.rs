//! Cross-validation harness: deterministic fold splits, per-fold training
//! with seeded shuffling, held-out evaluation, uniform aggregation, and the
//! finite-difference gradient check.
//!
//! Everything random is derived from TrainConfig.seed through fixed streams
//! (`derive_seed`), so a (dataset, config) pair produces byte-identical
//! results regardless of fold parallelism.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::Instance;
use crate::embeddings::EmbeddingTable;
use crate::encoders::{EncoderKind, PrecomputedStore};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalCase, MetricsReport};
use crate::model::{
    self, gold_vec, predict, tiny_config, train_step, InputMode, ModelConfig, ModelParams, OptMeta,
};
use crate::nncore::gradcheck::rel_err;
use crate::nncore::{sq_err, sq_err_grad};

/// Training hyperparameters. Defaults are the reported configuration:
/// 10 folds, 10 epochs, batch 64, learning rate 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub folds: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Optional global-norm gradient clip; off by default.
    pub clip: Option<f64>,
    /// Split by image rather than by instance, for leakage analysis.
    pub group_by_image: bool,
    /// Fold-level parallelism; 1 trains folds sequentially.
    pub jobs: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-4,
            folds: 10,
            seed,
            model,
            clip: None,
            group_by_image: false,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if let Some(c) = self.clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "clip must be finite and positive, got {c}"
                )));
            }
        }
        self.model.validate()
    }

    pub fn opt_meta(&self) -> OptMeta {
        OptMeta {
            clip: self.clip,
            ..OptMeta::new(self.lr)
        }
    }
}

/// SplitMix64 mix of a base seed and a stream tag. Streams are fixed per
/// purpose so adding parallelism never reorders random draws.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

fn fold_stream(stream: u64, fold: usize) -> u64 {
    stream.wrapping_mul(1 << 32).wrapping_add(fold as u64)
}

/// Seeded shuffle of [0, n) followed by contiguous chunking into k parts
/// whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n} units into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(order[at..at + size].to_vec());
        at += size;
    }
    Ok(folds)
}

/// Seeded shuffle of [0, n) split into a train prefix of round(fraction*n)
/// and a held-out remainder. Both sides must be usable: the holdout needs
/// two instances for metrics, the train side at least one.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let train_n = (fraction * n as f64).round() as usize;
    if train_n == 0 || n - train_n < 2 {
        return Err(Error::InvalidConfig(format!(
            "splitting {n} instances at {fraction} leaves no usable train or test side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT));
    order.shuffle(&mut rng);
    let test = order.split_off(train_n);
    Ok((order, test))
}

/// Train one model on `train` (dataset-indexed instances). Returns the final
/// parameters and the per-epoch mean per-instance loss.
pub fn train_fold(
    train: &[(usize, &Instance)],
    table: &EmbeddingTable,
    store: Option<&PrecomputedStore>,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<(ModelParams, Vec<f64>)> {
    assert!(!train.is_empty(), "training set is empty");
    let vocab_source: Vec<&Instance> = train.iter().map(|(_, i)| *i).collect();
    let mut params = ModelParams::init(
        cfg.model.clone(),
        table,
        &vocab_source,
        derive_seed(cfg.seed, fold_stream(STREAM_INIT, fold)),
    )?;
    let mut opt = cfg.opt_meta().build();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold_stream(STREAM_SHUFFLE, fold)));

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_counter = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut included = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &Instance)> = chunk.iter().map(|&i| train[i]).collect();
            let outcome = train_step(&mut params, &batch, table, store, &mut opt, batch_counter)?;
            loss_sum += outcome.loss * outcome.included as f64;
            included += outcome.included;
            batch_counter += 1;
        }
        curve.push(if included > 0 {
            loss_sum / included as f64
        } else {
            0.0
        });
    }
    Ok((params, curve))
}

/// Evaluate params on a dataset-indexed subset.
pub fn evaluate_model(
    params: &ModelParams,
    subset: &[(usize, &Instance)],
    table: &EmbeddingTable,
    store: Option<&PrecomputedStore>,
    jobs: usize,
) -> Result<(MetricsReport, usize)> {
    let by_index: HashMap<usize, &Instance> = subset.iter().map(|&(i, inst)| (i, inst)).collect();
    let (preds, skipped) = predict(params, subset, table, store, jobs)?;
    let cases: Vec<EvalCase> = preds
        .iter()
        .map(|p| EvalCase {
            pred: p.pred_box,
            gold: p.gold_box,
            subject: by_index[&p.instance_index].subject_box,
        })
        .collect();
    Ok((metrics::evaluate(&cases)?, skipped))
}

/// One trained fold with everything a run directory records.
#[derive(Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub params: ModelParams,
    pub loss_curve: Vec<f64>,
    pub report: MetricsReport,
    /// Instances the model could not read at evaluation time.
    pub skipped_eval: usize,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub aggregate: MetricsReport,
}

fn run_one_split(
    dataset: &[Instance],
    train_idx: &[usize],
    test_idx: &[usize],
    table: &EmbeddingTable,
    store: Option<&PrecomputedStore>,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<FoldResult> {
    let train: Vec<(usize, &Instance)> = train_idx.iter().map(|&i| (i, &dataset[i])).collect();
    let test: Vec<(usize, &Instance)> = test_idx.iter().map(|&i| (i, &dataset[i])).collect();
    let (params, loss_curve) = train_fold(&train, table, store, cfg, fold)?;
    // Evaluation parallelism stays inside the fold workers' scope: serial here.
    let (report, skipped_eval) = evaluate_model(&params, &test, table, store, 1)?;
    Ok(FoldResult {
        fold,
        params,
        loss_curve,
        report,
        skipped_eval,
    })
}

/// The split units: per-instance index sets, or per-image groups flattened
/// back to instance indices when grouping is on.
fn fold_index_sets(dataset: &[Instance], cfg: &TrainConfig) -> Result<Vec<Vec<usize>>> {
    let split_seed = derive_seed(cfg.seed, STREAM_SPLIT);
    if !cfg.group_by_image {
        return kfold_split(dataset.len(), cfg.folds, split_seed);
    }
    let mut image_order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, inst) in dataset.iter().enumerate() {
        let entry = groups.entry(inst.image_id.as_str()).or_default();
        if entry.is_empty() {
            image_order.push(&inst.image_id);
        }
        entry.push(i);
    }
    let group_folds = kfold_split(image_order.len(), cfg.folds, split_seed)?;
    Ok(group_folds
        .into_iter()
        .map(|gf| {
            gf.into_iter()
                .flat_map(|g| groups[image_order[g]].iter().copied())
                .collect()
        })
        .collect())
}

/// Full k-fold cross-validation. Folds may train in parallel (`cfg.jobs`);
/// results merge by fold index so parallelism never changes output.
pub fn cross_validate(
    dataset: &[Instance],
    table: &EmbeddingTable,
    store: Option<&PrecomputedStore>,
    cfg: &TrainConfig,
) -> Result<CvOutcome> {
    cfg.validate()?;
    let folds_idx = fold_index_sets(dataset, cfg)?;
    let k = folds_idx.len();

    let membership: Vec<usize> = {
        let mut m = vec![0usize; dataset.len()];
        for (f, idxs) in folds_idx.iter().enumerate() {
            for &i in idxs {
                m[i] = f;
            }
        }
        m
    };
    let run_fold = |f: usize| -> Result<FoldResult> {
        let train_idx: Vec<usize> = (0..dataset.len()).filter(|&i| membership[i] != f).collect();
        run_one_split(dataset, &train_idx, &folds_idx[f], table, store, cfg, f)
    };

    let mut folds: Vec<FoldResult> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .expect("building a thread pool only fails on resource exhaustion");
        pool.install(|| (0..k).into_par_iter().map(run_fold).collect::<Result<Vec<_>>>())?
    } else {
        (0..k).map(run_fold).collect::<Result<Vec<_>>>()?
    };
    folds.sort_by_key(|f| f.fold);

    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let aggregate = metrics::aggregate(&reports)?;
    Ok(CvOutcome { folds, aggregate })
}

/// Single train/test split (the --no-cv path), reported as a one-fold outcome.
pub fn train_holdout(
    dataset: &[Instance],
    table: &EmbeddingTable,
    store: Option<&PrecomputedStore>,
    cfg: &TrainConfig,
    fraction: f64,
) -> Result<CvOutcome> {
    cfg.validate()?;
    let (train_idx, test_idx) = holdout_split(dataset.len(), fraction, cfg.seed)?;
    let fold = run_one_split(dataset, &train_idx, &test_idx, table, store, cfg, 0)?;
    let aggregate = fold.report.clone();
    Ok(CvOutcome {
        folds: vec![fold],
        aggregate,
    })
}

/// Write the run directory: config.json, then per fold a checkpoint, a
/// metrics JSON, and a loss CSV, plus metrics-aggregate.json.
pub fn write_run_artifacts(
    dir: &Path,
    cfg: &TrainConfig,
    outcome: &CvOutcome,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_json = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write_json(
        "config.json",
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )?;
    for f in &outcome.folds {
        model::save_checkpoint(
            &f.params,
            cfg.seed,
            &cfg.opt_meta(),
            &dir.join(format!("checkpoint-fold{}.json", f.fold)),
        )?;
        write_json(
            &format!("metrics-fold{}.json", f.fold),
            serde_json::to_string_pretty(&f.report).expect("report serializes"),
        )?;
        let csv_path = dir.join(format!("loss-fold{}.csv", f.fold));
        let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        writeln!(csv, "epoch,loss").map_err(|e| Error::io(&csv_path, e))?;
        for (e, l) in f.loss_curve.iter().enumerate() {
            writeln!(csv, "{e},{l}").map_err(|e2| Error::io(&csv_path, e2))?;
        }
    }
    write_json(
        "metrics-aggregate.json",
        serde_json::to_string_pretty(&outcome.aggregate).expect("report serializes"),
    )
}

/// Worst analytic-vs-numeric gradient disagreement over every parameter of
/// a tiny model on a tiny batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub worst: f64,
    pub worst_param: String,
    pub params_checked: usize,
}

/// Build a self-contained miniature problem and compare the full analytic
/// gradient against central finite differences (eps 1e-5), elementwise.
/// Covers the caption path, both term paths, and (for bilstm) the trainable
/// embedding layer.
pub fn gradient_check(encoder: EncoderKind, seed: u64) -> Result<GradCheckReport> {
    use crate::geometry::BBox;

    if encoder == EncoderKind::Precomputed {
        return Err(Error::InvalidConfig(
            "gradient check supports the avg and bilstm encoders".into(),
        ));
    }

    let dim = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let words = ["sun", "bird", "flies", "over", "lake", "a"];
    let entries: Vec<(String, Vec<f64>)> = words
        .iter()
        .map(|w| {
            let v: Vec<f64> = (0..dim)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            (w.to_string(), v)
        })
        .collect();
    let table = EmbeddingTable::from_entries(dim, entries)?;

    let mk = |tokens: &[&str], s: usize, r: usize, o: usize, sb: BBox, ob: BBox| Instance {
        image_id: "g".into(),
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        subj_idx: s,
        rel_idx: r,
        obj_idx: o,
        subject_box: sb,
        object_box: ob,
        mirrored: false,
        triplet: crate::alignment::TripletTerms {
            subject: tokens[s].into(),
            relation: tokens[r].into(),
            object: tokens[o].into(),
        },
        scores: crate::alignment::TermScores {
            sc_s: 1.0,
            sc_r: 1.0,
            sc_o: 1.0,
        },
    };
    let batch_insts = [
        mk(
            &["a", "bird", "flies", "over", "a", "lake"],
            1,
            2,
            5,
            BBox::new(0.4, 0.3, 0.1, 0.1),
            BBox::new(0.5, 0.7, 0.2, 0.1),
        ),
        mk(
            &["the", "sun", "over", "a", "lake"],
            1,
            2,
            4,
            BBox::new(0.6, 0.2, 0.15, 0.1),
            BBox::new(0.45, 0.8, 0.3, 0.12),
        ),
    ];
    let refs: Vec<&Instance> = batch_insts.iter().collect();

    let mut cfg = tiny_config(InputMode::CaptionPlusRelation, encoder, dim);
    cfg.trainable_embeddings = encoder == EncoderKind::Bilstm;
    let params = ModelParams::init(cfg, &table, &refs, derive_seed(seed, 8))?;

    let golds: Vec<[f64; 4]> = batch_insts.iter().map(gold_vec).collect();
    let batch_loss = |p: &ModelParams| -> f64 {
        let mut sum = 0.0;
        for (i, inst) in batch_insts.iter().enumerate() {
            let f = p.forward(inst, i, &table, None).unwrap().unwrap();
            sum += sq_err(&f.pred, &golds[i]);
        }
        sum / batch_insts.len() as f64
    };

    let b = batch_insts.len() as f64;
    let mut grads = params.grads_like();
    for (i, inst) in batch_insts.iter().enumerate() {
        let f = params.forward(inst, i, &table, None)?.unwrap();
        let mut dpred = sq_err_grad(&f.pred, &golds[i]);
        for d in dpred.iter_mut() {
            *d /= b;
        }
        params.backward(&f, &dpred, &mut grads);
    }

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    let analytic = grads.tensors();
    for (ti, (name, _, _, data)) in params.tensors().iter().enumerate() {
        for k in 0..data.len() {
            let probe = |delta: f64| -> f64 {
                let mut q = params.clone();
                q.tensors_mut()[ti].1[k] += delta;
                batch_loss(&q)
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let err = rel_err(analytic[ti].1[k], numeric);
            checked += 1;
            if err > worst {
                worst = err;
                worst_param = format!("{name}[{k}]");
            }
        }
    }
    Ok(GradCheckReport {
        worst,
        worst_param,
        params_checked: checked,
    })
}
