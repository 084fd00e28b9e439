//! The box-regression network and its ablation variants.
//!
//! Data flow, in the full caption configuration:
//!   v_cap = ReLU(W_cap c_cap + b_cap)
//!   z_c   = ReLU(W_c [v_cap; v_S; v_O] + b_c)
//!   z_h   = ReLU(W_h [z_c; S^c; S^b] + b_h)
//!   Ô     = W_out z_h + b_out
//! TRIPLET swaps v_cap for the raw relation embedding v_R,
//! CAPTION_PLUS_RELATION feeds both, CAPTION_NO_SO feeds v_cap alone.
//! v_S, v_O, v_R always come from the frozen embedding table; the output
//! layer is linear, so predictions may leave the unit square and are
//! evaluated unclamped.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::Instance;
use crate::embeddings::EmbeddingTable;
use crate::encoders::{
    encode_avg, Bilstm, BilstmGrads, BilstmTape, EmbeddingLayer, EncoderKind, PrecomputedStore,
};
use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::nncore::{relu, relu_backward, sq_err, sq_err_grad, Dense, DenseGrads, RmsProp};

pub const CHECKPOINT_FORMAT: &str = "scenelay-checkpoint-v1";

/// What feeds the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Caption,
    Triplet,
    CaptionPlusRelation,
    CaptionNoSo,
}

impl InputMode {
    pub fn uses_caption(&self) -> bool {
        !matches!(self, InputMode::Triplet)
    }

    pub fn uses_relation(&self) -> bool {
        matches!(self, InputMode::Triplet | InputMode::CaptionPlusRelation)
    }

    pub fn uses_subject_object(&self) -> bool {
        !matches!(self, InputMode::CaptionNoSo)
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caption" => Ok(InputMode::Caption),
            "triplet" => Ok(InputMode::Triplet),
            "caption-plus-relation" => Ok(InputMode::CaptionPlusRelation),
            "caption-no-so" => Ok(InputMode::CaptionNoSo),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}' (expected caption, triplet, caption-plus-relation, or caption-no-so)"
            ))),
        }
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InputMode::Caption => "caption",
            InputMode::Triplet => "triplet",
            InputMode::CaptionPlusRelation => "caption-plus-relation",
            InputMode::CaptionNoSo => "caption-no-so",
        };
        f.write_str(s)
    }
}

/// Architecture shape. Widths default to the standard configuration used for
/// the reported numbers; tests shrink them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: InputMode,
    pub encoder: EncoderKind,
    /// Word embedding dimension (table dimension).
    pub emb_dim: usize,
    /// Caption-dense output width (v_cap).
    pub cap_out: usize,
    /// Fusion layer output width (z_c).
    pub zc_dim: usize,
    /// Hidden layer output width (z_h).
    pub zh_dim: usize,
    /// LSTM hidden units per direction.
    pub lstm_hidden: usize,
    /// Precomputed store vector dimension; required for that encoder.
    pub store_dim: Option<usize>,
    /// Let gradients update the BiLSTM's embedding layer.
    pub trainable_embeddings: bool,
}

impl ModelConfig {
    pub fn standard(mode: InputMode, encoder: EncoderKind) -> Self {
        ModelConfig {
            mode,
            encoder,
            emb_dim: 300,
            cap_out: 300,
            zc_dim: 128,
            zh_dim: 64,
            lstm_hidden: 150,
            store_dim: None,
            trainable_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("emb_dim", self.emb_dim),
            ("cap_out", self.cap_out),
            ("zc_dim", self.zc_dim),
            ("zh_dim", self.zh_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.encoder == EncoderKind::Bilstm && self.lstm_hidden == 0 {
            return Err(Error::InvalidConfig("lstm_hidden must be positive".into()));
        }
        if self.mode.uses_caption() && self.encoder == EncoderKind::Precomputed {
            match self.store_dim {
                Some(0) | None => {
                    return Err(Error::InvalidConfig(
                        "precomputed encoder requires a positive store_dim".into(),
                    ))
                }
                _ => {}
            }
        }
        if self.trainable_embeddings && self.encoder != EncoderKind::Bilstm {
            return Err(Error::InvalidConfig(
                "trainable embeddings only apply to the bilstm encoder".into(),
            ));
        }
        Ok(())
    }

    /// Width of c_cap for the configured encoder.
    pub fn encoder_out(&self) -> usize {
        match self.encoder {
            EncoderKind::Avg => self.emb_dim,
            EncoderKind::Bilstm => 2 * self.lstm_hidden,
            EncoderKind::Precomputed => self.store_dim.unwrap_or(0),
        }
    }

    /// Input width of the fusion layer W_c, which is what varies by mode.
    pub fn fuse_in(&self) -> usize {
        match self.mode {
            InputMode::Caption => self.cap_out + 2 * self.emb_dim,
            InputMode::Triplet => 3 * self.emb_dim,
            InputMode::CaptionPlusRelation => self.cap_out + 3 * self.emb_dim,
            InputMode::CaptionNoSo => self.cap_out,
        }
    }
}

/// All trainable state. Optional parts exist only when the configuration
/// calls for them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Option<EmbeddingLayer>,
    pub bilstm: Option<Bilstm>,
    pub cap_dense: Option<Dense>,
    pub fuse: Dense,
    pub hidden: Dense,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embedding: Option<Vec<f64>>,
    pub bilstm: Option<BilstmGrads>,
    pub cap_dense: Option<DenseGrads>,
    pub fuse: DenseGrads,
    pub hidden: DenseGrads,
    pub out: DenseGrads,
}

/// Why an instance could not be fed through the network. Skips are counted
/// by callers, never fatal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    OovSubject,
    OovObject,
    OovRelation,
    OovCaption,
}

/// Forward activations kept for the backward pass.
#[derive(Debug)]
pub struct Forward {
    pub pred: [f64; 4],
    /// Embedding-layer row fed at each kept sequence position, when the
    /// layer is trainable.
    seq_rows: Vec<Option<usize>>,
    bilstm_tape: Option<BilstmTape>,
    c_cap: Option<Vec<f64>>,
    cap_pre: Option<Vec<f64>>,
    fuse_in: Vec<f64>,
    zc_pre: Vec<f64>,
    hid_in: Vec<f64>,
    zh_pre: Vec<f64>,
    z_h: Vec<f64>,
}

/// Gold regression target [O^c; O^b].
pub fn gold_vec(inst: &Instance) -> [f64; 4] {
    inst.object_box.to_array()
}

impl ModelParams {
    /// Glorot initialization in a fixed draw order, fully determined by the
    /// seed. `instances` supplies the vocabulary when embeddings train.
    pub fn init(
        config: ModelConfig,
        table: &EmbeddingTable,
        instances: &[&Instance],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.emb_dim {
            return Err(Error::InvalidConfig(format!(
                "embedding table dimension {} does not match configured emb_dim {}",
                table.dim(),
                config.emb_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uses_caption = config.mode.uses_caption();

        let bilstm = (uses_caption && config.encoder == EncoderKind::Bilstm)
            .then(|| Bilstm::init(config.emb_dim, config.lstm_hidden, &mut rng));
        let embedding = (bilstm.is_some() && config.trainable_embeddings)
            .then(|| EmbeddingLayer::build(instances.iter().map(|i| i.tokens.as_slice()), table));
        let cap_dense =
            uses_caption.then(|| Dense::init(config.cap_out, config.encoder_out(), &mut rng));
        let fuse = Dense::init(config.zc_dim, config.fuse_in(), &mut rng);
        let hidden = Dense::init(config.zh_dim, config.zc_dim + 4, &mut rng);
        let out = Dense::init(4, config.zh_dim, &mut rng);

        Ok(ModelParams {
            config,
            embedding,
            bilstm,
            cap_dense,
            fuse,
            hidden,
            out,
        })
    }

    pub fn grads_like(&self) -> ModelGrads {
        ModelGrads {
            embedding: self.embedding.as_ref().map(|e| e.grads_like()),
            bilstm: self.bilstm.as_ref().map(|b| b.grads_like()),
            cap_dense: self.cap_dense.as_ref().map(|d| d.grads_like()),
            fuse: self.fuse.grads_like(),
            hidden: self.hidden.grads_like(),
            out: self.out.grads_like(),
        }
    }

    /// Canonical tensor order: embedding, bilstm (fwd then bwd, weights then
    /// biases per gate), cap_dense, fuse, hidden, out. Checkpoints and the
    /// optimizer both follow this order.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out: Vec<(String, usize, usize, &[f64])> = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding".into(), e.len(), e.dim(), e.data()));
        }
        if let Some(b) = &self.bilstm {
            for (dir, cell) in [("fwd", &b.fwd), ("bwd", &b.bwd)] {
                for (g, name) in crate::nncore::lstm::GATE_NAMES.iter().enumerate() {
                    out.push((
                        format!("bilstm.{dir}.w_{name}"),
                        cell.w[g].rows(),
                        cell.w[g].cols(),
                        cell.w[g].data(),
                    ));
                }
                for (g, name) in crate::nncore::lstm::GATE_NAMES.iter().enumerate() {
                    out.push((format!("bilstm.{dir}.b_{name}"), cell.b[g].len(), 1, &cell.b[g]));
                }
            }
        }
        if let Some(d) = &self.cap_dense {
            out.push(("cap_dense.w".into(), d.w.rows(), d.w.cols(), d.w.data()));
            out.push(("cap_dense.b".into(), d.b.len(), 1, &d.b));
        }
        for (name, d) in [("fuse", &self.fuse), ("hidden", &self.hidden), ("out", &self.out)] {
            out.push((format!("{name}.w"), d.w.rows(), d.w.cols(), d.w.data()));
            out.push((format!("{name}.b"), d.b.len(), 1, &d.b));
        }
        out
    }

    /// Mutable view in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(("embedding".into(), e.data_mut()));
        }
        if let Some(b) = &mut self.bilstm {
            for (dir, cell) in [("fwd", &mut b.fwd), ("bwd", &mut b.bwd)] {
                for (g, w) in cell.w.iter_mut().enumerate() {
                    out.push((
                        format!("bilstm.{dir}.w_{}", crate::nncore::lstm::GATE_NAMES[g]),
                        w.data_mut(),
                    ));
                }
                for (g, bias) in cell.b.iter_mut().enumerate() {
                    out.push((
                        format!("bilstm.{dir}.b_{}", crate::nncore::lstm::GATE_NAMES[g]),
                        bias.as_mut_slice(),
                    ));
                }
            }
        }
        if let Some(d) = &mut self.cap_dense {
            out.push(("cap_dense.w".into(), d.w.data_mut()));
            out.push(("cap_dense.b".into(), d.b.as_mut_slice()));
        }
        for (name, d) in [
            ("fuse", &mut self.fuse),
            ("hidden", &mut self.hidden),
            ("out", &mut self.out),
        ] {
            out.push((format!("{name}.w"), d.w.data_mut()));
            out.push((format!("{name}.b"), d.b.as_mut_slice()));
        }
        out
    }

    /// One instance through the network. Outer error: fatal problems (a
    /// missing precomputed vector). Inner error: instance skipped, counted
    /// by the caller.
    pub fn forward(
        &self,
        inst: &Instance,
        inst_idx: usize,
        table: &EmbeddingTable,
        store: Option<&PrecomputedStore>,
    ) -> Result<std::result::Result<Forward, Skip>> {
        let cfg = &self.config;
        let mode = cfg.mode;

        let term_vec = |idx: usize, not_found: Skip| -> std::result::Result<&[f64], Skip> {
            inst.tokens
                .get(idx)
                .and_then(|t| table.lookup(t))
                .ok_or(not_found)
        };

        let mut v_s: &[f64] = &[];
        let mut v_o: &[f64] = &[];
        if mode.uses_subject_object() {
            v_s = match term_vec(inst.subj_idx, Skip::OovSubject) {
                Ok(v) => v,
                Err(s) => return Ok(Err(s)),
            };
            v_o = match term_vec(inst.obj_idx, Skip::OovObject) {
                Ok(v) => v,
                Err(s) => return Ok(Err(s)),
            };
        }
        let mut v_r: &[f64] = &[];
        if mode.uses_relation() {
            v_r = match term_vec(inst.rel_idx, Skip::OovRelation) {
                Ok(v) => v,
                Err(s) => return Ok(Err(s)),
            };
        }

        // Caption path: c_cap -> v_cap.
        let mut seq: Vec<Vec<f64>> = Vec::new();
        let mut seq_rows: Vec<Option<usize>> = Vec::new();
        let mut bilstm_tape = None;
        let mut c_cap = None;
        let mut cap_pre = None;
        let mut v_cap: Vec<f64> = Vec::new();
        if mode.uses_caption() {
            let cc: Vec<f64> = match cfg.encoder {
                EncoderKind::Avg => match encode_avg(&inst.tokens, table) {
                    Ok(v) => v,
                    Err(Error::AllTokensOov) => return Ok(Err(Skip::OovCaption)),
                    Err(e) => return Err(e),
                },
                EncoderKind::Bilstm => {
                    for tok in &inst.tokens {
                        if let Some(layer) = &self.embedding {
                            if let Some(row) = layer.lookup_idx(tok) {
                                seq.push(layer.row(row).to_vec());
                                seq_rows.push(Some(row));
                            }
                        } else if let Some(v) = table.lookup(tok) {
                            seq.push(v.to_vec());
                            seq_rows.push(None);
                        }
                    }
                    if seq.is_empty() {
                        return Ok(Err(Skip::OovCaption));
                    }
                    let cells = self.bilstm.as_ref().expect("bilstm params exist for bilstm encoder");
                    let (v, tape) = cells.encode(&seq);
                    bilstm_tape = Some(tape);
                    v
                }
                EncoderKind::Precomputed => {
                    let store = store.ok_or_else(|| {
                        Error::InvalidConfig("precomputed encoder requires a store".into())
                    })?;
                    store.lookup(&inst_idx.to_string())?.to_vec()
                }
            };
            let dense = self.cap_dense.as_ref().expect("caption path has cap_dense");
            let pre = dense.forward(&cc);
            v_cap = relu(&pre);
            c_cap = Some(cc);
            cap_pre = Some(pre);
        }

        let mut fuse_in = Vec::with_capacity(cfg.fuse_in());
        match mode {
            InputMode::Caption => {
                fuse_in.extend_from_slice(&v_cap);
                fuse_in.extend_from_slice(v_s);
                fuse_in.extend_from_slice(v_o);
            }
            InputMode::Triplet => {
                fuse_in.extend_from_slice(v_r);
                fuse_in.extend_from_slice(v_s);
                fuse_in.extend_from_slice(v_o);
            }
            InputMode::CaptionPlusRelation => {
                fuse_in.extend_from_slice(&v_cap);
                fuse_in.extend_from_slice(v_r);
                fuse_in.extend_from_slice(v_s);
                fuse_in.extend_from_slice(v_o);
            }
            InputMode::CaptionNoSo => fuse_in.extend_from_slice(&v_cap),
        }

        let zc_pre = self.fuse.forward(&fuse_in);
        let z_c = relu(&zc_pre);

        let s = &inst.subject_box;
        let mut hid_in = z_c;
        hid_in.extend_from_slice(&[s.cx, s.cy, s.hw, s.hh]);
        let zh_pre = self.hidden.forward(&hid_in);
        let z_h = relu(&zh_pre);

        let pred_v = self.out.forward(&z_h);
        let pred = [pred_v[0], pred_v[1], pred_v[2], pred_v[3]];

        Ok(Ok(Forward {
            pred,
            seq_rows,
            bilstm_tape,
            c_cap,
            cap_pre,
            fuse_in,
            zc_pre,
            hid_in,
            zh_pre,
            z_h,
        }))
    }

    /// Accumulate parameter gradients for one instance given d loss / d Ô.
    pub fn backward(&self, fwd: &Forward, dpred: &[f64], grads: &mut ModelGrads) {
        let cfg = &self.config;

        let dz_h = self.out.backward(&fwd.z_h, dpred, &mut grads.out);
        let dzh_pre = relu_backward(&fwd.zh_pre, &dz_h);
        let dhid_in = self.hidden.backward(&fwd.hid_in, &dzh_pre, &mut grads.hidden);
        // The trailing 4 slots of hid_in are the subject box: an input, not a
        // parameter; its gradient stops here.
        let dz_c = &dhid_in[..cfg.zc_dim];
        let dzc_pre = relu_backward(&fwd.zc_pre, dz_c);
        let dfuse_in = self.fuse.backward(&fwd.fuse_in, &dzc_pre, &mut grads.fuse);

        if cfg.mode.uses_caption() {
            // v_cap occupies the leading cap_out slots of fuse_in in every
            // caption-bearing mode; v_R/v_S/v_O behind it are frozen.
            let dv_cap = &dfuse_in[..cfg.cap_out];
            let cap_pre = fwd.cap_pre.as_ref().expect("caption path cached");
            let c_cap = fwd.c_cap.as_ref().expect("caption path cached");
            let dcap_pre = relu_backward(cap_pre, dv_cap);
            let dense = self.cap_dense.as_ref().expect("caption path has cap_dense");
            let dgrads = grads.cap_dense.as_mut().expect("grads mirror params");
            let dc_cap = dense.backward(c_cap, &dcap_pre, dgrads);

            if let (Some(cells), Some(tape)) = (&self.bilstm, &fwd.bilstm_tape) {
                let bgrads = grads.bilstm.as_mut().expect("grads mirror params");
                let dxs = cells.backward(tape, &dc_cap, bgrads);
                if let (Some(layer), Some(egrads)) = (&self.embedding, grads.embedding.as_mut()) {
                    let dim = layer.dim();
                    for (pos, row) in fwd.seq_rows.iter().enumerate() {
                        if let Some(row) = row {
                            let dst = &mut egrads[row * dim..(row + 1) * dim];
                            for (g, d) in dst.iter_mut().zip(&dxs[pos]) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            // AVG and PRECOMPUTED inputs are frozen: dc_cap is dropped.
        }
    }
}

impl ModelGrads {
    /// Same order as `ModelParams::tensors`.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding".into(), e.as_slice()));
        }
        if let Some(b) = &self.bilstm {
            for (dir, cell) in [("fwd", &b.fwd), ("bwd", &b.bwd)] {
                for (g, name) in crate::nncore::lstm::GATE_NAMES.iter().enumerate() {
                    out.push((format!("bilstm.{dir}.w_{name}"), cell.w[g].data()));
                }
                for (g, name) in crate::nncore::lstm::GATE_NAMES.iter().enumerate() {
                    out.push((format!("bilstm.{dir}.b_{name}"), cell.b[g].as_slice()));
                }
            }
        }
        if let Some(d) = &self.cap_dense {
            out.push(("cap_dense.w".into(), d.w.data()));
            out.push(("cap_dense.b".into(), d.b.as_slice()));
        }
        for (name, d) in [("fuse", &self.fuse), ("hidden", &self.hidden), ("out", &self.out)] {
            out.push((format!("{name}.w"), d.w.data()));
            out.push((format!("{name}.b"), d.b.as_slice()));
        }
        out
    }
}

/// Outcome of one optimizer step over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOutcome {
    /// Mean per-example squared-norm loss over included instances.
    pub loss: f64,
    pub included: usize,
    pub skipped: usize,
}

/// Forward the whole batch, average the loss, backpropagate, apply one
/// RMSprop update. Instances the model cannot read are skipped and counted;
/// if everything is skipped, no update happens and the loss is 0.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[(usize, &Instance)],
    table: &EmbeddingTable,
    store: Option<&PrecomputedStore>,
    opt: &mut RmsProp,
    batch_index: usize,
) -> Result<BatchOutcome> {
    assert!(!batch.is_empty(), "train_step over an empty batch");

    let mut fwds = Vec::with_capacity(batch.len());
    let mut skipped = 0usize;
    for (idx, inst) in batch {
        match params.forward(inst, *idx, table, store)? {
            Ok(f) => fwds.push((f, gold_vec(inst))),
            Err(_) => skipped += 1,
        }
    }
    if fwds.is_empty() {
        return Ok(BatchOutcome {
            loss: 0.0,
            included: 0,
            skipped,
        });
    }

    let b = fwds.len() as f64;
    let mut grads = params.grads_like();
    let mut loss_sum = 0.0;
    for (fwd, gold) in &fwds {
        loss_sum += sq_err(&fwd.pred, gold);
        let mut dpred = sq_err_grad(&fwd.pred, gold);
        for d in dpred.iter_mut() {
            *d /= b;
        }
        params.backward(fwd, &dpred, &mut grads);
    }
    let loss = loss_sum / b;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch_index });
    }

    let mut tensors = params.tensors_mut();
    opt.step(&mut tensors, &grads.tensors())?;
    Ok(BatchOutcome {
        loss,
        included: fwds.len(),
        skipped,
    })
}

/// One prediction line of the output stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub instance_index: usize,
    #[serde(with = "geometry::bbox_array")]
    pub pred_box: BBox,
    #[serde(with = "geometry::bbox_array")]
    pub gold_box: BBox,
}

/// Forward-only pass over indexed instances; the index is the instance's
/// position in the full dataset, which also keys the precomputed store.
/// Output preserves input order no matter how many workers run.
pub fn predict(
    params: &ModelParams,
    instances: &[(usize, &Instance)],
    table: &EmbeddingTable,
    store: Option<&PrecomputedStore>,
    jobs: usize,
) -> Result<(Vec<Prediction>, usize)> {
    let run_one = |&(idx, inst): &(usize, &Instance)| -> Result<Option<Prediction>> {
        Ok(params.forward(inst, idx, table, store)?.ok().map(|f| Prediction {
            image_id: inst.image_id.clone(),
            instance_index: idx,
            pred_box: BBox::from_array(f.pred),
            gold_box: inst.object_box,
        }))
    };

    let results: Vec<Result<Option<Prediction>>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("building a thread pool only fails on resource exhaustion");
        pool.install(|| instances.par_iter().map(run_one).collect())
    } else {
        instances.iter().map(run_one).collect()
    };

    let mut preds = Vec::with_capacity(instances.len());
    let mut skipped = 0usize;
    for r in results {
        match r? {
            Some(p) => preds.push(p),
            None => skipped += 1,
        }
    }
    Ok((preds, skipped))
}

/// Optimizer hyperparameters, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptMeta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub clip: Option<f64>,
}

impl OptMeta {
    pub fn new(lr: f64) -> Self {
        OptMeta {
            lr,
            rho: 0.9,
            eps: 1e-8,
            clip: None,
        }
    }

    pub fn build(&self) -> RmsProp {
        let mut opt = RmsProp::new(self.lr);
        opt.rho = self.rho;
        opt.eps = self.eps;
        opt.clip = self.clip;
        opt
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    config: ModelConfig,
    seed: u64,
    optimizer: OptMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_vocab: Option<Vec<String>>,
    tensors: Vec<TensorRecord>,
}

/// Write a checkpoint: a single JSON document with version, config, seed,
/// optimizer hyperparameters, and every tensor flat in canonical order.
/// JSON numbers round-trip f64 exactly.
pub fn save_checkpoint(params: &ModelParams, seed: u64, opt: &OptMeta, path: &Path) -> Result<()> {
    let tensors = params
        .tensors()
        .into_iter()
        .map(|(name, rows, cols, data)| TensorRecord {
            name,
            rows,
            cols,
            data: data.to_vec(),
        })
        .collect();
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config.clone(),
        seed,
        optimizer: *opt,
        embedding_vocab: params.embedding.as_ref().map(|e| e.vocab().to_vec()),
        tensors,
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Msg(format!("serializing checkpoint: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load and validate a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, u64, OptMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::BadCheckpoint {
        path: path.to_path_buf(),
        msg,
    };
    let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(bad(format!(
            "format '{}' is not '{CHECKPOINT_FORMAT}'",
            doc.format
        )));
    }
    doc.config.validate().map_err(|e| bad(e.to_string()))?;

    let cfg = doc.config.clone();
    let uses_caption = cfg.mode.uses_caption();
    let embedding = match (&doc.embedding_vocab, cfg.trainable_embeddings) {
        (Some(vocab), true) => {
            let rec = doc
                .tensors
                .iter()
                .find(|t| t.name == "embedding")
                .ok_or_else(|| bad("embedding tensor missing".into()))?;
            Some(
                EmbeddingLayer::from_parts(cfg.emb_dim, vocab.clone(), rec.data.clone())
                    .map_err(|e| bad(e.to_string()))?,
            )
        }
        (None, true) => return Err(bad("trainable embeddings but no vocabulary".into())),
        _ => None,
    };

    let mut params = ModelParams {
        embedding,
        bilstm: (uses_caption && cfg.encoder == EncoderKind::Bilstm)
            .then(|| Bilstm::zeros(cfg.emb_dim, cfg.lstm_hidden)),
        cap_dense: uses_caption.then(|| Dense::zeros(cfg.cap_out, cfg.encoder_out())),
        fuse: Dense::zeros(cfg.zc_dim, cfg.fuse_in()),
        hidden: Dense::zeros(cfg.zh_dim, cfg.zc_dim + 4),
        out: Dense::zeros(4, cfg.zh_dim),
        config: cfg,
    };

    // Fill tensors by name; every expected tensor must appear with the
    // expected shape, and nothing extra may appear.
    let expected: Vec<(String, usize, usize)> = params
        .tensors()
        .iter()
        .map(|(n, r, c, _)| (n.clone(), *r, *c))
        .collect();
    if doc.tensors.len() != expected.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            expected.len(),
            doc.tensors.len()
        )));
    }
    for ((name, rows, cols), rec) in expected.iter().zip(&doc.tensors) {
        if &rec.name != name || rec.rows != *rows || rec.cols != *cols {
            return Err(bad(format!(
                "tensor '{}' ({}x{}) where '{}' ({}x{}) expected",
                rec.name, rec.rows, rec.cols, name, rows, cols
            )));
        }
        if rec.data.len() != rows * cols {
            return Err(bad(format!(
                "tensor '{}' has {} values, expected {}",
                rec.name,
                rec.data.len(),
                rows * cols
            )));
        }
        if rec.data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor '{}' contains non-finite values", rec.name)));
        }
    }
    for (dst, rec) in params.tensors_mut().into_iter().zip(&doc.tensors) {
        dst.1.copy_from_slice(&rec.data);
    }
    Ok((params, doc.seed, doc.optimizer))
}

/// Identity-shaped helper for tests and gradcheck: a config with tiny widths.
pub fn tiny_config(mode: InputMode, encoder: EncoderKind, emb_dim: usize) -> ModelConfig {
    ModelConfig {
        mode,
        encoder,
        emb_dim,
        cap_out: 5,
        zc_dim: 4,
        zh_dim: 3,
        lstm_hidden: 2,
        store_dim: None,
        trainable_embeddings: false,
    }
}
