//! Caption encoders: averaged embeddings, a bidirectional LSTM over token
//! embeddings, or vectors precomputed by an external sentence encoder.
//!
//! Out-of-vocabulary tokens are dropped from the sequence, mirroring how the
//! dataset builder treats them. The average and precomputed paths are frozen;
//! the BiLSTM path reads either the frozen table or a trainable
//! `EmbeddingLayer` copied from it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nncore::{relu, Dense, LstmCell, LstmGrads, LstmTape};

/// Which caption encoder a model uses. The precomputed store itself is data,
/// loaded separately; this tag travels through configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Avg,
    Bilstm,
    Precomputed,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(EncoderKind::Avg),
            "bilstm" => Ok(EncoderKind::Bilstm),
            "precomputed" => Ok(EncoderKind::Precomputed),
            other => Err(Error::InvalidConfig(format!(
                "unknown encoder '{other}' (expected avg, bilstm, or precomputed)"
            ))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EncoderKind::Avg => "avg",
            EncoderKind::Bilstm => "bilstm",
            EncoderKind::Precomputed => "precomputed",
        };
        f.write_str(s)
    }
}

/// Mean of the in-vocabulary token embeddings.
pub fn encode_avg(tokens: &[String], table: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; table.dim()];
    let mut n = 0usize;
    for tok in tokens {
        if let Some(v) = table.lookup(tok) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllTokensOov);
    }
    for s in sum.iter_mut() {
        *s /= n as f64;
    }
    Ok(sum)
}

/// Trainable copy of the table rows for the tokens a dataset actually uses,
/// in first-seen order so the layout is a pure function of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    dim: usize,
    order: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingLayer {
    pub fn build<'a, I>(token_streams: I, table: &EmbeddingTable) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut layer = EmbeddingLayer {
            dim: table.dim(),
            order: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        };
        for tokens in token_streams {
            for tok in tokens {
                let key = tok.to_lowercase();
                if layer.index.contains_key(&key) {
                    continue;
                }
                if let Some(v) = table.lookup(&key) {
                    layer.index.insert(key.clone(), layer.order.len());
                    layer.order.push(key);
                    layer.data.extend_from_slice(v);
                }
            }
        }
        layer
    }

    /// Rebuild from checkpoint contents.
    pub fn from_parts(dim: usize, order: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * order.len() {
            return Err(Error::InvalidConfig(format!(
                "embedding layer data length {} does not match {} x {}",
                data.len(),
                order.len(),
                dim
            )));
        }
        let index = order
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(EmbeddingLayer {
            dim,
            order,
            index,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.order
    }

    pub fn lookup_idx(&self, token: &str) -> Option<usize> {
        self.index
            .get(token)
            .or_else(|| self.index.get(&token.to_lowercase()))
            .copied()
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grads_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}

/// Two independent LSTM cells, one per reading direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Bilstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

#[derive(Debug, Clone)]
pub struct BilstmGrads {
    pub fwd: LstmGrads,
    pub bwd: LstmGrads,
}

#[derive(Debug, Clone)]
pub struct BilstmTape {
    fwd: LstmTape,
    bwd: LstmTape,
    len: usize,
}

impl Bilstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Bilstm {
            fwd: LstmCell::zeros(input, hidden),
            bwd: LstmCell::zeros(input, hidden),
        }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Bilstm {
            fwd: LstmCell::init(input, hidden, rng),
            bwd: LstmCell::init(input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn grads_like(&self) -> BilstmGrads {
        BilstmGrads {
            fwd: self.fwd.grads_like(),
            bwd: self.bwd.grads_like(),
        }
    }

    /// c_cap = [h_N of the forward read; h_N of the backward read].
    pub fn encode(&self, xs: &[Vec<f64>]) -> (Vec<f64>, BilstmTape) {
        let (hf, tf) = self.fwd.run(xs.iter().map(|x| x.as_slice()));
        let (hb, tb) = self.bwd.run(xs.iter().rev().map(|x| x.as_slice()));
        let mut v = hf;
        v.extend_from_slice(&hb);
        (
            v,
            BilstmTape {
                fwd: tf,
                bwd: tb,
                len: xs.len(),
            },
        )
    }

    /// Splits dv into the two direction heads and runs BPTT on each; returns
    /// dx per input position in forward order.
    pub fn backward(&self, tape: &BilstmTape, dv: &[f64], grads: &mut BilstmGrads) -> Vec<Vec<f64>> {
        let h = self.fwd.hidden;
        assert_eq!(dv.len(), 2 * h, "bilstm gradient width mismatch");
        let dxs_f = self.fwd.backward(&tape.fwd, &dv[..h], &mut grads.fwd);
        let dxs_b = self.bwd.backward(&tape.bwd, &dv[h..], &mut grads.bwd);

        let mut out = dxs_f;
        // The backward read saw positions reversed; fold its dxs back.
        for (t, dx) in dxs_b.into_iter().enumerate() {
            let pos = tape.len - 1 - t;
            for (o, d) in out[pos].iter_mut().zip(&dx) {
                *o += d;
            }
        }
        out
    }
}

/// Table-driven convenience wrapper: resolve tokens, drop OOV, encode.
pub fn encode_bilstm(tokens: &[String], table: &EmbeddingTable, cells: &Bilstm) -> Result<Vec<f64>> {
    let xs: Vec<Vec<f64>> = tokens
        .iter()
        .filter_map(|t| table.lookup(t).map(<[f64]>::to_vec))
        .collect();
    if xs.is_empty() {
        return Err(Error::AllTokensOov);
    }
    Ok(cells.encode(&xs).0)
}

/// v_cap = ReLU(W_cap c_cap + b_cap).
pub fn caption_dense(c_cap: &[f64], p: &Dense) -> Vec<f64> {
    relu(&p.forward(c_cap))
}

/// Frozen external caption vectors, keyed by caption id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedStore {
    dim: usize,
    map: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct StoreRecord {
    caption_id: String,
    vector: Vec<f64>,
}

impl PrecomputedStore {
    /// JSONL loader. Dimensions must be uniform and ids unique; this is our
    /// interchange format, so violations are fatal with the line number.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dim = None;
        let mut map = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let rec: StoreRecord =
                serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.vector.is_empty() || rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("vector for '{}' empty or non-finite", rec.caption_id)));
            }
            match dim {
                None => dim = Some(rec.vector.len()),
                Some(d) if d != rec.vector.len() => {
                    return Err(bad(format!(
                        "vector dimension {} for '{}' differs from {}",
                        rec.vector.len(),
                        rec.caption_id,
                        d
                    )))
                }
                _ => {}
            }
            if map.insert(rec.caption_id.clone(), rec.vector).is_some() {
                return Err(bad(format!("duplicate caption_id '{}'", rec.caption_id)));
            }
        }
        match dim {
            Some(dim) => Ok(PrecomputedStore { dim, map }),
            None => Err(Error::EmptyEmbeddingFile {
                path: path.to_path_buf(),
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Returns the stored vector verbatim; missing ids are fatal because a
    /// partial store silently biases every downstream metric.
    pub fn lookup(&self, caption_id: &str) -> Result<&[f64]> {
        self.map
            .get(caption_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingCaptionId(caption_id.to_string()))
    }
}
