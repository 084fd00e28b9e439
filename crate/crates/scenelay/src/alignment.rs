//! Dataset construction: aligning concept triplets to caption tokens.
//!
//! A `ConceptTriplet` pairs a (subject, relation, object) annotation with the
//! pixel boxes of the two participants. For each triplet we pick, among the
//! image's captions, the token that is most cosine-similar to each term, keep
//! the caption whose three similarities sum highest, and reject the triplet
//! when the similarities fall below a threshold. Accepted triplets become
//! `Instance` records with normalized, mirror-canonicalized boxes.
//!
//! Every choice breaks ties toward the smallest index, so a build is a pure
//! function of its inputs.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, EmbeddingTable};
use crate::error::{Error, Result};
use crate::geometry::{self, mirror_pair, normalize_box, BBox, PixelBox};

/// Relations that take no real second argument and were annotated with a
/// placeholder object; triplets using them are dropped.
pub const DEFAULT_BANNED: [&str; 5] = ["look", "run", "smile", "stand", "walk"];

/// One annotated subject-relation-object pair, as read from the triplets file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTriplet {
    pub image_id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(with = "geometry::pixelbox_array")]
    pub subject_box: PixelBox,
    #[serde(with = "geometry::pixelbox_array")]
    pub object_box: PixelBox,
    pub image_w: f64,
    pub image_h: f64,
}

impl ConceptTriplet {
    /// A record must have non-empty terms, positive finite image dims, and
    /// well-ordered finite boxes before any alignment is attempted.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, term) in [
            ("subject", &self.subject),
            ("relation", &self.relation),
            ("object", &self.object),
        ] {
            if term.trim().is_empty() {
                return Err(format!("{name} term is empty"));
            }
        }
        if !(self.image_w.is_finite() && self.image_h.is_finite())
            || self.image_w <= 0.0
            || self.image_h <= 0.0
        {
            return Err(format!(
                "image dims {}x{} are not positive finite",
                self.image_w, self.image_h
            ));
        }
        for (name, b) in [("subject_box", self.subject_box), ("object_box", self.object_box)] {
            let finite = [b.xmin, b.ymin, b.xmax, b.ymax].iter().all(|v| v.is_finite());
            if !finite || !b.is_well_ordered() {
                return Err(format!("{name} is not a well-ordered finite box"));
            }
        }
        Ok(())
    }
}

/// All captions of one image, tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSet {
    pub image_id: String,
    pub captions: Vec<Vec<String>>,
}

impl CaptionSet {
    pub fn from_raw(image_id: &str, raw: &[String]) -> Self {
        CaptionSet {
            image_id: image_id.to_string(),
            captions: raw.iter().map(|c| tokenize(c)).collect(),
        }
    }
}

/// Lowercase, delete ASCII punctuation, split on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Embedding vectors of the three triplet terms.
pub struct TermVecs<'a> {
    pub subject: &'a [f64],
    pub relation: &'a [f64],
    pub object: &'a [f64],
}

impl<'a> TermVecs<'a> {
    /// Err carries the first term missing from the vocabulary.
    pub fn lookup(t: &ConceptTriplet, table: &'a EmbeddingTable) -> std::result::Result<Self, String> {
        let get = |term: &str| table.lookup(term).ok_or_else(|| term.to_string());
        Ok(TermVecs {
            subject: get(&t.subject)?,
            relation: get(&t.relation)?,
            object: get(&t.object)?,
        })
    }
}

/// Where each term landed in one caption, and how similar it was there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentScore {
    pub caption_index: usize,
    pub j_subject: usize,
    pub j_relation: usize,
    pub j_object: usize,
    pub sc_subject: f64,
    pub sc_relation: f64,
    pub sc_object: f64,
}

impl AlignmentScore {
    pub fn sum(&self) -> f64 {
        self.sc_subject + self.sc_relation + self.sc_object
    }
}

/// Token with the highest cosine similarity to `term_vec`; ties go to the
/// smallest index. `None` when no token of the caption is in the vocabulary.
pub fn best_token(
    term_vec: &[f64],
    caption: &[String],
    table: &EmbeddingTable,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, tok) in caption.iter().enumerate() {
        if let Some(v) = table.lookup(tok) {
            let sc = cosine(term_vec, v);
            if best.is_none_or(|(_, b)| sc > b) {
                best = Some((j, sc));
            }
        }
    }
    best
}

/// Align all three terms against one caption.
pub fn score_caption(
    terms: &TermVecs,
    caption_index: usize,
    caption: &[String],
    table: &EmbeddingTable,
) -> Option<AlignmentScore> {
    let (j_subject, sc_subject) = best_token(terms.subject, caption, table)?;
    let (j_relation, sc_relation) = best_token(terms.relation, caption, table)?;
    let (j_object, sc_object) = best_token(terms.object, caption, table)?;
    Some(AlignmentScore {
        caption_index,
        j_subject,
        j_relation,
        j_object,
        sc_subject,
        sc_relation,
        sc_object,
    })
}

/// Caption whose alignment maximizes `sc_S + sc_R + sc_O`; ties go to the
/// smallest caption index. `None` when a term is out of vocabulary or no
/// caption has an in-vocabulary token.
pub fn select_caption(
    t: &ConceptTriplet,
    caps: &CaptionSet,
    table: &EmbeddingTable,
) -> Option<AlignmentScore> {
    let terms = TermVecs::lookup(t, table).ok()?;
    select_from_vecs(&terms, caps, table)
}

fn select_from_vecs(
    terms: &TermVecs,
    caps: &CaptionSet,
    table: &EmbeddingTable,
) -> Option<AlignmentScore> {
    let mut best: Option<AlignmentScore> = None;
    for (i, caption) in caps.captions.iter().enumerate() {
        if let Some(score) = score_caption(terms, i, caption, table) {
            if best.is_none_or(|b| score.sum() > b.sum()) {
                best = Some(score);
            }
        }
    }
    best
}

/// Which similarities the acceptance threshold applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// Subject and object must each pass (the default).
    SubjectObject,
    /// All three terms must pass.
    All,
    /// The three-way sum must pass.
    Sum,
}

impl ThresholdScope {
    /// Value the threshold is compared against.
    pub fn observed(&self, s: &AlignmentScore) -> f64 {
        match self {
            ThresholdScope::SubjectObject => s.sc_subject.min(s.sc_object),
            ThresholdScope::All => s.sc_subject.min(s.sc_relation).min(s.sc_object),
            ThresholdScope::Sum => s.sum(),
        }
    }

    /// Upper end of the valid threshold range: 1 for per-term scopes, 3 for
    /// the sum of three cosines.
    pub fn max_threshold(&self) -> f64 {
        match self {
            ThresholdScope::Sum => 3.0,
            _ => 1.0,
        }
    }
}

impl FromStr for ThresholdScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "so" => Ok(ThresholdScope::SubjectObject),
            "sro" => Ok(ThresholdScope::All),
            "sum" => Ok(ThresholdScope::Sum),
            other => Err(Error::InvalidConfig(format!(
                "unknown threshold scope '{other}' (expected so, sro, or sum)"
            ))),
        }
    }
}

/// Filtering knobs for a build.
#[derive(Debug, Clone)]
pub struct AlignConfig {
    pub threshold: f64,
    pub scope: ThresholdScope,
    /// Lowercased relation terms to drop outright.
    pub banned: HashSet<String>,
}

impl AlignConfig {
    pub fn new(threshold: f64, scope: ThresholdScope, banned: HashSet<String>) -> Result<Self> {
        if !threshold.is_finite() || threshold < 0.0 || threshold > scope.max_threshold() {
            return Err(Error::InvalidConfig(format!(
                "threshold {threshold} outside [0, {}]",
                scope.max_threshold()
            )));
        }
        Ok(AlignConfig {
            threshold,
            scope,
            banned,
        })
    }

    pub fn default_banned() -> HashSet<String> {
        DEFAULT_BANNED.iter().map(|s| s.to_string()).collect()
    }

    pub fn passes(&self, s: &AlignmentScore) -> bool {
        self.scope.observed(s) >= self.threshold
    }
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            threshold: 0.75,
            scope: ThresholdScope::SubjectObject,
            banned: Self::default_banned(),
        }
    }
}

/// Why a triplet was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BannedAction,
    Oov,
    NoCaptions,
    LowSimilarity,
    DegeneratePair,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub reason: RejectReason,
    pub image_id: String,
    pub detail: String,
}

impl Rejection {
    fn new(reason: RejectReason, t: &ConceptTriplet, detail: impl Into<String>) -> Self {
        Rejection {
            reason,
            image_id: t.image_id.clone(),
            detail: detail.into(),
        }
    }
}

/// The three terms, carried through to the instance record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletTerms {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// Similarities of the selected alignment, carried for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermScores {
    pub sc_s: f64,
    pub sc_r: f64,
    pub sc_o: f64,
}

/// One training example. Boxes are normalized and mirror-canonicalized;
/// `subj_idx`, `rel_idx`, `obj_idx` point into `tokens`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub subj_idx: usize,
    pub rel_idx: usize,
    pub obj_idx: usize,
    #[serde(with = "geometry::bbox_array")]
    pub subject_box: BBox,
    #[serde(with = "geometry::bbox_array")]
    pub object_box: BBox,
    pub mirrored: bool,
    pub triplet: TripletTerms,
    pub scores: TermScores,
}

/// Rejection tallies by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub banned_action: usize,
    pub oov: usize,
    pub no_captions: usize,
    pub low_similarity: usize,
    pub degenerate_pair: usize,
    pub malformed: usize,
}

impl RejectionCounts {
    pub fn bump(&mut self, reason: RejectReason) {
        match reason {
            RejectReason::BannedAction => self.banned_action += 1,
            RejectReason::Oov => self.oov += 1,
            RejectReason::NoCaptions => self.no_captions += 1,
            RejectReason::LowSimilarity => self.low_similarity += 1,
            RejectReason::DegeneratePair => self.degenerate_pair += 1,
            RejectReason::Malformed => self.malformed += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.banned_action
            + self.oov
            + self.no_captions
            + self.low_similarity
            + self.degenerate_pair
            + self.malformed
    }
}

/// Corpus statistics of one build. `images` and `captions_used` count only
/// what accepted instances touch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub triplets_total: usize,
    pub instances: usize,
    pub images: usize,
    pub captions_used: usize,
    pub captions_per_image: f64,
    pub pairs_per_caption: f64,
    /// Instances whose relation landed on the same token as the subject or
    /// object.
    pub shared_token_instances: usize,
    pub rejections: RejectionCounts,
}

fn align_triplet(
    t: &ConceptTriplet,
    caps: &CaptionSet,
    table: &EmbeddingTable,
    cfg: &AlignConfig,
) -> std::result::Result<(Instance, usize), Rejection> {
    if let Err(msg) = t.validate() {
        return Err(Rejection::new(RejectReason::Malformed, t, msg));
    }
    if cfg.banned.contains(&t.relation.to_lowercase()) {
        return Err(Rejection::new(
            RejectReason::BannedAction,
            t,
            format!("relation '{}' is banned", t.relation),
        ));
    }
    let terms = TermVecs::lookup(t, table).map_err(|term| {
        Rejection::new(RejectReason::Oov, t, format!("term '{term}' not in vocabulary"))
    })?;
    let score = select_from_vecs(&terms, caps, table).ok_or_else(|| {
        Rejection::new(RejectReason::NoCaptions, t, "no caption with in-vocabulary tokens")
    })?;
    if !cfg.passes(&score) {
        return Err(Rejection::new(
            RejectReason::LowSimilarity,
            t,
            format!(
                "observed {:.4} < threshold {:.4}",
                cfg.scope.observed(&score),
                cfg.threshold
            ),
        ));
    }
    if score.j_subject == score.j_object {
        return Err(Rejection::new(
            RejectReason::DegeneratePair,
            t,
            format!("subject and object both align to token {}", score.j_subject),
        ));
    }

    let to_reject = |e: Error| Rejection::new(RejectReason::Malformed, t, e.to_string());
    let sb = normalize_box(t.subject_box, t.image_w, t.image_h).map_err(to_reject)?;
    let ob = normalize_box(t.object_box, t.image_w, t.image_h).map_err(to_reject)?;
    let (subject_box, object_box, mirrored) = mirror_pair(sb, ob);

    let inst = Instance {
        image_id: t.image_id.clone(),
        tokens: caps.captions[score.caption_index].clone(),
        subj_idx: score.j_subject,
        rel_idx: score.j_relation,
        obj_idx: score.j_object,
        subject_box,
        object_box,
        mirrored,
        triplet: TripletTerms {
            subject: t.subject.clone(),
            relation: t.relation.clone(),
            object: t.object.clone(),
        },
        scores: TermScores {
            sc_s: score.sc_subject,
            sc_r: score.sc_relation,
            sc_o: score.sc_object,
        },
    };
    Ok((inst, score.caption_index))
}

/// Build one instance, or say why it was rejected. Checks run in the order
/// malformed, banned action, OOV, no captions, low similarity, degenerate
/// pair; a triplet is counted once, under the first failure.
pub fn build_instance(
    t: &ConceptTriplet,
    caps: &CaptionSet,
    table: &EmbeddingTable,
    cfg: &AlignConfig,
) -> std::result::Result<Instance, Rejection> {
    align_triplet(t, caps, table, cfg).map(|(inst, _)| inst)
}

/// Align every triplet. Output order follows input order regardless of
/// `jobs`, so builds are byte-reproducible.
pub fn build_dataset(
    triplets: &[ConceptTriplet],
    captions: &HashMap<String, CaptionSet>,
    table: &EmbeddingTable,
    cfg: &AlignConfig,
    jobs: usize,
) -> (Vec<Instance>, BuildReport) {
    let align = |t: &ConceptTriplet| match captions.get(&t.image_id) {
        Some(caps) => align_triplet(t, caps, table, cfg),
        None => Err(Rejection::new(RejectReason::NoCaptions, t, "image has no captions")),
    };

    let results: Vec<std::result::Result<(Instance, usize), Rejection>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("building a thread pool only fails on resource exhaustion");
        pool.install(|| triplets.par_iter().map(align).collect())
    } else {
        triplets.iter().map(align).collect()
    };

    let mut instances = Vec::new();
    let mut report = BuildReport {
        triplets_total: triplets.len(),
        ..BuildReport::default()
    };
    let mut images = HashSet::new();
    let mut caps_used = HashSet::new();
    for r in results {
        match r {
            Ok((inst, caption_index)) => {
                images.insert(inst.image_id.clone());
                caps_used.insert((inst.image_id.clone(), caption_index));
                if inst.rel_idx == inst.subj_idx || inst.rel_idx == inst.obj_idx {
                    report.shared_token_instances += 1;
                }
                instances.push(inst);
            }
            Err(rej) => report.rejections.bump(rej.reason),
        }
    }
    report.instances = instances.len();
    report.images = images.len();
    report.captions_used = caps_used.len();
    report.captions_per_image = ratio(report.captions_used, report.images);
    report.pairs_per_caption = ratio(report.instances, report.captions_used);
    (instances, report)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Human-readable sample of `n` instances drawn without replacement with a
/// seeded shuffle, printed in dataset order. `n == 0` yields an empty string.
pub fn audit_sample(instances: &[Instance], n: usize, seed: u64) -> Result<String> {
    if n > instances.len() {
        return Err(Error::SampleTooLarge {
            n,
            len: instances.len(),
        });
    }
    let mut idx: Vec<usize> = (0..instances.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();

    let mut out = String::new();
    for i in idx {
        let inst = &instances[i];
        out.push_str(&format!(
            "[{i}] image={} triplet=({}, {}, {}) mirrored={} sc_s={:.4} sc_r={:.4} sc_o={:.4}\n",
            inst.image_id,
            inst.triplet.subject,
            inst.triplet.relation,
            inst.triplet.object,
            inst.mirrored,
            inst.scores.sc_s,
            inst.scores.sc_r,
            inst.scores.sc_o,
        ));
        out.push_str(&format!("    {}\n\n", mark_tokens(inst)));
    }
    Ok(out)
}

fn mark_tokens(inst: &Instance) -> String {
    inst.tokens
        .iter()
        .enumerate()
        .map(|(j, tok)| {
            let mut roles = Vec::new();
            if j == inst.subj_idx {
                roles.push("S");
            }
            if j == inst.rel_idx {
                roles.push("R");
            }
            if j == inst.obj_idx {
                roles.push("O");
            }
            if roles.is_empty() {
                tok.clone()
            } else {
                format!("[{}|{}]", roles.join(","), tok)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Deserialize)]
struct CaptionRecord {
    image_id: String,
    captions: Vec<String>,
}

/// Read the triplets file. Lines that fail to parse are counted, not fatal;
/// blank lines are skipped.
pub fn read_triplets(path: &Path) -> Result<(Vec<ConceptTriplet>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut triplets = Vec::new();
    let mut malformed = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ConceptTriplet>(&line) {
            Ok(t) => triplets.push(t),
            Err(_) => malformed += 1,
        }
    }
    Ok((triplets, malformed))
}

/// Read the captions file into a map keyed by image id, tokenizing as we go.
/// Repeated ids append their captions in file order.
pub fn read_caption_sets(path: &Path) -> Result<(HashMap<String, CaptionSet>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets: HashMap<String, CaptionSet> = HashMap::new();
    let mut malformed = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CaptionRecord>(&line) {
            Ok(rec) => {
                let set = CaptionSet::from_raw(&rec.image_id, &rec.captions);
                sets.entry(rec.image_id)
                    .and_modify(|s| s.captions.extend(set.captions.clone()))
                    .or_insert(set);
            }
            Err(_) => malformed += 1,
        }
    }
    Ok((sets, malformed))
}

/// Write instances as JSONL, one per line, in order.
pub fn write_instances<W: Write>(mut w: W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        let line = serde_json::to_string(inst)
            .map_err(|e| Error::Msg(format!("serializing instance: {e}")))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::Msg(format!("writing instances: {e}")))?;
    }
    Ok(())
}

/// Read a dataset back. This is our own format, so malformed lines are fatal.
pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str::<Instance>(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// Read a banned-relations file: one term per line, trimmed and lowercased;
/// blank lines and `#` comments are skipped.
pub fn load_banned(path: &Path) -> Result<HashSet<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut banned = HashSet::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let term = line.trim();
        if term.is_empty() || term.starts_with('#') {
            continue;
        }
        banned.insert(term.to_lowercase());
    }
    Ok(banned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    // Hand-planted unit vectors over a 4-dim basis. Cosines below are exact
    // dot products because every vector has unit norm.
    fn fixture_table() -> EmbeddingTable {
        let entries = vec![
            ("person".to_string(), vec![1.0, 0.0, 0.0, 0.0]),
            ("read".to_string(), vec![0.0, 1.0, 0.0, 0.0]),
            ("book".to_string(), vec![0.0, 0.0, 1.0, 0.0]),
            ("man".to_string(), vec![0.9, 0.19f64.sqrt(), 0.0, 0.0]),
            ("reading".to_string(), vec![0.0, 0.8, 0.6, 0.0]),
            ("novel".to_string(), vec![0.0, 0.6, 0.8, 0.0]),
            ("a".to_string(), vec![0.0, 0.0, 0.0, 1.0]),
            ("park".to_string(), vec![0.5, 0.0, 0.0, 0.75f64.sqrt()]),
            ("woman".to_string(), vec![0.85, 0.0, (1.0f64 - 0.7225).sqrt(), 0.0]),
        ];
        EmbeddingTable::from_entries(4, entries).unwrap()
    }

    fn triplet(image_id: &str, s: &str, r: &str, o: &str) -> ConceptTriplet {
        ConceptTriplet {
            image_id: image_id.to_string(),
            subject: s.to_string(),
            relation: r.to_string(),
            object: o.to_string(),
            subject_box: PixelBox::new(60.0, 10.0, 80.0, 30.0),
            object_box: PixelBox::new(10.0, 40.0, 30.0, 60.0),
            image_w: 100.0,
            image_h: 100.0,
        }
    }

    fn caption_set(image_id: &str, raw: &[&str]) -> CaptionSet {
        let owned: Vec<String> = raw.iter().map(|s| s.to_string()).collect();
        CaptionSet::from_raw(image_id, &owned)
    }

    fn cfg(threshold: f64, scope: ThresholdScope) -> AlignConfig {
        AlignConfig::new(threshold, scope, AlignConfig::default_banned()).unwrap()
    }

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("A man, reading a book."),
            vec!["a", "man", "reading", "a", "book"]
        );
        assert_eq!(tokenize("Don't STOP!!"), vec!["dont", "stop"]);
        assert_eq!(tokenize("   "), Vec::<String>::new());
        assert_eq!(tokenize(""), Vec::<String>::new());
    }

    #[test]
    fn best_token_matches_exhaustive_argmax() {
        // Independent oracle: recompute every cosine with a local dot product
        // and take the argmax by enumeration.
        let table = fixture_table();
        let caption = tokenize("a man reading a novel");
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        for term in ["person", "read", "book"] {
            let tv = table.lookup(term).unwrap();
            let mut expect: Option<(usize, f64)> = None;
            for (j, tok) in caption.iter().enumerate() {
                if let Some(v) = table.lookup(tok) {
                    let sc = dot(tv, v);
                    if expect.is_none_or(|(_, b)| sc > b) {
                        expect = Some((j, sc));
                    }
                }
            }
            let got = best_token(tv, &caption, &table).unwrap();
            let expect = expect.unwrap();
            assert_eq!(got.0, expect.0, "term {term}");
            assert_abs_diff_eq!(got.1, expect.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn best_token_breaks_ties_toward_smallest_index() {
        let table = fixture_table();
        let caption = tokenize("book book");
        let (j, sc) = best_token(table.lookup("book").unwrap(), &caption, &table).unwrap();
        assert_eq!(j, 0);
        assert_abs_diff_eq!(sc, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn best_token_none_when_caption_all_oov() {
        let table = fixture_table();
        let caption = tokenize("zzz qqq");
        assert!(best_token(table.lookup("book").unwrap(), &caption, &table).is_none());
    }

    #[test]
    fn score_caption_places_all_three_terms() {
        let table = fixture_table();
        let t = triplet("i0", "person", "read", "book");
        let terms = TermVecs::lookup(&t, &table).unwrap();
        let caption = tokenize("a man reading a novel");
        let s = score_caption(&terms, 0, &caption, &table).unwrap();
        assert_eq!((s.j_subject, s.j_relation, s.j_object), (1, 2, 4));
        assert_abs_diff_eq!(s.sc_subject, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sc_relation, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sc_object, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn select_caption_takes_highest_sum_and_skips_oov_captions() {
        let table = fixture_table();
        let t = triplet("i0", "person", "read", "book");
        // Caption 0 is entirely OOV, caption 2 sums lower than caption 1.
        let caps = caption_set(
            "i0",
            &["zzz qqq", "a man reading a novel", "a woman reading"],
        );
        let s = select_caption(&t, &caps, &table).unwrap();
        assert_eq!(s.caption_index, 1);
        assert_abs_diff_eq!(s.sum(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn select_caption_tie_prefers_earlier_caption() {
        let table = fixture_table();
        let t = triplet("i0", "person", "read", "book");
        let caps = caption_set("i0", &["a man reading a novel", "a man reading a novel"]);
        assert_eq!(select_caption(&t, &caps, &table).unwrap().caption_index, 0);
    }

    #[test]
    fn build_instance_happy_path_mirrors_and_records_alignment() {
        let table = fixture_table();
        // Subject pixel box sits right of the object, so the pair mirrors.
        let t = triplet("i0", "person", "read", "book");
        let caps = caption_set("i0", &["a man reading a novel"]);
        let inst = build_instance(&t, &caps, &table, &cfg(0.75, ThresholdScope::SubjectObject))
            .unwrap();

        assert_eq!(inst.tokens, tokenize("a man reading a novel"));
        assert_eq!((inst.subj_idx, inst.rel_idx, inst.obj_idx), (1, 2, 4));
        assert!(inst.mirrored);
        // Raw centers: subject 0.7, object 0.2; mirrored to 0.3 and 0.8.
        assert_abs_diff_eq!(inst.subject_box.cx, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(inst.object_box.cx, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(inst.subject_box.cy, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(inst.object_box.cy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(inst.scores.sc_s, 0.9, epsilon = 1e-12);
        assert_eq!(inst.triplet.relation, "read");
    }

    #[test]
    fn build_instance_rejections_by_reason() {
        let table = fixture_table();
        let caps = caption_set("i0", &["a man reading a novel"]);
        let c = cfg(0.75, ThresholdScope::SubjectObject);

        // Banned wins even though the object is also OOV.
        let banned = build_instance(&triplet("i0", "person", "walk", "xyzzy"), &caps, &table, &c);
        assert_eq!(banned.unwrap_err().reason, RejectReason::BannedAction);

        let oov = build_instance(&triplet("i0", "person", "read", "xyzzy"), &caps, &table, &c);
        assert_eq!(oov.unwrap_err().reason, RejectReason::Oov);

        let empty = caption_set("i0", &[]);
        let none = build_instance(&triplet("i0", "person", "read", "book"), &empty, &table, &c);
        assert_eq!(none.unwrap_err().reason, RejectReason::NoCaptions);

        let all_oov = caption_set("i0", &["zzz qqq"]);
        let none2 = build_instance(&triplet("i0", "person", "read", "book"), &all_oov, &table, &c);
        assert_eq!(none2.unwrap_err().reason, RejectReason::NoCaptions);

        // Best subject match is "park" at 0.5 < 0.75.
        let low_caps = caption_set("i0", &["a park a a"]);
        let low = build_instance(&triplet("i0", "person", "read", "book"), &low_caps, &table, &c);
        assert_eq!(low.unwrap_err().reason, RejectReason::LowSimilarity);

        // Subject and object both land on "woman".
        let deg_caps = caption_set("i0", &["a woman reading"]);
        let deg = build_instance(
            &triplet("i0", "person", "read", "person"),
            &deg_caps,
            &table,
            &cfg(0.0, ThresholdScope::SubjectObject),
        );
        assert_eq!(deg.unwrap_err().reason, RejectReason::DegeneratePair);

        let mut bad = triplet("i0", "person", "read", "book");
        bad.image_w = 0.0;
        let mal = build_instance(&bad, &caps, &table, &c);
        assert_eq!(mal.unwrap_err().reason, RejectReason::Malformed);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let table = fixture_table();
        let t = triplet("i0", "person", "read", "book");
        let caps = caption_set("i0", &["a man reading a novel"]);
        // sc_s = 0.9, sc_o = 0.8; a threshold exactly at the min keeps it.
        assert!(build_instance(&t, &caps, &table, &cfg(0.8, ThresholdScope::SubjectObject)).is_ok());
        assert!(
            build_instance(&t, &caps, &table, &cfg(0.8001, ThresholdScope::SubjectObject)).is_err()
        );
    }

    #[test]
    fn scopes_gate_different_terms() {
        let table = fixture_table();
        let t = triplet("i0", "person", "read", "book");
        // sc_s = 0.85, sc_r = 0.8, sc_o = 0.6 on "a woman reading".
        let caps = caption_set("i0", &["a woman reading"]);

        let so = build_instance(&t, &caps, &table, &cfg(0.7, ThresholdScope::SubjectObject));
        assert_eq!(so.unwrap_err().reason, RejectReason::LowSimilarity);

        let sum = build_instance(&t, &caps, &table, &cfg(2.2, ThresholdScope::Sum)).unwrap();
        assert_eq!(sum.rel_idx, sum.obj_idx);

        let sro = build_instance(&t, &caps, &table, &cfg(0.7, ThresholdScope::All));
        assert_eq!(sro.unwrap_err().reason, RejectReason::LowSimilarity);
    }

    #[test]
    fn align_config_rejects_out_of_range_threshold() {
        assert!(AlignConfig::new(1.2, ThresholdScope::SubjectObject, HashSet::new()).is_err());
        assert!(AlignConfig::new(-0.1, ThresholdScope::SubjectObject, HashSet::new()).is_err());
        assert!(AlignConfig::new(2.5, ThresholdScope::Sum, HashSet::new()).is_ok());
        assert!(AlignConfig::new(3.5, ThresholdScope::Sum, HashSet::new()).is_err());
        assert!(AlignConfig::new(f64::NAN, ThresholdScope::Sum, HashSet::new()).is_err());
    }

    #[test]
    fn build_dataset_counts_every_triplet_once() {
        let table = fixture_table();
        let mut captions = HashMap::new();
        captions.insert("i0".to_string(), caption_set("i0", &["a man reading a novel"]));
        captions.insert("i1".to_string(), caption_set("i1", &["a park a a"]));

        let mut bad = triplet("i0", "person", "read", "book");
        bad.image_h = -1.0;
        let triplets = vec![
            triplet("i0", "person", "read", "book"), // accepted
            triplet("i0", "person", "read", "novel"), // accepted, same caption
            triplet("i0", "person", "walk", "book"), // banned
            triplet("i0", "person", "read", "xyzzy"), // oov
            triplet("i1", "person", "read", "book"), // low similarity
            triplet("i2", "person", "read", "book"), // image has no captions
            bad,                                     // malformed
        ];

        let (instances, report) =
            build_dataset(&triplets, &captions, &table, &cfg(0.75, ThresholdScope::SubjectObject), 1);

        assert_eq!(instances.len(), 2);
        assert_eq!(report.triplets_total, 7);
        assert_eq!(report.instances, 2);
        assert_eq!(report.instances + report.rejections.total(), report.triplets_total);
        assert_eq!(report.rejections.banned_action, 1);
        assert_eq!(report.rejections.oov, 1);
        assert_eq!(report.rejections.low_similarity, 1);
        assert_eq!(report.rejections.no_captions, 1);
        assert_eq!(report.rejections.malformed, 1);
        assert_eq!(report.rejections.degenerate_pair, 0);

        // Both instances share image i0 and its only caption.
        assert_eq!(report.images, 1);
        assert_eq!(report.captions_used, 1);
        assert_abs_diff_eq!(report.captions_per_image, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.pairs_per_caption, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn shared_token_instances_are_flagged() {
        let table = fixture_table();
        let mut captions = HashMap::new();
        // Object "book" best-matches "reading" (0.6) in this caption, which is
        // also the relation token.
        captions.insert("i0".to_string(), caption_set("i0", &["a woman reading"]));
        let triplets = vec![triplet("i0", "person", "read", "book")];
        let (instances, report) = build_dataset(
            &triplets,
            &captions,
            &table,
            &cfg(0.5, ThresholdScope::SubjectObject),
            1,
        );
        assert_eq!(instances.len(), 1);
        assert_eq!(instances[0].rel_idx, instances[0].obj_idx);
        assert_eq!(report.shared_token_instances, 1);
    }

    #[test]
    fn empty_build_report_has_no_nan_ratios() {
        let table = fixture_table();
        let (instances, report) = build_dataset(
            &[],
            &HashMap::new(),
            &table,
            &cfg(0.75, ThresholdScope::SubjectObject),
            1,
        );
        assert!(instances.is_empty());
        assert_eq!(report.captions_per_image, 0.0);
        assert_eq!(report.pairs_per_caption, 0.0);
        serde_json::to_string(&report).unwrap();
    }

    fn random_corpus(
        seed: u64,
    ) -> (EmbeddingTable, Vec<ConceptTriplet>, HashMap<String, CaptionSet>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let vocab: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let entries: Vec<(String, Vec<f64>)> = vocab
            .iter()
            .map(|w| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (w.clone(), v)
            })
            .collect();
        let table = EmbeddingTable::from_entries(dim, entries).unwrap();

        let mut captions = HashMap::new();
        let mut triplets = Vec::new();
        for img in 0..6 {
            let image_id = format!("img{img}");
            let n_caps = rng.gen_range(1..4);
            let raws: Vec<String> = (0..n_caps)
                .map(|_| {
                    let len = rng.gen_range(3..8);
                    (0..len)
                        .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            captions.insert(image_id.clone(), CaptionSet::from_raw(&image_id, &raws));
            for _ in 0..rng.gen_range(1..4) {
                triplets.push(ConceptTriplet {
                    image_id: image_id.clone(),
                    subject: vocab[rng.gen_range(0..vocab.len())].clone(),
                    relation: vocab[rng.gen_range(0..vocab.len())].clone(),
                    object: vocab[rng.gen_range(0..vocab.len())].clone(),
                    subject_box: PixelBox::new(10.0, 10.0, 50.0, 60.0),
                    object_box: PixelBox::new(30.0, 20.0, 90.0, 80.0),
                    image_w: 100.0,
                    image_h: 100.0,
                });
            }
        }
        (table, triplets, captions)
    }

    #[test]
    fn build_is_independent_of_job_count() {
        let (table, triplets, captions) = random_corpus(7);
        let c = AlignConfig::new(0.3, ThresholdScope::SubjectObject, HashSet::new()).unwrap();
        let (i1, r1) = build_dataset(&triplets, &captions, &table, &c, 1);
        let (i4, r4) = build_dataset(&triplets, &captions, &table, &c, 4);
        assert_eq!(i1, i4);
        assert_eq!(r1, r4);

        let mut buf1 = Vec::new();
        let mut buf4 = Vec::new();
        write_instances(&mut buf1, &i1).unwrap();
        write_instances(&mut buf4, &i4).unwrap();
        assert_eq!(buf1, buf4);
    }

    #[test]
    fn instance_wire_format_round_trips_with_boxes_as_arrays() {
        let table = fixture_table();
        let t = triplet("i0", "person", "read", "book");
        let caps = caption_set("i0", &["a man reading a novel"]);
        let inst =
            build_instance(&t, &caps, &table, &cfg(0.75, ThresholdScope::SubjectObject)).unwrap();

        let line = serde_json::to_string(&inst).unwrap();
        let back: Instance = serde_json::from_str(&line).unwrap();
        assert_eq!(inst, back);

        let value: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(value["subject_box"].is_array());
        assert_eq!(value["subject_box"].as_array().unwrap().len(), 4);
        assert!(value["tokens"].is_array());
        assert!(value["scores"]["sc_s"].is_number());
        assert_eq!(value["triplet"]["object"], "book");
    }

    #[test]
    fn triplet_wire_format_parses_pixel_boxes_as_arrays() {
        let line = r#"{"image_id":"im1","subject":"person","relation":"read","object":"book","subject_box":[60,10,80,30],"object_box":[10,40,30,60],"image_w":100,"image_h":100}"#;
        let t: ConceptTriplet = serde_json::from_str(line).unwrap();
        assert_eq!(t.subject_box, PixelBox::new(60.0, 10.0, 80.0, 30.0));
        let back = serde_json::to_string(&t).unwrap();
        let t2: ConceptTriplet = serde_json::from_str(&back).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn jsonl_readers_count_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let tp = dir.path().join("triplets.jsonl");
        std::fs::write(
            &tp,
            concat!(
                r#"{"image_id":"im1","subject":"person","relation":"read","object":"book","subject_box":[60,10,80,30],"object_box":[10,40,30,60],"image_w":100,"image_h":100}"#,
                "\n",
                "not json\n",
                "\n",
                r#"{"image_id":"im2","subject":"cat","relation":"sit","object":"mat","subject_box":[0,0,10,10],"object_box":[5,5,20,20],"image_w":50,"image_h":50}"#,
                "\n",
            ),
        )
        .unwrap();
        let (triplets, malformed) = read_triplets(&tp).unwrap();
        assert_eq!(triplets.len(), 2);
        assert_eq!(malformed, 1);

        let cp = dir.path().join("captions.jsonl");
        std::fs::write(
            &cp,
            concat!(
                r#"{"image_id":"im1","captions":["A man reading.","A park."]}"#,
                "\n",
                r#"{"image_id":"im1","captions":["Another view."]}"#,
                "\n",
                "{broken\n",
            ),
        )
        .unwrap();
        let (sets, bad) = read_caption_sets(&cp).unwrap();
        assert_eq!(bad, 1);
        let im1 = &sets["im1"];
        assert_eq!(im1.captions.len(), 3);
        assert_eq!(im1.captions[0], tokenize("A man reading."));
    }

    #[test]
    fn instances_round_trip_through_file() {
        let table = fixture_table();
        let t = triplet("i0", "person", "read", "book");
        let caps = caption_set("i0", &["a man reading a novel"]);
        let inst =
            build_instance(&t, &caps, &table, &cfg(0.75, ThresholdScope::SubjectObject)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let mut buf = Vec::new();
        write_instances(&mut buf, std::slice::from_ref(&inst)).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let back = read_instances(&path).unwrap();
        assert_eq!(back, vec![inst]);

        std::fs::write(&path, b"{broken\n").unwrap();
        assert!(matches!(
            read_instances(&path),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn audit_sample_is_seeded_and_bounded() {
        let table = fixture_table();
        let mut captions = HashMap::new();
        captions.insert("i0".to_string(), caption_set("i0", &["a man reading a novel"]));
        let triplets: Vec<ConceptTriplet> = (0..6)
            .map(|_| triplet("i0", "person", "read", "book"))
            .collect();
        let (instances, _) = build_dataset(
            &triplets,
            &captions,
            &table,
            &cfg(0.75, ThresholdScope::SubjectObject),
            1,
        );
        assert_eq!(instances.len(), 6);

        let a = audit_sample(&instances, 3, 11).unwrap();
        let b = audit_sample(&instances, 3, 11).unwrap();
        let c = audit_sample(&instances, 3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.contains("[S|man]"), "marked caption missing: {a}");
        assert!(a.contains("[R|reading]"));
        assert!(a.contains("[O|novel]"));
        assert!(a.contains("mirrored=true"));

        assert_eq!(audit_sample(&instances, 0, 11).unwrap(), "");
        assert!(matches!(
            audit_sample(&instances, 7, 11),
            Err(Error::SampleTooLarge { n: 7, len: 6 })
        ));
    }

    #[test]
    fn load_banned_trims_and_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("banned.txt");
        std::fs::write(&path, "# header\nWalk\n  run  \n\nsmile\n").unwrap();
        let banned = load_banned(&path).unwrap();
        assert_eq!(banned.len(), 3);
        assert!(banned.contains("walk"));
        assert!(banned.contains("run"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn raising_threshold_never_adds_instances(
            seed in any::<u64>(),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (table, triplets, captions) = random_corpus(seed);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let count = |t: f64| {
                let c = AlignConfig::new(t, ThresholdScope::SubjectObject, HashSet::new()).unwrap();
                build_dataset(&triplets, &captions, &table, &c, 1).0.len()
            };
            prop_assert!(count(hi) <= count(lo));
        }

        #[test]
        fn every_triplet_lands_exactly_once(seed in any::<u64>(), t in 0.0f64..1.0) {
            let (table, triplets, captions) = random_corpus(seed);
            let c = AlignConfig::new(t, ThresholdScope::SubjectObject, HashSet::new()).unwrap();
            let (instances, report) = build_dataset(&triplets, &captions, &table, &c, 1);
            prop_assert_eq!(instances.len(), report.instances);
            prop_assert_eq!(report.instances + report.rejections.total(), report.triplets_total);
            for inst in &instances {
                prop_assert!(inst.subj_idx < inst.tokens.len());
                prop_assert!(inst.rel_idx < inst.tokens.len());
                prop_assert!(inst.obj_idx < inst.tokens.len());
                prop_assert!(inst.subj_idx != inst.obj_idx);
                prop_assert!(inst.object_box.cx >= inst.subject_box.cx);
            }
        }
    }
}
