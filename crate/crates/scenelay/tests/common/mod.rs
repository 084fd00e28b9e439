//! Shared fixtures for the integration suites: a synthetic keyword-rule
//! dataset the model can actually learn, a rasterized IoU oracle, and a
//! hand-planted alignment corpus with known-by-construction outcomes.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenelay::alignment::{ConceptTriplet, Instance, TermScores, TripletTerms};
use scenelay::embeddings::EmbeddingTable;
use scenelay::geometry::{BBox, PixelBox};

// ---------------------------------------------------------------------------
// Synthetic keyword-rule dataset.
//
// The object box is a pure function of the subject box and the relation
// word: "hover" places it 0.25 above, "rest" 0.25 below, always shifted
// right by half the subject's half-width and scaled to 0.6 of its size.
// A model that reads the caption and the subject box can drive the train
// error to ~0; one that ignores either cannot.
// ---------------------------------------------------------------------------

pub const SYNTH_WORDS: [&str; 8] = ["a", "disc", "ball", "kite", "crate", "hover", "rest", "near"];

pub fn synth_table_entries(dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SYNTH_WORDS
        .iter()
        .map(|w| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (w.to_string(), v)
        })
        .collect()
}

pub fn synth_table(dim: usize, seed: u64) -> EmbeddingTable {
    EmbeddingTable::from_entries(dim, synth_table_entries(dim, seed)).unwrap()
}

pub fn synth_dataset(n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = ["disc", "ball"];
    let objects = ["kite", "crate"];
    (0..n)
        .map(|i| {
            let subj = subjects[rng.gen_range(0..subjects.len())];
            let obj = objects[rng.gen_range(0..objects.len())];
            let rel = if rng.gen_bool(0.5) { "hover" } else { "rest" };
            let s = BBox::new(
                rng.gen_range(0.3..0.5),
                rng.gen_range(0.35..0.65),
                rng.gen_range(0.2..0.3),
                rng.gen_range(0.2..0.3),
            );
            let dy = if rel == "hover" { -0.25 } else { 0.25 };
            let o = BBox::new(s.cx + 0.5 * s.hw, s.cy + dy, 0.6 * s.hw, 0.6 * s.hh);
            Instance {
                image_id: format!("img{i}"),
                tokens: vec!["a".into(), obj.into(), rel.into(), "near".into(), subj.into()],
                subj_idx: 4,
                rel_idx: 2,
                obj_idx: 1,
                subject_box: s,
                object_box: o,
                mirrored: false,
                triplet: TripletTerms {
                    subject: subj.into(),
                    relation: rel.into(),
                    object: obj.into(),
                },
                scores: TermScores { sc_s: 1.0, sc_r: 1.0, sc_o: 1.0 },
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rasterized IoU oracle.
//
// Overlay a res x res grid of cell centers on the unit square and count
// membership per box. The factored form counts each axis once; the literal
// form walks every cell and exists only to cross-check the factoring.
// Both use the same centers, so their counts must agree exactly.
// ---------------------------------------------------------------------------

fn axis_count(res: usize, lo: f64, hi: f64) -> u64 {
    (0..res)
        .filter(|&i| {
            let c = (i as f64 + 0.5) / res as f64;
            lo <= c && c <= hi
        })
        .count() as u64
}

pub fn iou_grid_factored(a: BBox, b: BBox, res: usize) -> f64 {
    let ax = axis_count(res, a.cx - a.hw, a.cx + a.hw);
    let ay = axis_count(res, a.cy - a.hh, a.cy + a.hh);
    let bx = axis_count(res, b.cx - b.hw, b.cx + b.hw);
    let by = axis_count(res, b.cy - b.hh, b.cy + b.hh);
    let ix = axis_count(
        res,
        (a.cx - a.hw).max(b.cx - b.hw),
        (a.cx + a.hw).min(b.cx + b.hw),
    );
    let iy = axis_count(
        res,
        (a.cy - a.hh).max(b.cy - b.hh),
        (a.cy + a.hh).min(b.cy + b.hh),
    );
    let inter = ix * iy;
    let union = ax * ay + bx * by - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

pub fn iou_grid_literal(a: BBox, b: BBox, res: usize) -> f64 {
    let inside = |bx: BBox, x: f64, y: f64| {
        bx.cx - bx.hw <= x && x <= bx.cx + bx.hw && bx.cy - bx.hh <= y && y <= bx.cy + bx.hh
    };
    let mut in_a = 0u64;
    let mut in_b = 0u64;
    let mut in_both = 0u64;
    for i in 0..res {
        let x = (i as f64 + 0.5) / res as f64;
        for j in 0..res {
            let y = (j as f64 + 0.5) / res as f64;
            let pa = inside(a, x, y);
            let pb = inside(b, x, y);
            in_a += pa as u64;
            in_b += pb as u64;
            in_both += (pa && pb) as u64;
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        return 0.0;
    }
    in_both as f64 / union as f64
}

/// Random box pair with edges on the res-cell boundary lattice. Cell
/// centers sit strictly between boundaries, so the grid count measures each
/// area exactly and any analytic/grid disagreement beyond float rounding is
/// an interval-logic error, not discretization phase noise. Off-lattice
/// edges would put a ~1.4e-3 noise floor under the comparison at res 2000.
pub fn lattice_box_pair(rng: &mut ChaCha8Rng, res: usize) -> (BBox, BBox) {
    let fresh = |rng: &mut ChaCha8Rng| -> (usize, usize) {
        let w = rng.gen_range(res / 10..res / 2);
        let x0 = rng.gen_range(0..res - w);
        (x0, x0 + w)
    };
    // Overlap-biased: reuse the first box's position, jittered.
    let near = |rng: &mut ChaCha8Rng, a0: usize| -> (usize, usize) {
        let w = rng.gen_range(res / 10..res / 2);
        let span = res as i64 / 5;
        let x0 = (a0 as i64 + rng.gen_range(-span..=span)).clamp(0, (res - w) as i64) as usize;
        (x0, x0 + w)
    };
    let to_box = |(x0, x1): (usize, usize), (y0, y1): (usize, usize)| {
        let r = res as f64;
        BBox::new(
            (x0 + x1) as f64 / 2.0 / r,
            (y0 + y1) as f64 / 2.0 / r,
            (x1 - x0) as f64 / 2.0 / r,
            (y1 - y0) as f64 / 2.0 / r,
        )
    };
    let ax = fresh(rng);
    let ay = fresh(rng);
    let (bx, by) = if rng.gen_bool(0.5) {
        (near(rng, ax.0), near(rng, ay.0))
    } else {
        (fresh(rng), fresh(rng))
    };
    (to_box(ax, ay), to_box(bx, by))
}

// ---------------------------------------------------------------------------
// File fixture writers.
// ---------------------------------------------------------------------------

pub fn write_embeddings(path: &Path, entries: &[(String, Vec<f64>)]) {
    let mut out = String::new();
    for (tok, v) in entries {
        out.push_str(tok);
        for x in v {
            out.push(' ');
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).unwrap();
}

pub fn write_jsonl(path: &Path, lines: &[String]) {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).unwrap();
}

pub fn write_triplets(path: &Path, triplets: &[ConceptTriplet]) {
    let lines: Vec<String> =
        triplets.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
    write_jsonl(path, &lines);
}

pub fn write_captions(path: &Path, sets: &[(String, Vec<String>)]) {
    let lines: Vec<String> = sets
        .iter()
        .map(|(id, caps)| {
            serde_json::to_string(&serde_json::json!({ "image_id": id, "captions": caps }))
                .unwrap()
        })
        .collect();
    write_jsonl(path, &lines);
}

pub fn write_instances_file(path: &Path, instances: &[Instance]) {
    let lines: Vec<String> =
        instances.iter().map(|i| serde_json::to_string(i).unwrap()).collect();
    write_jsonl(path, &lines);
}

// ---------------------------------------------------------------------------
// Planted alignment corpus.
//
// Eight triplets over a four-dimensional embedding space built so every
// cosine similarity is a hand-checkable constant. Six triplets align to a
// known caption with known token indices; two are planted just below the
// 0.75 threshold (subject cos 0.7 on img7, object cos 0.7 on img8).
// ---------------------------------------------------------------------------

pub struct PlantedExpectation {
    pub image_id: &'static str,
    pub caption_index: usize,
    pub subj_idx: usize,
    pub rel_idx: usize,
    pub obj_idx: usize,
    pub scores: (f64, f64, f64),
    pub mirrored: bool,
    pub subject_box: BBox,
    pub object_box: BBox,
}

pub struct PlantedCorpus {
    pub embeddings: Vec<(String, Vec<f64>)>,
    pub triplets: Vec<ConceptTriplet>,
    pub captions: Vec<(String, Vec<String>)>,
    /// Accepted instances in input order.
    pub expected: Vec<PlantedExpectation>,
}

pub fn planted_corpus() -> PlantedCorpus {
    let s19 = 0.19f64.sqrt();
    let s2775 = 0.2775f64.sqrt();
    let s51 = 0.51f64.sqrt();
    let embeddings: Vec<(String, Vec<f64>)> = vec![
        ("person".into(), vec![1.0, 0.0, 0.0, 0.0]),
        ("hold".into(), vec![0.0, 1.0, 0.0, 0.0]),
        ("cup".into(), vec![0.0, 0.0, 1.0, 0.0]),
        ("a".into(), vec![0.0, 0.0, 0.0, 1.0]),
        ("man".into(), vec![0.9, s19, 0.0, 0.0]),
        ("woman".into(), vec![0.85, s2775, 0.0, 0.0]),
        ("boy".into(), vec![0.7, s51, 0.0, 0.0]),
        ("holding".into(), vec![0.0, 0.8, 0.6, 0.0]),
        ("mug".into(), vec![0.0, 0.6, 0.8, 0.0]),
        ("bowl".into(), vec![0.0, s51, 0.7, 0.0]),
        ("with".into(), vec![0.05, 0.1, 0.05, 0.99]),
    ];

    let t = |id: &str, sb: [f64; 4], ob: [f64; 4]| ConceptTriplet {
        image_id: id.into(),
        subject: "person".into(),
        relation: "hold".into(),
        object: "cup".into(),
        subject_box: PixelBox { xmin: sb[0], ymin: sb[1], xmax: sb[2], ymax: sb[3] },
        object_box: PixelBox { xmin: ob[0], ymin: ob[1], xmax: ob[2], ymax: ob[3] },
        image_w: 100.0,
        image_h: 100.0,
    };
    // img7 and img8 are interleaved so acceptance must preserve input order.
    let triplets = vec![
        t("img1", [10.0, 40.0, 30.0, 80.0], [60.0, 10.0, 80.0, 30.0]),
        t("img2", [60.0, 40.0, 80.0, 60.0], [10.0, 20.0, 30.0, 40.0]),
        t("img3", [20.0, 20.0, 40.0, 60.0], [50.0, 50.0, 90.0, 70.0]),
        t("img7", [10.0, 10.0, 30.0, 30.0], [60.0, 60.0, 80.0, 80.0]),
        t("img4", [40.0, 10.0, 60.0, 50.0], [40.0, 60.0, 60.0, 90.0]),
        t("img5", [5.0, 5.0, 25.0, 45.0], [70.0, 40.0, 90.0, 80.0]),
        t("img8", [10.0, 40.0, 30.0, 60.0], [60.0, 40.0, 80.0, 60.0]),
        t("img6", [55.0, 10.0, 95.0, 50.0], [15.0, 55.0, 35.0, 95.0]),
    ];

    let caps = |id: &str, c: [&str; 3]| -> (String, Vec<String>) {
        (id.into(), c.iter().map(|s| s.to_string()).collect())
    };
    let captions = vec![
        caps("img1", ["A man holding a mug.", "A woman holding a mug.", "a man a mug"]),
        caps("img2", ["a woman holding a mug", "a man holding a mug", "a man a mug"]),
        caps("img3", ["a man holding a man mug", "a woman holding a mug", "a boy holding a mug"]),
        caps("img4", ["a man with a mug", "a boy with a mug", "a boy a mug"]),
        caps("img5", ["a man a mug", "a woman holding a mug", "a man holding a mug"]),
        caps("img6", ["a woman holding a mug", "a boy holding a mug", "a boy a mug"]),
        caps("img7", ["a boy holding a mug", "a boy a mug", "a boy with a mug"]),
        caps("img8", ["a man holding a bowl", "a woman holding a bowl", "a man a bowl"]),
    ];

    let expected = vec![
        PlantedExpectation {
            image_id: "img1",
            caption_index: 0,
            subj_idx: 1,
            rel_idx: 2,
            obj_idx: 4,
            scores: (0.9, 0.8, 0.8),
            mirrored: false,
            subject_box: BBox::new(0.2, 0.6, 0.1, 0.2),
            object_box: BBox::new(0.7, 0.2, 0.1, 0.1),
        },
        PlantedExpectation {
            image_id: "img2",
            caption_index: 1,
            subj_idx: 1,
            rel_idx: 2,
            obj_idx: 4,
            scores: (0.9, 0.8, 0.8),
            mirrored: true,
            subject_box: BBox::new(0.3, 0.5, 0.1, 0.1),
            object_box: BBox::new(0.8, 0.3, 0.1, 0.1),
        },
        PlantedExpectation {
            image_id: "img3",
            // "man" appears at 1 and 4; the tie resolves to the first.
            caption_index: 0,
            subj_idx: 1,
            rel_idx: 2,
            obj_idx: 5,
            scores: (0.9, 0.8, 0.8),
            mirrored: false,
            subject_box: BBox::new(0.3, 0.4, 0.1, 0.2),
            object_box: BBox::new(0.7, 0.6, 0.2, 0.1),
        },
        PlantedExpectation {
            image_id: "img4",
            // Relation cos tops out at 0.6 ("mug"); subject-object scope
            // still accepts, and equal centers must not mirror.
            caption_index: 0,
            subj_idx: 1,
            rel_idx: 4,
            obj_idx: 4,
            scores: (0.9, 0.6, 0.8),
            mirrored: false,
            subject_box: BBox::new(0.5, 0.3, 0.1, 0.2),
            object_box: BBox::new(0.5, 0.75, 0.1, 0.15),
        },
        PlantedExpectation {
            image_id: "img5",
            caption_index: 2,
            subj_idx: 1,
            rel_idx: 2,
            obj_idx: 4,
            scores: (0.9, 0.8, 0.8),
            mirrored: false,
            subject_box: BBox::new(0.15, 0.25, 0.1, 0.2),
            object_box: BBox::new(0.8, 0.6, 0.1, 0.2),
        },
        PlantedExpectation {
            image_id: "img6",
            caption_index: 0,
            subj_idx: 1,
            rel_idx: 2,
            obj_idx: 4,
            scores: (0.85, 0.8, 0.8),
            mirrored: true,
            subject_box: BBox::new(0.25, 0.3, 0.2, 0.2),
            object_box: BBox::new(0.75, 0.75, 0.1, 0.2),
        },
    ];

    PlantedCorpus { embeddings, triplets, captions, expected }
}
