//! The six evaluation quantities, aggregated over (prediction, gold,
//! subject) triples: above/below accuracy and F1, per-axis Pearson
//! correlations of the centers, coefficient of determination over the full
//! box vector, and mean IoU. Everything is reported percent-scaled in the
//! table column order acc_y, F1_y, r_x, r_y, R2, IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Vertical relation of a box center to the subject center. Image y grows
/// downward, so a smaller cy is higher. Equal centers count as Below; ties
/// are measure-zero in real data but tests need a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Above,
    Below,
}

pub fn above_below(subject: BBox, b: BBox) -> Label {
    if b.cy < subject.cy {
        Label::Above
    } else {
        Label::Below
    }
}

/// Macro-averaged accuracy (mean per-class recall) and macro-averaged F1,
/// both in percent. A class absent from gold joins the average with value 0
/// only when it was predicted at least once; otherwise it is left out
/// entirely so that single-class data can still score 100.
pub fn acc_f1_macro(pred: &[Label], gold: &[Label]) -> Result<(f64, f64)> {
    assert_eq!(pred.len(), gold.len(), "label lists must align");
    if gold.is_empty() {
        return Err(Error::DegenerateMetric("no labels to score".into()));
    }

    let mut recalls = Vec::with_capacity(2);
    let mut f1s = Vec::with_capacity(2);
    for class in [Label::Above, Label::Below] {
        let tp = pred
            .iter()
            .zip(gold)
            .filter(|(p, g)| **p == class && **g == class)
            .count() as f64;
        let gold_n = gold.iter().filter(|g| **g == class).count() as f64;
        let pred_n = pred.iter().filter(|p| **p == class).count() as f64;

        if gold_n == 0.0 && pred_n == 0.0 {
            continue;
        }
        let recall = if gold_n > 0.0 { tp / gold_n } else { 0.0 };
        let precision = if pred_n > 0.0 { tp / pred_n } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        recalls.push(recall);
        f1s.push(f1);
    }

    let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&recalls), mean(&f1s)))
}

/// Sample Pearson correlation coefficient, unscaled.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    assert_eq!(xs.len(), ys.len(), "series must align");
    let n = xs.len();
    if n < 2 {
        return Err(Error::DegenerateMetric(format!(
            "pearson needs at least 2 points, got {n}"
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateMetric(
            "pearson undefined for a zero-variance series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Coefficient of determination, unscaled, with the dimensions that had to
/// be dropped for zero gold variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RSquared {
    pub value: f64,
    pub excluded_dims: Vec<usize>,
}

/// 1 - SS_res/SS_tot per output dimension against that dimension's gold
/// mean, averaged uniformly over the dimensions that have gold variance.
pub fn r_squared(preds: &[[f64; 4]], golds: &[[f64; 4]]) -> Result<RSquared> {
    assert_eq!(preds.len(), golds.len(), "series must align");
    let n = golds.len();
    if n < 2 {
        return Err(Error::DegenerateMetric(format!(
            "r_squared needs at least 2 points, got {n}"
        )));
    }

    let mut per_dim = Vec::with_capacity(4);
    let mut excluded = Vec::new();
    for d in 0..4 {
        let mean = golds.iter().map(|g| g[d]).sum::<f64>() / n as f64;
        let ss_tot: f64 = golds.iter().map(|g| (g[d] - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            excluded.push(d);
            continue;
        }
        let ss_res: f64 = preds
            .iter()
            .zip(golds)
            .map(|(p, g)| (p[d] - g[d]).powi(2))
            .sum();
        per_dim.push(1.0 - ss_res / ss_tot);
    }
    if per_dim.is_empty() {
        return Err(Error::DegenerateMetric(
            "every output dimension has zero gold variance".into(),
        ));
    }
    Ok(RSquared {
        value: per_dim.iter().sum::<f64>() / per_dim.len() as f64,
        excluded_dims: excluded,
    })
}

/// One scored example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalCase {
    pub pred: BBox,
    pub gold: BBox,
    pub subject: BBox,
}

/// The full percent-scaled report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_y: f64,
    pub f1_y: f64,
    pub r_x: f64,
    pub r_y: f64,
    pub r2: f64,
    pub iou: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r2_excluded_dims: Vec<usize>,
}

/// Score a result set. Both the gold and the predicted object centers are
/// labeled against the subject, correlations run over the centers, R2 over
/// the full 4-vector, IoU directly between predicted and gold boxes.
pub fn evaluate(results: &[EvalCase]) -> Result<MetricsReport> {
    let n = results.len();
    if n < 2 {
        return Err(Error::DegenerateMetric(format!(
            "evaluation needs at least 2 instances, got {n}"
        )));
    }

    let gold_labels: Vec<Label> = results.iter().map(|c| above_below(c.subject, c.gold)).collect();
    let pred_labels: Vec<Label> = results.iter().map(|c| above_below(c.subject, c.pred)).collect();
    let (acc_y, f1_y) = acc_f1_macro(&pred_labels, &gold_labels)?;

    let pred_cx: Vec<f64> = results.iter().map(|c| c.pred.cx).collect();
    let gold_cx: Vec<f64> = results.iter().map(|c| c.gold.cx).collect();
    let pred_cy: Vec<f64> = results.iter().map(|c| c.pred.cy).collect();
    let gold_cy: Vec<f64> = results.iter().map(|c| c.gold.cy).collect();
    let r_x = 100.0 * pearson(&pred_cx, &gold_cx)?;
    let r_y = 100.0 * pearson(&pred_cy, &gold_cy)?;

    let preds: Vec<[f64; 4]> = results.iter().map(|c| c.pred.to_array()).collect();
    let golds: Vec<[f64; 4]> = results.iter().map(|c| c.gold.to_array()).collect();
    let rsq = r_squared(&preds, &golds)?;

    let iou_mean = results.iter().map(|c| iou(c.pred, c.gold)).sum::<f64>() / n as f64;

    Ok(MetricsReport {
        acc_y,
        f1_y,
        r_x,
        r_y,
        r2: 100.0 * rsq.value,
        iou: 100.0 * iou_mean,
        n,
        r2_excluded_dims: rsq.excluded_dims,
    })
}

/// Uniform average of per-fold reports; excluded-dimension flags union.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::DegenerateMetric("no fold reports to aggregate".into()));
    }
    let k = reports.len() as f64;
    let mut excluded: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.r2_excluded_dims.iter().copied())
        .collect();
    excluded.sort_unstable();
    excluded.dedup();
    Ok(MetricsReport {
        acc_y: reports.iter().map(|r| r.acc_y).sum::<f64>() / k,
        f1_y: reports.iter().map(|r| r.f1_y).sum::<f64>() / k,
        r_x: reports.iter().map(|r| r.r_x).sum::<f64>() / k,
        r_y: reports.iter().map(|r| r.r_y).sum::<f64>() / k,
        r2: reports.iter().map(|r| r.r2).sum::<f64>() / k,
        iou: reports.iter().map(|r| r.iou).sum::<f64>() / k,
        n: reports.iter().map(|r| r.n).sum(),
        r2_excluded_dims: excluded,
    })
}

/// Aligned text table in the order of the result tables: one row per named
/// report, one decimal place.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once("run".len()))
        .max()
        .unwrap_or(3);
    let mut out = format!(
        "{:<name_w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "run", "acc_y", "F1_y", "r_x", "r_y", "R2", "IoU"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}\n",
            name, r.acc_y, r.f1_y, r.r_x, r.r_y, r.r2, r.iou
        ));
    }
    out
}
