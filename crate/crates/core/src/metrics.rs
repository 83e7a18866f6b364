//! Binary change-map evaluation.
//!
//! Zero denominators resolve to 0: precision, recall and F1 with no positive
//! predictions or references, and kappa when chance agreement is 1.

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, o: &Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub overall_accuracy: f64,
    pub f1: f64,
    pub kappa: f64,
}

/// Counts over pixels where `mask` is true (all pixels without a mask).
/// The positive class is "changed".
pub fn confusion(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>, mask: Option<ArrayView2<'_, bool>>) -> Result<Confusion> {
    ensure!(pred.dim() == gt.dim(), Shape, "prediction {:?} and reference {:?} differ in shape", pred.dim(), gt.dim());
    if let Some(m) = &mask {
        ensure!(m.dim() == gt.dim(), Shape, "mask shape {:?} does not match {:?}", m.dim(), gt.dim());
        ensure!(m.iter().any(|&v| v), Input, "evaluation mask selects no pixels");
    }
    let mut c = Confusion::default();
    for ((idx, &p), &g) in pred.indexed_iter().zip(gt.iter()) {
        if mask.as_ref().is_some_and(|m| !m[idx]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    ensure!(c.total() > 0, Input, "no pixels to evaluate");
    Ok(c)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn scores(c: &Confusion) -> Result<Scores> {
    let n = c.total();
    ensure!(n > 0, Input, "confusion matrix is empty");
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let n = n as f64;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let overall_accuracy = (tp + tn) / n;
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
    let kappa = if pe == 1.0 { 0.0 } else { (overall_accuracy - pe) / (1.0 - pe) };
    Ok(Scores { precision, recall, overall_accuracy, f1, kappa })
}

pub const TABLE_HEADER: [&str; 6] = ["name", "Pre(%)", "Rec(%)", "OA(%)", "F1", "Kappa"];

pub fn csv_header() -> String {
    "name,pre_pct,rec_pct,oa_pct,f1,kappa\n".to_string()
}

pub fn csv_row(name: &str, s: &Scores) -> String {
    format!(
        "{name},{:.4},{:.4},{:.4},{:.6},{:.6}\n",
        100.0 * s.precision,
        100.0 * s.recall,
        100.0 * s.overall_accuracy,
        s.f1,
        s.kappa
    )
}

/// Fixed-width text table, one row per named result.
pub fn table(rows: &[(String, Scores)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>6}  {:>6}\n",
        TABLE_HEADER[0], TABLE_HEADER[1], TABLE_HEADER[2], TABLE_HEADER[3], TABLE_HEADER[4], TABLE_HEADER[5]
    );
    for (name, s) in rows {
        out.push_str(&format!(
            "{name:<width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>6.4}  {:>6.4}\n",
            100.0 * s.precision,
            100.0 * s.recall,
            100.0 * s.overall_accuracy,
            s.f1,
            s.kappa
        ));
    }
    out
}
