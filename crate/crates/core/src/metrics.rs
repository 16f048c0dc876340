//! Segmentation and binary-detection scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[g * classes + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.classes..(gt + 1) * self.classes].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Accumulates another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_matrix(pred: &[usize], gt: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if p >= classes || g >= classes {
            return Err(Error::Label(format!(
                "pixel {i}: gt {g} / pred {p} outside [0, {classes})"
            )));
        }
        m.counts[g * classes + p] += 1;
    }
    Ok(m)
}

/// `(pixel_acc, class_acc)`; classes absent from the ground truth are left out of the class mean.
pub fn accuracy_metrics(m: &ConfusionMatrix) -> Result<(f64, f64)> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Evaluation("empty confusion matrix".into()));
    }
    let pixel = m.trace() as f64 / total as f64;
    let (sum, n) = (0..m.classes)
        .filter_map(|c| {
            let r = m.row_sum(c);
            (r > 0).then(|| m.get(c, c) as f64 / r as f64)
        })
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    Ok((pixel, sum / n as f64))
}

/// Binary detection scores at the MaxF operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub max_f: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub fnr: f64,
    /// Score threshold achieving `max_f` (positive when `score >= threshold`).
    pub threshold: f64,
}

/// One point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub f1: f64,
}

impl OperatingPoint {
    fn from_counts(threshold: f64, tp: u64, fp: u64, pos: u64, neg: u64) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / pos as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            threshold,
            precision,
            recall,
            fpr: fp as f64 / neg as f64,
            fnr: 1.0 - recall,
            f1,
        }
    }
}

fn check_binary(scores: &[f64], gt: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            gt.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("score {i} is not finite")));
    }
    let pos = gt.iter().filter(|&&g| g).count() as u64;
    let neg = gt.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation(
            "binary metrics need both classes in the ground truth".into(),
        ));
    }
    Ok((pos, neg))
}

/// Operating points from the `+inf` sentinel down to the lowest distinct score
/// (recall non-decreasing along the returned vector).
pub fn threshold_sweep(scores: &[f64], gt: &[bool]) -> Result<Vec<OperatingPoint>> {
    let (pos, neg) = check_binary(scores, gt)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![OperatingPoint::from_counts(f64::INFINITY, 0, 0, pos, neg)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint::from_counts(t, tp, fp, pos, neg));
    }
    Ok(points)
}

/// MaxF, step-wise AP and the rates at the MaxF threshold (lowest threshold on ties).
pub fn binary_curve_metrics(scores: &[f64], gt: &[bool]) -> Result<BinaryMetrics> {
    let points = threshold_sweep(scores, gt)?;
    let mut ap = 0.0;
    for w in points.windows(2) {
        ap += (w[1].recall - w[0].recall) * w[1].precision;
    }
    // points run from high to low threshold, so `>=` keeps the lowest on ties
    let mut best = points[0];
    for p in &points[1..] {
        if p.f1 >= best.f1 {
            best = *p;
        }
    }
    Ok(BinaryMetrics {
        max_f: best.f1,
        ap,
        precision: best.precision,
        recall: best.recall,
        fpr: best.fpr,
        fnr: best.fnr,
        threshold: best.threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub pixel_accuracy: f64,
    pub class_accuracy: f64,
    pub binary: Option<BinaryMetrics>,
}

impl MetricsReport {
    /// `scores` (probability of class 1 per pixel) is only used when there are 2 classes.
    pub fn evaluate(
        pred: &[usize],
        gt: &[usize],
        classes: usize,
        scores: Option<&[f64]>,
    ) -> Result<Self> {
        let confusion = confusion_matrix(pred, gt, classes)?;
        Self::from_confusion(confusion, scores.map(|s| (s, gt)))
    }

    pub fn from_confusion(
        confusion: ConfusionMatrix,
        scores: Option<(&[f64], &[usize])>,
    ) -> Result<Self> {
        let (pixel_accuracy, class_accuracy) = accuracy_metrics(&confusion)?;
        let binary = match scores {
            Some((s, gt)) if confusion.classes == 2 => {
                let gt: Vec<bool> = gt.iter().map(|&g| g == 1).collect();
                Some(binary_curve_metrics(s, &gt)?)
            }
            _ => None,
        };
        Ok(Self {
            confusion,
            pixel_accuracy,
            class_accuracy,
            binary,
        })
    }

    pub const CSV_HEADER: &'static str = "pixel_acc,class_acc,maxf,ap,pre,rec,fpr,fnr";

    /// Values in `CSV_HEADER` order; binary columns empty when absent.
    pub fn csv_row(&self) -> String {
        let mut s = format!("{:.8},{:.8}", self.pixel_accuracy, self.class_accuracy);
        match &self.binary {
            Some(b) => {
                for v in [b.max_f, b.ap, b.precision, b.recall, b.fpr, b.fnr] {
                    let _ = write!(s, ",{v:.8}");
                }
            }
            None => s.push_str(",,,,,,"),
        }
        s
    }
}
