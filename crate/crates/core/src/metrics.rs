//! mAP and per-class / overall precision, recall and F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::numgrad::DenseMatrix;
use crate::scalar::Scalar;

/// How scores are turned into hard predictions for P/R/F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Threshold(f64),
    /// The k highest-scoring labels of each sample (ties by lower label index).
    TopK(usize),
}

impl Default for Decision {
    fn default() -> Self {
        Decision::Threshold(0.5)
    }
}

pub struct EvalFrame<'a, T> {
    pub scores: &'a DenseMatrix<T>,
    pub targets: &'a LabelMatrix,
    pub decision: Decision,
}

impl<'a, T: Scalar> EvalFrame<'a, T> {
    pub fn new(scores: &'a DenseMatrix<T>, targets: &'a LabelMatrix, decision: Decision) -> Result<Self> {
        if scores.shape() != (targets.rows(), targets.cols()) {
            return Err(Error::shape(
                "eval_frame",
                scores.shape(),
                (targets.rows(), targets.cols()),
            ));
        }
        Ok(Self {
            scores,
            targets,
            decision,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    #[serde(rename = "op")]
    pub op_: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub of1: f64,
    /// `None` for labels without positives.
    pub per_label_ap: Vec<Option<f64>>,
    pub excluded_labels: Vec<usize>,
}

pub const METRIC_KEYS: [&str; 7] = ["map", "cp", "cr", "cf1", "op", "or", "of1"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 7] {
        [self.map, self.cp, self.cr, self.cf1, self.op_, self.or_, self.of1]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> String {
        METRIC_KEYS.join(",")
    }

    pub fn to_csv_line(&self) -> String {
        self.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Non-interpolated AP: mean of precision@k over the ranks of the positives,
/// ranking by descending score with ties broken by ascending sample index.
/// `None` when there are no positives.
pub fn average_precision<T: Scalar>(scores: &[T], targets: &[u8]) -> Option<f64> {
    debug_assert_eq!(scores.len(), targets.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean AP over labels with at least one positive; also returns per-label AP
/// and the excluded label indices.
pub fn mean_average_precision<T: Scalar>(frame: &EvalFrame<'_, T>) -> Result<(f64, Vec<Option<f64>>, Vec<usize>)> {
    let n_labels = frame.targets.cols();
    let per_label: Vec<Option<f64>> = (0..n_labels)
        .map(|j| {
            let col: Vec<T> = (0..frame.scores.rows()).map(|i| frame.scores.get(i, j)).collect();
            average_precision(&col, &frame.targets.column(j))
        })
        .collect();
    let excluded: Vec<usize> = (0..n_labels).filter(|&j| per_label[j].is_none()).collect();
    let kept: Vec<f64> = per_label.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Contract("no label has a positive target".into()));
    }
    let map = kept.iter().sum::<f64>() / kept.len() as f64;
    Ok((map, per_label, excluded))
}

/// Binarized predictions under the frame's decision rule.
pub fn binarize<T: Scalar>(frame: &EvalFrame<'_, T>) -> LabelMatrix {
    let (n, m) = frame.scores.shape();
    let mut out = LabelMatrix::zeros(n, m);
    match frame.decision {
        Decision::Threshold(t) => {
            for i in 0..n {
                for j in 0..m {
                    out.set(i, j, frame.scores.get(i, j).as_f64() >= t);
                }
            }
        }
        Decision::TopK(k) => {
            for i in 0..n {
                let row = frame.scores.row(i);
                let mut idx: Vec<usize> = (0..m).collect();
                idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
                for &j in idx.iter().take(k) {
                    out.set(i, j, true);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrfAggregates {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

pub fn prf_aggregates<T: Scalar>(frame: &EvalFrame<'_, T>) -> PrfAggregates {
    let pred = binarize(frame);
    let (n, m) = (pred.rows(), pred.cols());
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for j in 0..m {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for i in 0..n {
            match (pred.get(i, j), frame.targets.get(i, j)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        p_sum += if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        r_sum += if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    let cp = p_sum / m as f64;
    let cr = r_sum / m as f64;
    let op = if tp_all + fp_all > 0 { tp_all as f64 / (tp_all + fp_all) as f64 } else { 0.0 };
    let or = if tp_all + fn_all > 0 { tp_all as f64 / (tp_all + fn_all) as f64 } else { 0.0 };
    PrfAggregates {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
    }
}

pub fn evaluate<T: Scalar>(frame: &EvalFrame<'_, T>) -> Result<MetricsReport> {
    if frame.scores.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation scores".into()));
    }
    let (map, per_label_ap, excluded_labels) = mean_average_precision(frame)?;
    let prf = prf_aggregates(frame);
    Ok(MetricsReport {
        map,
        cp: prf.cp,
        cr: prf.cr,
        cf1: prf.cf1,
        op_: prf.op,
        or_: prf.or,
        of1: prf.of1,
        per_label_ap,
        excluded_labels,
    })
}
