//! Multi-label metrics and the evaluation protocol drivers.

mod protocol;

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

pub use protocol::{
    aggregate, cell_seeds, run_eval_fix, run_eval_stream, run_fix_cell, run_stream_cell, Aggregate,
    CellLogEntry, CellOutput, MetricRecord, MetricSummary, ModelSettings, ProtocolConfig, ResultTable,
    RESULTS_CSV_HEADER, SPLIT_STREAM, SPLIT_TEST, SPLIT_TEST_PERIOD,
};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::{targets_matrix, ModelState};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Probabilities and the binary decisions derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub scores: Tensor,
    pub decisions: Tensor,
    pub threshold: f64,
}

impl PredictionSet {
    /// `decisions[i][j] = 1` iff `scores[i][j] > threshold`.
    pub fn from_scores(scores: Tensor, threshold: f64) -> Self {
        let mut decisions = Tensor::zeros(scores.shape());
        for (d, &s) in decisions.data_mut().iter_mut().zip(scores.data()) {
            *d = if s > threshold { 1.0 } else { 0.0 };
        }
        PredictionSet {
            scores,
            decisions,
            threshold,
        }
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_binary(t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::InvalidArgument("matrix must be binary".into()));
    }
    Ok(())
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per-label (tp, fp, fn) counts.
fn confusion(targets: &Tensor, decisions: &Tensor) -> Vec<(u64, u64, u64)> {
    let cols = targets.cols();
    let mut counts = vec![(0, 0, 0); cols];
    for (i, (&y, &p)) in targets.data().iter().zip(decisions.data()).enumerate() {
        let c = &mut counts[i % cols];
        match (y == 1.0, p == 1.0) {
            (true, true) => c.0 += 1,
            (false, true) => c.1 += 1,
            (true, false) => c.2 += 1,
            (false, false) => {}
        }
    }
    counts
}

/// F1 over TP/FP/FN pooled across all cells.
pub fn micro_f1(targets: &Tensor, decisions: &Tensor) -> Result<f64> {
    check_pair(targets, decisions)?;
    check_binary(targets)?;
    check_binary(decisions)?;
    let (tp, fp, fn_) = confusion(targets, decisions)
        .into_iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(f1(tp, fp, fn_))
}

/// Unweighted mean of per-label F1 (a label with no positives and no
/// predictions scores 0).
pub fn macro_f1(targets: &Tensor, decisions: &Tensor) -> Result<f64> {
    check_pair(targets, decisions)?;
    check_binary(targets)?;
    check_binary(decisions)?;
    let per_label = confusion(targets, decisions);
    if per_label.is_empty() {
        return Ok(0.0);
    }
    Ok(per_label.iter().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).sum::<f64>() / per_label.len() as f64)
}

/// Mean over documents with at least one true label of the fraction of true
/// labels among the `R` highest-scored labels, `R` being the number of true
/// labels. Ties in score go to the lower label id.
pub fn mean_r_precision(targets: &Tensor, scores: &Tensor) -> Result<f64> {
    check_pair(targets, scores)?;
    check_binary(targets)?;
    let cols = targets.cols();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..targets.rows() {
        let y = targets.row(i);
        let r = y.iter().filter(|&&v| v == 1.0).count();
        if r == 0 {
            continue;
        }
        let s = scores.row(i);
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let hits = order[..r].iter().filter(|&&j| y[j] == 1.0).count();
        total += hits as f64 / r as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::NoPositiveDocuments);
    }
    Ok(total / counted as f64)
}

/// Appends a column that is 1 exactly where a row has no positive entry, to
/// both matrices.
pub fn augment_no_positive(targets: &Tensor, decisions: &Tensor) -> Result<(Tensor, Tensor)> {
    check_pair(targets, decisions)?;
    let widen = |m: &Tensor| -> Tensor {
        let (rows, cols) = (m.rows(), m.cols());
        let mut out = Tensor::zeros(&[rows, cols + 1]);
        for i in 0..rows {
            let row = m.row(i);
            let dst = out.row_mut(i);
            dst[..cols].copy_from_slice(row);
            dst[cols] = if row.iter().all(|&x| x == 0.0) { 1.0 } else { 0.0 };
        }
        out
    };
    Ok((widen(targets), widen(decisions)))
}

/// Extra score column for ranking metrics after augmentation: the
/// probability mass left by the most confident real label.
fn augment_scores(scores: &Tensor) -> Tensor {
    let (rows, cols) = (scores.rows(), scores.cols());
    let mut out = Tensor::zeros(&[rows, cols + 1]);
    for i in 0..rows {
        let row = scores.row(i);
        let dst = out.row_mut(i);
        dst[..cols].copy_from_slice(row);
        dst[cols] = 1.0 - row.iter().copied().fold(0.0, f64::max);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub mrp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Add the "no positive label" column before scoring.
    pub extra_label: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: DEFAULT_THRESHOLD,
            extra_label: false,
        }
    }
}

/// All three metrics for a prediction set against binary targets.
pub fn score_predictions(targets: &Tensor, preds: &PredictionSet, extra_label: bool) -> Result<Scores> {
    let (targets, decisions, scores) = if extra_label {
        let (t, d) = augment_no_positive(targets, &preds.decisions)?;
        (t, d, augment_scores(&preds.scores))
    } else {
        (
            targets.clone(),
            preds.decisions.clone(),
            preds.scores.clone(),
        )
    };
    Ok(Scores {
        macro_f1: macro_f1(&targets, &decisions)?,
        micro_f1: micro_f1(&targets, &decisions)?,
        mrp: mean_r_precision(&targets, &scores)?,
    })
}

pub fn predict<T: Borrow<Document>>(model: &ModelState, docs: &[T], threshold: f64) -> Result<PredictionSet> {
    Ok(PredictionSet::from_scores(model.predict_proba(docs)?, threshold))
}

pub fn evaluate<T: Borrow<Document>>(model: &ModelState, docs: &[T], options: EvalOptions) -> Result<Scores> {
    let preds = predict(model, docs, options.threshold)?;
    let targets = targets_matrix(docs, model.config().n_labels);
    score_predictions(&targets, &preds, options.extra_label)
}

/// Validation macro-F1 used for model selection.
pub fn validation_macro_f1<T: Borrow<Document>>(
    model: &ModelState,
    docs: &[T],
    options: EvalOptions,
) -> Result<f64> {
    let preds = predict(model, docs, options.threshold)?;
    let targets = targets_matrix(docs, model.config().n_labels);
    if options.extra_label {
        let (t, d) = augment_no_positive(&targets, &preds.decisions)?;
        macro_f1(&t, &d)
    } else {
        macro_f1(&targets, &preds.decisions)
    }
}
