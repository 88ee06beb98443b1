//! Top-K accuracy, confusion matrices, and split evaluation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::Error;
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::{batch_tensor, Prepared};

/// Rank of `label` in `row` under descending score, ties broken in favour of
/// the lower class index. Rank 0 means the label wins outright.
pub fn label_rank<E: PartialOrd>(row: &[E], label: usize) -> usize {
    let target = &row[label];
    let mut rank = 0;
    for (j, v) in row.iter().enumerate() {
        if v > target || (v == target && j < label) {
            rank += 1;
        }
    }
    rank
}

pub fn top_k_hit<E: PartialOrd>(row: &[E], label: usize, k: usize) -> bool {
    label_rank(row, label) < k
}

/// Argmax with the same tie rule as [`label_rank`]: lowest index wins.
pub fn predict_class<E: PartialOrd>(row: &[E]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// `confusion[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub per_class_top1: BTreeMap<String, f64>,
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

/// Score a set of logit rows against labels. `k` for the secondary metric is
/// min(5, num_classes).
pub fn score_logits<E: Scalar>(
    rows: &[Vec<E>],
    labels: &[usize],
    label_vocab: &[String],
) -> EvalReport {
    assert_eq!(rows.len(), labels.len());
    let num_classes = label_vocab.len();
    let k5 = num_classes.min(5);
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let mut preds = Vec::with_capacity(rows.len());
    for (row, &label) in rows.iter().zip(labels) {
        assert_eq!(row.len(), num_classes);
        if top_k_hit(row, label, 1) {
            hit1 += 1;
        }
        if top_k_hit(row, label, k5) {
            hit5 += 1;
        }
        preds.push(predict_class(row));
    }
    let confusion = confusion_matrix(&preds, labels, num_classes);
    let mut per_class_top1 = BTreeMap::new();
    for (c, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total > 0 {
            per_class_top1.insert(label_vocab[c].clone(), row[c] as f64 / total as f64);
        }
    }
    let n = rows.len();
    EvalReport {
        top1: hit1 as f64 / n.max(1) as f64,
        top5: hit5 as f64 / n.max(1) as f64,
        per_class_top1,
        confusion,
        n_samples: n,
    }
}

/// Run the model over prepared samples (no augmentation, no dropout) and
/// score the logits.
pub fn evaluate_prepared<E: Scalar>(
    model: &Model<E>,
    samples: &[Prepared],
    batch_size: usize,
    label_vocab: &[String],
) -> Result<EvalReport, Error> {
    if samples.is_empty() {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    let num_classes = label_vocab.len();
    let mut rows = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().map(|p| &p.seq).collect();
        let logits = model.forward(&batch_tensor::<E>(&refs));
        let data = logits.data();
        for (i, p) in chunk.iter().enumerate() {
            rows.push(data[i * num_classes..(i + 1) * num_classes].to_vec());
            labels.push(p.label);
        }
    }
    Ok(score_logits(&rows, &labels, label_vocab))
}
