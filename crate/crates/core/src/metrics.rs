//! Accuracy, micro-averaged F1, and the retain / forget rates built on them.
//!
//! Retain rate is measured on held-out consented data, forget rate on held-out
//! data the successor did not receive; both are "higher is better".

use serde::{Deserialize, Serialize};

use crate::consent::{ConsentRule, UserRecord};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::nn::{batch_matrix, predict, Network, Predictions};

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} targets",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Micro-averaged F1 over `label_subset`: `2TP / (2TP + FP + FN)` with counts
/// pooled across samples and labels; 1.0 when there is nothing to predict and
/// nothing was predicted.
pub fn micro_f1(predicted: &[Vec<u8>], truth: &[Vec<u8>], label_subset: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("F1 of an empty set".into()));
    }
    if label_subset.is_empty() {
        return Err(Error::Input("F1 needs a non-empty label subset".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Input("prediction and target widths differ".into()));
        }
        for &l in label_subset {
            let (pl, tl) = (*p.get(l).ok_or_else(|| label_oob(l))? == 1, t[l] == 1);
            match (pl, tl) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

fn label_oob(l: usize) -> Error {
    Error::Input(format!("label {l} outside the label space"))
}

/// Which labels count towards each rate in multi-label experiments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalScope {
    pub retain_labels: Vec<usize>,
    pub forget_labels: Vec<usize>,
}

impl EvalScope {
    /// Every label counts for both rates.
    pub fn all_labels(num_labels: usize) -> Self {
        Self {
            retain_labels: (0..num_labels).collect(),
            forget_labels: (0..num_labels).collect(),
        }
    }

    /// A single consented group: its labels measure retention, every other label forgetting.
    pub fn for_group(labels: &LabelSet, group: &str) -> Result<Self> {
        let retain = labels.labels_in_group(group);
        if retain.is_empty() {
            return Err(Error::Config(format!("unknown label group `{group}`")));
        }
        let forget: Vec<usize> = (0..labels.output_dim()).filter(|l| !retain.contains(l)).collect();
        if forget.is_empty() {
            return Err(Error::Config(format!("group `{group}` covers every label")));
        }
        Ok(Self {
            retain_labels: retain,
            forget_labels: forget,
        })
    }

    /// Scope implied by a consent rule on data with the label space of `sample`.
    pub fn from_rule(rule: &ConsentRule, sample: &LabelSet) -> Result<Self> {
        match rule {
            ConsentRule::AllowLabelGroup { group, .. } if !sample.is_multi_class() => {
                Self::for_group(sample, group)
            }
            _ => Ok(Self::all_labels(sample.output_dim())),
        }
    }
}

fn model_predictions(net: &Network, records: &[UserRecord]) -> Result<Predictions> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("evaluation set is empty".into()));
    }
    for r in records {
        net.architecture.check_data(r.features.len(), &r.labels)?;
    }
    predict(net, &batch_matrix(records.iter(), net.architecture.input_dim))
}

fn score(net: &Network, records: &[UserRecord], labels: &[usize]) -> Result<f64> {
    match model_predictions(net, records)? {
        Predictions::Classes(pred) => {
            let truth: Vec<usize> = records
                .iter()
                .map(|r| match r.labels {
                    LabelSet::MultiClass { class_index, .. } => class_index,
                    LabelSet::MultiLabel { .. } => unreachable!("checked by check_data"),
                })
                .collect();
            accuracy(&pred, &truth)
        }
        Predictions::Labels(pred) => {
            let truth: Vec<Vec<u8>> = records
                .iter()
                .map(|r| match &r.labels {
                    LabelSet::MultiLabel { active, .. } => active.clone(),
                    LabelSet::MultiClass { .. } => unreachable!("checked by check_data"),
                })
                .collect();
            micro_f1(&pred, &truth, labels)
        }
    }
}

/// Accuracy (multi-class) or micro-F1 over the retained labels on held-out consented data.
pub fn retain_rate(net: &Network, cdc_test: &[UserRecord], scope: &EvalScope) -> Result<f64> {
    score(net, cdc_test, &scope.retain_labels)
}

/// `1 - accuracy` (multi-class) or `1 - micro-F1` over the forgotten labels on
/// held-out data the successor did not receive.
pub fn forget_rate(net: &Network, complement_test: &[UserRecord], scope: &EvalScope) -> Result<f64> {
    Ok(1.0 - score(net, complement_test, &scope.forget_labels)?)
}

/// Final forget/retain rates of one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub regime: String,
    pub forget_rate: f64,
    pub retain_rate: f64,
    pub epochs: usize,
    pub n_forget_eval: usize,
    pub n_retain_eval: usize,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "regime,forget_rate,retain_rate,epochs,n_forget_eval,n_retain_eval";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.regime,
            self.forget_rate,
            self.retain_rate,
            self.epochs,
            self.n_forget_eval,
            self.n_retain_eval
        )
    }
}
