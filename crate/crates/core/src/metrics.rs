//! Group and individual fairness metrics plus predictive quality.
//!
//! Classification metrics treat `positive_class` as the positive outcome
//! (one-vs-rest for more than two classes). Detection AP pools every
//! prediction of a group, ranks by confidence, and integrates the
//! all-point interpolated precision-recall curve.

use serde::{Deserialize, Serialize};

use crate::data_model::{ClassificationRecord, DetectionRecord, Group, HyperParams};
use crate::error::{Error, Result};
use crate::scoring::{detection_error, match_boxes, softmax};

fn empty_group(group: Group) -> Error {
    Error::EmptyGroup {
        group: group.index() as u8,
    }
}

pub fn accuracy(records: &[ClassificationRecord], predictions: &[usize]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .zip(predictions)
        .filter(|(r, p)| r.ref_label == **p)
        .count();
    correct as f64 / records.len() as f64
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Per-group `P(prediction = positive)`.
fn positive_rates(
    records: &[ClassificationRecord],
    predictions: &[usize],
    positive_class: usize,
) -> [Option<f64>; 2] {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (r, &p) in records.iter().zip(predictions) {
        let g = r.protected.index();
        totals[g] += 1;
        hits[g] += usize::from(p == positive_class);
    }
    [rate(hits[0], totals[0]), rate(hits[1], totals[1])]
}

/// Per-group TPR and FPR; `None` where a group lacks positive (resp.
/// negative) reference labels.
fn confusion_rates(
    records: &[ClassificationRecord],
    predictions: &[usize],
    positive_class: usize,
) -> ([Option<f64>; 2], [Option<f64>; 2]) {
    let mut tp = [0usize; 2];
    let mut pos = [0usize; 2];
    let mut fp = [0usize; 2];
    let mut neg = [0usize; 2];
    for (r, &p) in records.iter().zip(predictions) {
        let g = r.protected.index();
        let predicted_positive = p == positive_class;
        if r.ref_label == positive_class {
            pos[g] += 1;
            tp[g] += usize::from(predicted_positive);
        } else {
            neg[g] += 1;
            fp[g] += usize::from(predicted_positive);
        }
    }
    (
        [rate(tp[0], pos[0]), rate(tp[1], pos[1])],
        [rate(fp[0], neg[0]), rate(fp[1], neg[1])],
    )
}

pub fn tpr_by_group(
    records: &[ClassificationRecord],
    predictions: &[usize],
    positive_class: usize,
) -> [Option<f64>; 2] {
    confusion_rates(records, predictions, positive_class).0
}

/// Demographic parity difference `|P(pos | A=0) - P(pos | A=1)|`.
pub fn dpd(
    records: &[ClassificationRecord],
    predictions: &[usize],
    positive_class: usize,
) -> Result<f64> {
    let [r0, r1] = positive_rates(records, predictions, positive_class);
    let r0 = r0.ok_or(empty_group(Group::NonProtected))?;
    let r1 = r1.ok_or(empty_group(Group::Protected))?;
    Ok((r0 - r1).abs())
}

/// Equalized odds difference `max(|TPR0 - TPR1|, |FPR0 - FPR1|)`.
pub fn eod(
    records: &[ClassificationRecord],
    predictions: &[usize],
    positive_class: usize,
) -> Result<f64> {
    let (tpr, fpr) = confusion_rates(records, predictions, positive_class);
    let gap = |rates: [Option<f64>; 2], name: &'static str| match rates {
        [Some(a), Some(b)] => Ok((a - b).abs()),
        _ => Err(Error::UndefinedRate {
            rate: name,
            reason: "each group needs positive and negative reference labels".into(),
        }),
    };
    Ok(gap(tpr, "TPR")?.max(gap(fpr, "FPR")?))
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs in which
/// the positive scores higher, ties counting one half.
pub fn auc_from_scores(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedRate {
            rate: "AUC",
            reason: "needs at least one positive and one negative label".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the U statistic, kept integral so ties are exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_tied = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let neg_tied = (j - i) as u128 - pos_tied;
        twice_u += pos_tied * (2 * neg_below + neg_tied);
        neg_below += neg_tied;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// AUC of the positive-class probability against the reference labels.
pub fn auc(records: &[ClassificationRecord], positive_class: usize) -> Result<f64> {
    let labels: Vec<bool> = records.iter().map(|r| r.ref_label == positive_class).collect();
    let scores: Vec<f64> = records
        .iter()
        .map(|r| softmax(&r.logits)[positive_class])
        .collect();
    auc_from_scores(&labels, &scores)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Distance between the softmax outputs of the factual and counterfactual
/// logits, when the record carries a counterfactual.
pub fn counterfactual_distance(record: &ClassificationRecord) -> Option<f64> {
    record
        .counterfactual_logits
        .as_ref()
        .map(|cf| euclidean(&softmax(&record.logits), &softmax(cf)))
}

/// Fraction of counterfactual-bearing records whose output moves by at most
/// `delta` when the protected attribute is flipped.
pub fn individual_consistency(records: &[ClassificationRecord], delta: f64) -> Result<f64> {
    let distances: Vec<f64> = records.iter().filter_map(counterfactual_distance).collect();
    if distances.is_empty() {
        return Err(Error::NoCounterfactuals);
    }
    let consistent = distances.iter().filter(|&&d| d <= delta).count();
    Ok(consistent as f64 / distances.len() as f64)
}

/// All-point interpolated AP over every record of `group`.
pub fn average_precision(
    records: &[DetectionRecord],
    group: Group,
    iou_threshold: f64,
) -> Result<f64> {
    let members: Vec<&DetectionRecord> = records.iter().filter(|r| r.protected == group).collect();
    if members.is_empty() {
        return Err(empty_group(group));
    }
    Ok(pooled_average_precision(&members, iou_threshold))
}

pub(crate) fn pooled_average_precision(records: &[&DetectionRecord], iou_threshold: f64) -> f64 {
    let mut detections: Vec<(f64, bool)> = Vec::new();
    let mut total_gt = 0usize;
    for r in records {
        total_gt += r.ground_truth.len();
        let matching = match_boxes(&r.predictions, &r.ground_truth, iou_threshold);
        let mut tp = vec![false; r.predictions.len()];
        for pair in &matching.pairs {
            tp[pair.prediction] = true;
        }
        detections.extend(r.predictions.iter().map(|b| b.score()).zip(tp));
    }
    if total_gt == 0 {
        return 0.0;
    }
    // Stable: equal confidences keep record order.
    detections.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut precision = Vec::with_capacity(detections.len());
    let mut is_tp = Vec::with_capacity(detections.len());
    let mut hits = 0usize;
    for (k, &(_, tp)) in detections.iter().enumerate() {
        hits += usize::from(tp);
        precision.push(hits as f64 / (k + 1) as f64);
        is_tp.push(tp);
    }
    // Precision envelope: best precision at any recall at least this large.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = precision
        .iter()
        .zip(&is_tp)
        .filter(|(_, tp)| **tp)
        .map(|(p, _)| *p)
        .sum();
    sum / total_gt as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub ap_prot: f64,
    pub ap_nonprot: f64,
    /// `ap_nonprot - ap_prot`.
    pub gap: f64,
    /// Mean per-image IoU score (`1 - detection error`) for groups 0 and 1.
    pub mean_iou_by_group: [f64; 2],
    pub n_evaluated: usize,
}

impl DetectionReport {
    pub fn mean_ap(&self) -> f64 {
        (self.ap_prot + self.ap_nonprot) / 2.0
    }
}

pub fn ap_gap(records: &[DetectionRecord], iou_threshold: f64) -> Result<DetectionReport> {
    let ap_nonprot = average_precision(records, Group::NonProtected, iou_threshold)?;
    let ap_prot = average_precision(records, Group::Protected, iou_threshold)?;
    let mut iou_sum = [0.0; 2];
    let mut counts = [0usize; 2];
    for r in records {
        let g = r.protected.index();
        iou_sum[g] += 1.0 - detection_error(r, iou_threshold);
        counts[g] += 1;
    }
    Ok(DetectionReport {
        ap_prot,
        ap_nonprot,
        gap: ap_nonprot - ap_prot,
        mean_iou_by_group: [iou_sum[0] / counts[0] as f64, iou_sum[1] / counts[1] as f64],
        n_evaluated: records.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub dpd: f64,
    pub eod: Option<f64>,
    pub tpr_g0: Option<f64>,
    pub tpr_g1: Option<f64>,
    pub individual_consistency_rate: Option<f64>,
    /// `dpd <= epsilon`.
    pub group_fair: bool,
    pub n_evaluated: usize,
}

/// Evaluates the logits stored on `records` (original or repaired).
pub fn classification_report(
    records: &[ClassificationRecord],
    params: &HyperParams,
) -> Result<ClassificationReport> {
    let predictions: Vec<usize> = records.iter().map(|r| r.predicted_label()).collect();
    let positive = params.positive_class;
    let dpd = dpd(records, &predictions, positive)?;
    let (tpr, _) = confusion_rates(records, &predictions, positive);
    Ok(ClassificationReport {
        accuracy: accuracy(records, &predictions),
        auc: auc(records, positive).ok(),
        dpd,
        eod: eod(records, &predictions, positive).ok(),
        tpr_g0: tpr[0],
        tpr_g1: tpr[1],
        individual_consistency_rate: individual_consistency(records, params.delta).ok(),
        group_fair: dpd <= params.epsilon,
        n_evaluated: records.len(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ClassificationReport {
    pub const CSV_HEADER: &'static str =
        "accuracy,auc,dpd,eod,tpr_g0,tpr_g1,individual_consistency_rate,group_fair,n_evaluated";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.accuracy,
            opt(self.auc),
            self.dpd,
            opt(self.eod),
            opt(self.tpr_g0),
            opt(self.tpr_g1),
            opt(self.individual_consistency_rate),
            self.group_fair,
            self.n_evaluated
        )
    }
}

impl DetectionReport {
    pub const CSV_HEADER: &'static str =
        "ap_prot,ap_nonprot,gap,mean_iou_g0,mean_iou_g1,n_evaluated";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.ap_prot,
            self.ap_nonprot,
            self.gap,
            self.mean_iou_by_group[0],
            self.mean_iou_by_group[1],
            self.n_evaluated
        )
    }
}
