//! Fairness-aware non-conformity scores.
//!
//! A record's score is its predictive error plus `lambda` times a one-sided
//! fairness penalty: how far the record's confidence statistic falls short
//! of the calibration mean of the *other* group. For classification the
//! error is `1 - softmax[ref_label]` and the statistic is that same
//! true-class probability. For detection the error is `1 - mIoU` against
//! ground truth and the statistic is the mean prediction confidence.
//!
//! Detection images are additionally split into a `grid x grid` partition;
//! every box belongs to the cell containing its center, and each cell is
//! scored as if it were an image holding only its own boxes.

use serde::{Deserialize, Serialize};

use crate::data_model::{
    BoundingBox, ClassificationRecord, DetectionRecord, Group, GroupStats, HyperParams,
    RegionAggregation,
};
use crate::error::Result;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn true_class_confidence(record: &ClassificationRecord) -> f64 {
    softmax(&record.logits)[record.ref_label]
}

pub fn classification_error(record: &ClassificationRecord) -> f64 {
    1.0 - true_class_confidence(record)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub prediction: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

/// Greedy one-to-one matching. Predictions are visited in the given order
/// (callers pass canonical descending-confidence order); each takes the
/// unused same-class ground-truth box of highest IoU, lowest index on ties,
/// provided that IoU reaches `iou_threshold`.
pub fn match_boxes(
    predictions: &[BoundingBox],
    ground_truth: &[BoundingBox],
    iou_threshold: f64,
) -> Matching {
    let mut used = vec![false; ground_truth.len()];
    let mut matching = Matching::default();
    for (pi, p) in predictions.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in ground_truth.iter().enumerate() {
            if used[gi] || g.class_id != p.class_id {
                continue;
            }
            let overlap = iou(p, g);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, overlap)) if overlap >= iou_threshold => {
                used[gi] = true;
                matching.pairs.push(MatchedPair {
                    prediction: pi,
                    ground_truth: gi,
                    iou: overlap,
                });
            }
            _ => matching.unmatched_predictions.push(pi),
        }
    }
    matching.unmatched_ground_truth = (0..ground_truth.len()).filter(|&g| !used[g]).collect();
    matching
}

fn detection_error_of(
    predictions: &[BoundingBox],
    ground_truth: &[BoundingBox],
    iou_threshold: f64,
) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let matching = match_boxes(predictions, ground_truth, iou_threshold);
    let total: f64 = matching.pairs.iter().map(|p| p.iou).sum();
    1.0 - total / ground_truth.len() as f64
}

/// `1 - mIoU`, where unmatched ground truth counts as IoU 0. Images without
/// ground truth have error 0.
pub fn detection_error(record: &DetectionRecord, iou_threshold: f64) -> f64 {
    detection_error_of(&record.predictions, &record.ground_truth, iou_threshold)
}

/// The per-task ingredients of the non-conformity score.
pub trait Scorable {
    fn group(&self) -> Group;
    /// Statistic compared against the other group's calibration mean:
    /// true-class probability, or mean box confidence.
    fn confidence_statistic(&self) -> f64;
    fn predictive_error(&self, params: &HyperParams) -> f64;
}

impl Scorable for ClassificationRecord {
    fn group(&self) -> Group {
        self.protected
    }

    fn confidence_statistic(&self) -> f64 {
        true_class_confidence(self)
    }

    fn predictive_error(&self, _params: &HyperParams) -> f64 {
        classification_error(self)
    }
}

impl Scorable for DetectionRecord {
    fn group(&self) -> Group {
        self.protected
    }

    fn confidence_statistic(&self) -> f64 {
        self.mean_confidence()
    }

    fn predictive_error(&self, params: &HyperParams) -> f64 {
        detection_error(self, params.iou_threshold)
    }
}

fn shortfall(reference: f64, statistic: f64) -> f64 {
    (reference - statistic).max(0.0)
}

/// `max(0, mean_other - statistic)`.
pub fn fairness_penalty<R: Scorable>(record: &R, stats: &GroupStats) -> Result<f64> {
    let reference = stats.reference_mean(record.group())?;
    Ok(shortfall(reference, record.confidence_statistic()))
}

pub fn fairness_penalty_classification(
    record: &ClassificationRecord,
    stats: &GroupStats,
) -> Result<f64> {
    fairness_penalty(record, stats)
}

pub fn fairness_penalty_detection(record: &DetectionRecord, stats: &GroupStats) -> Result<f64> {
    fairness_penalty(record, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub error: f64,
    pub penalty: f64,
    pub total: f64,
}

impl ScoreBreakdown {
    fn new(error: f64, penalty: f64, lambda: f64) -> Self {
        ScoreBreakdown {
            error,
            penalty,
            total: error + lambda * penalty,
        }
    }
}

/// Whole-record score `error + lambda * penalty`.
pub fn nonconformity<R: Scorable>(
    record: &R,
    stats: &GroupStats,
    params: &HyperParams,
) -> Result<ScoreBreakdown> {
    let penalty = fairness_penalty(record, stats)?;
    Ok(ScoreBreakdown::new(
        record.predictive_error(params),
        penalty,
        params.lambda,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionIndex {
    pub row: usize,
    pub col: usize,
}

impl RegionIndex {
    pub fn flat(self, grid: usize) -> usize {
        self.row * grid + self.col
    }

    pub fn from_flat(index: usize, grid: usize) -> Self {
        RegionIndex {
            row: index / grid,
            col: index % grid,
        }
    }
}

/// Grid cell holding the center of `b` in a `grid x grid` partition of the image.
pub fn cell_of(b: &BoundingBox, image_w: u32, image_h: u32, grid: usize) -> RegionIndex {
    let (cx, cy) = b.center();
    let bin = |c: f64, extent: u32| {
        let cell = (c / f64::from(extent) * grid as f64).floor();
        (cell.max(0.0) as usize).min(grid - 1)
    };
    RegionIndex {
        row: bin(cy, image_h),
        col: bin(cx, image_w),
    }
}

/// Per-cell scores of one detection record plus their aggregate, which is
/// the record's image-level score.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionScores {
    pub grid: usize,
    /// Row-major cell scores; empty cells score 0.
    pub cells: Vec<f64>,
    /// Whether any prediction or ground-truth box falls in the cell.
    pub occupied: Vec<bool>,
    pub aggregate: f64,
}

impl RegionScores {
    pub fn get(&self, idx: RegionIndex) -> f64 {
        self.cells[idx.flat(self.grid)]
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = (RegionIndex, f64)> + '_ {
        self.cells
            .iter()
            .zip(&self.occupied)
            .enumerate()
            .filter(|(_, (_, occ))| **occ)
            .map(|(i, (s, _))| (RegionIndex::from_flat(i, self.grid), *s))
    }
}

pub fn regional_scores(
    record: &DetectionRecord,
    stats: &GroupStats,
    params: &HyperParams,
) -> Result<RegionScores> {
    let reference = stats.reference_mean(record.protected)?;
    let grid = params.grid;
    let n_cells = grid * grid;
    let mut preds: Vec<Vec<BoundingBox>> = vec![Vec::new(); n_cells];
    let mut gts: Vec<Vec<BoundingBox>> = vec![Vec::new(); n_cells];
    for b in &record.predictions {
        preds[cell_of(b, record.image_w, record.image_h, grid).flat(grid)].push(*b);
    }
    for b in &record.ground_truth {
        gts[cell_of(b, record.image_w, record.image_h, grid).flat(grid)].push(*b);
    }
    let mut cells = vec![0.0; n_cells];
    let mut occupied = vec![false; n_cells];
    for c in 0..n_cells {
        if preds[c].is_empty() && gts[c].is_empty() {
            continue;
        }
        occupied[c] = true;
        let error = detection_error_of(&preds[c], &gts[c], params.iou_threshold);
        let mean_conf = if preds[c].is_empty() {
            0.0
        } else {
            preds[c].iter().map(BoundingBox::score).sum::<f64>() / preds[c].len() as f64
        };
        cells[c] = ScoreBreakdown::new(error, shortfall(reference, mean_conf), params.lambda).total;
    }
    let aggregate = match params.region_aggregation {
        RegionAggregation::Sum => cells.iter().sum(),
        RegionAggregation::Max => cells.iter().copied().fold(0.0, f64::max),
    };
    Ok(RegionScores {
        grid,
        cells,
        occupied,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cls(logits: Vec<f64>, ref_label: usize, protected: Group) -> ClassificationRecord {
        ClassificationRecord {
            id: "c".into(),
            logits,
            ref_label,
            protected,
            counterfactual_logits: None,
        }
    }

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h, 0)
    }

    fn stats(g0: f64, g1: f64) -> GroupStats {
        GroupStats::from_means([Some(g0), Some(g1)], [10, 10])
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(big[0], 1.0, epsilon = 1e-12);
        // exp(k - 3) / sum, evaluated with mpmath at 30 digits.
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (got, want) in p.iter().zip([0.09003057317038046, 0.24472847105479767, 0.6652409557748219]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn classification_error_examples() {
        assert_eq!(classification_error(&cls(vec![0.0, 0.0], 0, Group::Protected)), 0.5);
        assert!(classification_error(&cls(vec![100.0, 0.0], 0, Group::Protected)) < 1e-40);
        assert_abs_diff_eq!(
            classification_error(&cls(vec![1.0, 2.0, 3.0], 2, Group::Protected)),
            0.33476,
            epsilon = 1e-5
        );
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_abs_diff_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 2.0, 2.0)), 1.0 / 3.0);
        // Touching edges do not overlap.
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn matching_examples() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let m = match_boxes(&[b(0.0, 0.0, 10.0, 10.0).with_confidence(0.9)], &gt, 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert!(m.unmatched_ground_truth.is_empty());

        let m = match_boxes(&[], &gt, 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_ground_truth, vec![0]);

        // Both overlap the single ground truth; the first (higher-confidence) one wins.
        let preds = [
            b(1.0, 0.0, 10.0, 10.0).with_confidence(0.9),
            b(0.0, 0.0, 10.0, 10.0).with_confidence(0.8),
        ];
        let m = match_boxes(&preds, &gt, 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].prediction, 0);
        assert_eq!(m.unmatched_predictions, vec![1]);
    }

    #[test]
    fn matching_respects_class_and_tie_break() {
        let gt = [b(0.0, 0.0, 2.0, 2.0), b(0.0, 0.0, 2.0, 2.0)];
        let m = match_boxes(&[b(0.0, 0.0, 2.0, 2.0).with_confidence(0.5)], &gt, 0.5);
        assert_eq!(m.pairs[0].ground_truth, 0);
        let other_class = BoundingBox::new(0.0, 0.0, 2.0, 2.0, 7).with_confidence(0.5);
        assert!(match_boxes(&[other_class], &gt, 0.5).pairs.is_empty());
    }

    fn det(predictions: Vec<BoundingBox>, ground_truth: Vec<BoundingBox>) -> DetectionRecord {
        DetectionRecord {
            id: "d".into(),
            protected: Group::Protected,
            image_w: 100,
            image_h: 100,
            predictions,
            ground_truth,
        }
    }

    #[test]
    fn detection_error_examples() {
        let perfect = det(
            vec![b(0.0, 0.0, 10.0, 10.0).with_confidence(0.9)],
            vec![b(0.0, 0.0, 10.0, 10.0)],
        );
        assert_eq!(detection_error(&perfect, 0.5), 0.0);
        let none = det(vec![], vec![b(0.0, 0.0, 1.0, 1.0), b(5.0, 5.0, 1.0, 1.0)]);
        assert_eq!(detection_error(&none, 0.5), 1.0);
        // One match at IoU 1/3 plus one miss: 1 - (1/3 + 0) / 2.
        let partial = det(
            vec![b(1.0, 0.0, 2.0, 2.0).with_confidence(0.9)],
            vec![b(0.0, 0.0, 2.0, 2.0), b(50.0, 50.0, 2.0, 2.0)],
        );
        assert_abs_diff_eq!(detection_error(&partial, 0.3), 5.0 / 6.0, epsilon = 1e-15);
        assert_eq!(detection_error(&det(vec![b(0.0, 0.0, 1.0, 1.0).with_confidence(0.3)], vec![]), 0.5), 0.0);
    }

    #[test]
    fn classification_penalty_examples() {
        // c = softmax([0, ln 1.5])[1] = 0.6
        let r = cls(vec![0.0, 1.5f64.ln()], 1, Group::Protected);
        assert_abs_diff_eq!(fairness_penalty(&r, &stats(0.9, 0.1)).unwrap(), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(fairness_penalty(&r, &stats(0.6, 0.1)).unwrap(), 0.0, epsilon = 1e-12);
        let confident = cls(vec![0.0, 19.0f64.ln()], 1, Group::Protected); // c = 0.95
        assert_eq!(fairness_penalty(&confident, &stats(0.9, 0.1)).unwrap(), 0.0);
        let lonely = GroupStats::from_means([None, Some(0.5)], [0, 3]);
        assert_eq!(
            fairness_penalty(&r, &lonely).unwrap_err().code(),
            "UNDEFINED_GROUP_MEAN"
        );
    }

    #[test]
    fn detection_penalty_examples() {
        let half = det(vec![b(0.0, 0.0, 1.0, 1.0).with_confidence(0.5)], vec![]);
        assert_eq!(fairness_penalty_detection(&half, &stats(0.5, 0.1)).unwrap(), 0.0);
        assert_abs_diff_eq!(fairness_penalty_detection(&half, &stats(0.8, 0.1)).unwrap(), 0.3, epsilon = 1e-12);
        let empty = det(vec![], vec![b(0.0, 0.0, 1.0, 1.0)]);
        assert_abs_diff_eq!(fairness_penalty_detection(&empty, &stats(0.7, 0.1)).unwrap(), 0.7);
    }

    #[test]
    fn nonconformity_combines_terms() {
        let r = cls(vec![0.0, 1.5f64.ln()], 1, Group::Protected);
        let p0 = HyperParams {
            lambda: 0.0,
            ..HyperParams::default()
        };
        let s = nonconformity(&r, &stats(0.9, 0.1), &p0).unwrap();
        assert_eq!(s.total, s.error);

        let breakdown = ScoreBreakdown::new(0.2, 0.3, 0.7);
        assert_abs_diff_eq!(breakdown.total, 0.41, epsilon = 1e-15);

        let advantaged = det(
            vec![b(0.0, 0.0, 10.0, 10.0).with_confidence(1.0)],
            vec![b(0.0, 0.0, 10.0, 10.0)],
        );
        let s = nonconformity(&advantaged, &stats(0.9, 0.9), &HyperParams::default()).unwrap();
        assert_eq!(s.total, 0.0);
    }

    #[test]
    fn single_cell_grid_matches_whole_image() {
        let r = det(
            vec![
                b(1.0, 0.0, 2.0, 2.0).with_confidence(0.6),
                b(60.0, 60.0, 5.0, 5.0).with_confidence(0.3),
            ],
            vec![b(0.0, 0.0, 2.0, 2.0), b(80.0, 10.0, 4.0, 4.0)],
        );
        let params = HyperParams {
            grid: 1,
            iou_threshold: 0.3,
            ..HyperParams::default()
        };
        let st = stats(0.8, 0.5);
        let rs = regional_scores(&r, &st, &params).unwrap();
        let whole = nonconformity(&r, &st, &params).unwrap().total;
        assert_eq!(rs.cells.len(), 1);
        assert_abs_diff_eq!(rs.aggregate, whole, epsilon = 1e-15);
    }

    #[test]
    fn empty_cells_score_zero_and_aggregation() {
        let r = det(
            vec![b(5.0, 5.0, 10.0, 10.0).with_confidence(0.4)],
            vec![b(5.0, 5.0, 10.0, 10.0), b(30.0, 10.0, 5.0, 5.0)],
        );
        let params = HyperParams {
            grid: 2,
            ..HyperParams::default()
        };
        let rs = regional_scores(&r, &stats(0.8, 0.5), &params).unwrap();
        assert_eq!(rs.occupied, vec![true, false, false, false]);
        assert_eq!(&rs.cells[1..], &[0.0, 0.0, 0.0]);
        assert!(rs.cells[0] > 0.0);

        let two = RegionScores {
            grid: 2,
            cells: vec![0.2, 0.5, 0.0, 0.0],
            occupied: vec![true, true, false, false],
            aggregate: 0.0,
        };
        assert_eq!(two.cells.iter().copied().fold(0.0, f64::max), 0.5);
    }

    #[test]
    fn cell_assignment_by_center() {
        let grid = 4;
        assert_eq!(cell_of(&b(0.0, 0.0, 10.0, 10.0), 100, 100, grid), RegionIndex { row: 0, col: 0 });
        assert_eq!(cell_of(&b(90.0, 40.0, 10.0, 10.0), 100, 100, grid), RegionIndex { row: 1, col: 3 });
        // A center on the far edge stays in the last cell.
        assert_eq!(cell_of(&b(99.0, 99.0, 2.0, 2.0), 100, 100, grid), RegionIndex { row: 3, col: 3 });
    }
}
