//! Online monitoring and repair: score each incoming record against the
//! calibrated thresholds, repair violators, and adapt the threshold.

use serde::{Deserialize, Serialize};

use crate::data_model::{
    BoundingBox, CalibrationArtifact, ClassificationRecord, DetectionRecord, GroupStats,
    HyperParams, Task, Threshold,
};
use crate::error::{Error, Result};
use crate::scoring::{cell_of, nonconformity, regional_scores, RegionIndex, RegionScores};

/// Logit increment `clamp(kappa * (score - q), 0, delta_max)`.
pub fn logit_shift(score: f64, q: f64, kappa: f64, delta_max: f64) -> f64 {
    (kappa * (score - q)).min(delta_max).max(0.0)
}

/// Raises the reference-label logit of a violating record. Records with
/// `score <= q` come back unchanged.
pub fn repair_classification(
    record: &ClassificationRecord,
    score: f64,
    q: Threshold,
    kappa: f64,
    delta_max: f64,
) -> Vec<f64> {
    let mut logits = record.logits.clone();
    if let Threshold::Finite(q) = q {
        if score > q {
            logits[record.ref_label] += logit_shift(score, q, kappa, delta_max);
        }
    }
    logits
}

/// Which thresholds a detection record exceeds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Violation {
    pub global: bool,
    pub regions: Vec<RegionIndex>,
}

impl Violation {
    pub fn any(&self) -> bool {
        self.global || !self.regions.is_empty()
    }
}

/// Compares the global score against `q` and each occupied cell against
/// its own threshold.
pub fn detection_violation(
    scores: &RegionScores,
    q: Threshold,
    region_q: &[Vec<Threshold>],
) -> Violation {
    let regions = scores
        .occupied_cells()
        .filter(|(idx, s)| {
            region_q
                .get(idx.row)
                .and_then(|row| row.get(idx.col))
                .is_some_and(|t| t.is_exceeded_by(*s))
        })
        .map(|(idx, _)| idx)
        .collect();
    Violation {
        global: q.is_exceeded_by(scores.aggregate),
        regions,
    }
}

/// Scales prediction confidences of a protected record by `eta`, clipped to
/// `[0, 1]`. With regional violations only boxes whose center falls in a
/// violating cell change; a purely global violation touches every box.
/// Non-protected records and non-violations pass through. Box order is kept.
pub fn repair_detection(
    record: &DetectionRecord,
    violation: &Violation,
    eta: f64,
    grid: usize,
) -> Vec<BoundingBox> {
    let mut boxes = record.predictions.clone();
    if !record.protected.is_protected() || !violation.any() {
        return boxes;
    }
    for b in &mut boxes {
        let in_scope = violation.regions.is_empty()
            || violation
                .regions
                .contains(&cell_of(b, record.image_w, record.image_h, grid));
        if in_scope {
            b.confidence = Some((eta * b.score()).clamp(0.0, 1.0));
        }
    }
    boxes
}

/// `gamma * q + (1 - gamma) * min(q, score)`. Never raises the threshold;
/// an infinite threshold stays infinite.
pub fn adaptive_update(q: Threshold, score: f64, gamma: f64) -> Threshold {
    match q {
        Threshold::Infinite => Threshold::Infinite,
        // gamma * q + (1 - gamma) * q can round one ulp above q.
        Threshold::Finite(q) if score >= q => Threshold::Finite(q),
        Threshold::Finite(q) => Threshold::Finite((gamma * q + (1.0 - gamma) * score).min(q)),
    }
}

/// The model output before or after repair. Serialized as a bare array;
/// an empty array reads back as `Boxes` since logits never are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Output {
    Boxes(Vec<BoundingBox>),
    Logits(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub id: String,
    pub score: f64,
    pub threshold_before: Threshold,
    /// Whether any threshold was exceeded.
    pub flagged: bool,
    /// Whether the output was modified (flagged and repair enabled).
    pub repaired: bool,
    pub original_output: Output,
    pub repaired_output: Output,
    pub threshold_after: Threshold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violated_regions: Option<Vec<RegionIndex>>,
}

/// A record type the online engine can process.
pub trait OnlineRecord {
    const TASK: Task;
    fn evaluate(&self, engine: &OnlineEngine) -> Result<RepairOutcome>;
}

impl OnlineRecord for ClassificationRecord {
    const TASK: Task = Task::Classification;

    fn evaluate(&self, engine: &OnlineEngine) -> Result<RepairOutcome> {
        let score = nonconformity(self, &engine.stats, &engine.params)?.total;
        let q = engine.q;
        let flagged = q.is_exceeded_by(score);
        let repaired_logits = if flagged && engine.repair_enabled {
            repair_classification(self, score, q, engine.params.kappa, engine.params.delta_max)
        } else {
            self.logits.clone()
        };
        Ok(RepairOutcome {
            id: self.id.clone(),
            score,
            threshold_before: q,
            flagged,
            repaired: flagged && engine.repair_enabled,
            original_output: Output::Logits(self.logits.clone()),
            repaired_output: Output::Logits(repaired_logits),
            threshold_after: q,
            violated_regions: None,
        })
    }
}

impl OnlineRecord for DetectionRecord {
    const TASK: Task = Task::Detection;

    fn evaluate(&self, engine: &OnlineEngine) -> Result<RepairOutcome> {
        let scores = regional_scores(self, &engine.stats, &engine.params)?;
        let violation = detection_violation(&scores, engine.q, &engine.region_q);
        let flagged = violation.any();
        let repaired = if flagged && engine.repair_enabled {
            repair_detection(self, &violation, engine.eta, engine.params.grid)
        } else {
            self.predictions.clone()
        };
        Ok(RepairOutcome {
            id: self.id.clone(),
            score: scores.aggregate,
            threshold_before: engine.q,
            flagged,
            repaired: flagged && engine.repair_enabled,
            original_output: Output::Boxes(self.predictions.clone()),
            repaired_output: Output::Boxes(repaired),
            threshold_after: engine.q,
            violated_regions: Some(violation.regions),
        })
    }
}

/// Stateful monitor over a stream of records. Group means and regional
/// thresholds stay frozen at their calibration values; only the global
/// threshold adapts, and only after a flagged record.
#[derive(Debug, Clone)]
pub struct OnlineEngine {
    task: Task,
    q: Threshold,
    region_q: Vec<Vec<Threshold>>,
    stats: GroupStats,
    params: HyperParams,
    eta: f64,
    repair_enabled: bool,
    processed: usize,
    violations: usize,
}

impl OnlineEngine {
    pub fn new(artifact: &CalibrationArtifact) -> Self {
        OnlineEngine {
            task: artifact.task,
            q: artifact.q_alpha,
            region_q: artifact.region_q.clone().unwrap_or_default(),
            stats: artifact.group_stats,
            params: artifact.params.clone(),
            eta: artifact.eta_selected.unwrap_or(1.0),
            repair_enabled: true,
            processed: 0,
            violations: 0,
        }
    }

    /// Flags violations without modifying outputs.
    pub fn passthrough(mut self) -> Self {
        self.repair_enabled = false;
        self
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn current_threshold(&self) -> Threshold {
        self.q
    }

    pub fn params(&self) -> &HyperParams {
        &self.params
    }

    pub fn processed_count(&self) -> usize {
        self.processed
    }

    pub fn violation_count(&self) -> usize {
        self.violations
    }

    /// Applies one adaptive step with `score` and returns the new threshold.
    pub fn update_threshold(&mut self, score: f64) -> Threshold {
        self.q = adaptive_update(self.q, score, self.params.gamma);
        self.q
    }

    pub fn process<R: OnlineRecord>(&mut self, record: &R) -> Result<RepairOutcome> {
        if R::TASK != self.task {
            return Err(Error::TaskMismatch {
                artifact: self.task,
                record: R::TASK,
            });
        }
        let mut outcome = record.evaluate(self)?;
        self.processed += 1;
        if outcome.flagged {
            self.violations += 1;
            if self.params.adaptive_enabled {
                outcome.threshold_after = self.update_threshold(outcome.score);
            }
        }
        Ok(outcome)
    }
}

/// Rebuilds detection records with repaired predictions, re-sorted by
/// confidence so they are canonical again for evaluation.
pub fn apply_detection_outcomes(
    records: &[DetectionRecord],
    outcomes: &[RepairOutcome],
) -> Result<Vec<DetectionRecord>> {
    records
        .iter()
        .zip(outcomes)
        .enumerate()
        .map(|(i, (r, o))| {
            check_alignment(i, r.id.as_str(), o)?;
            let mut repaired = r.clone();
            repaired.predictions = match &o.repaired_output {
                Output::Boxes(boxes) => boxes.clone(),
                Output::Logits(_) => {
                    return Err(Error::TaskMismatch {
                        artifact: Task::Classification,
                        record: Task::Detection,
                    })
                }
            };
            repaired.sort_predictions();
            Ok(repaired)
        })
        .collect()
}

/// Rebuilds classification records with repaired logits.
pub fn apply_classification_outcomes(
    records: &[ClassificationRecord],
    outcomes: &[RepairOutcome],
) -> Result<Vec<ClassificationRecord>> {
    records
        .iter()
        .zip(outcomes)
        .enumerate()
        .map(|(i, (r, o))| {
            check_alignment(i, r.id.as_str(), o)?;
            let mut repaired = r.clone();
            match &o.repaired_output {
                Output::Logits(logits) => repaired.logits = logits.clone(),
                Output::Boxes(_) => {
                    return Err(Error::TaskMismatch {
                        artifact: Task::Detection,
                        record: Task::Classification,
                    })
                }
            }
            Ok(repaired)
        })
        .collect()
}

fn check_alignment(index: usize, record_id: &str, outcome: &RepairOutcome) -> Result<()> {
    if outcome.id != record_id {
        return Err(Error::OutcomeMismatch {
            index,
            outcome_id: outcome.id.clone(),
            record_id: record_id.to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Group;
    use approx::assert_abs_diff_eq;

    #[test]
    fn shift_examples() {
        assert_abs_diff_eq!(logit_shift(0.6, 0.5, 1.0, 0.5), 0.1, epsilon = 1e-12);
        assert_eq!(logit_shift(2.5, 0.5, 1.0, 0.5), 0.5);
        assert_eq!(logit_shift(0.4, 0.5, 1.0, 0.5), 0.0);
    }

    #[test]
    fn classification_repair_touches_reference_logit_only() {
        let r = ClassificationRecord {
            id: "a".into(),
            logits: vec![1.0, 2.0, 0.5],
            ref_label: 0,
            protected: Group::Protected,
            counterfactual_logits: None,
        };
        let out = repair_classification(&r, 0.7, Threshold::Finite(0.5), 1.0, 0.5);
        assert_abs_diff_eq!(out[0], 1.2, epsilon = 1e-12);
        assert_eq!(&out[1..], &[2.0, 0.5]);
        assert_eq!(repair_classification(&r, 0.5, Threshold::Finite(0.5), 1.0, 0.5), r.logits);
        assert_eq!(repair_classification(&r, 9.0, Threshold::Infinite, 1.0, 0.5), r.logits);
    }

    #[test]
    fn adaptive_examples() {
        let q = adaptive_update(Threshold::Finite(1.0), 0.5, 0.9);
        assert_abs_diff_eq!(q.as_f64(), 0.95, epsilon = 1e-12);
        assert_eq!(adaptive_update(Threshold::Finite(1.0), 2.0, 0.9), Threshold::Finite(1.0));
        assert_eq!(adaptive_update(Threshold::Finite(1.0), 0.0, 1.0), Threshold::Finite(1.0));
        assert_eq!(adaptive_update(Threshold::Infinite, 0.0, 0.5), Threshold::Infinite);
    }

    proptest::proptest! {
        #[test]
        fn adaptive_never_raises(q in 0.0f64..5.0, score in 0.0f64..5.0, gamma in 0.01f64..0.99) {
            let next = adaptive_update(Threshold::Finite(q), score, gamma).as_f64();
            proptest::prop_assert!(next <= q);
            proptest::prop_assert!(next >= q.min(score));
        }
    }

    fn det_record(protected: Group) -> DetectionRecord {
        DetectionRecord {
            id: "d".into(),
            protected,
            image_w: 100,
            image_h: 100,
            predictions: vec![
                BoundingBox::new(10.0, 10.0, 10.0, 10.0, 0).with_confidence(0.5),
                BoundingBox::new(70.0, 70.0, 10.0, 10.0, 0).with_confidence(0.9),
            ],
            ground_truth: vec![],
        }
    }

    #[test]
    fn detection_repair_scopes() {
        let r = det_record(Group::Protected);
        let global = Violation {
            global: true,
            regions: vec![],
        };
        let out = repair_detection(&r, &global, 1.2, 2);
        assert_abs_diff_eq!(out[0].score(), 0.6, epsilon = 1e-12);
        assert_eq!(out[1].score(), 1.0);

        let regional = Violation {
            global: false,
            regions: vec![RegionIndex { row: 0, col: 0 }],
        };
        let out = repair_detection(&r, &regional, 0.5, 2);
        assert_eq!(out[0].score(), 0.25);
        assert_eq!(out[1].score(), 0.9);

        let nonprot = det_record(Group::NonProtected);
        assert_eq!(repair_detection(&nonprot, &global, 1.2, 2), nonprot.predictions);
        assert_eq!(repair_detection(&r, &Violation::default(), 1.2, 2), r.predictions);
    }

    fn artifact(task: Task, q: f64) -> CalibrationArtifact {
        CalibrationArtifact {
            task,
            q_alpha: Threshold::Finite(q),
            region_q: (task == Task::Detection).then(|| vec![vec![Threshold::Infinite; 2]; 2]),
            group_stats: GroupStats::from_means([Some(0.8), Some(0.6)], [5, 5]),
            params: HyperParams {
                gamma: 0.9,
                ..HyperParams::default()
            },
            n: 10,
            eta_selected: (task == Task::Detection).then_some(1.2),
        }
    }

    #[test]
    fn engine_rejects_other_task() {
        let mut engine = OnlineEngine::new(&artifact(Task::Classification, 0.5));
        let err = engine.process(&det_record(Group::Protected)).unwrap_err();
        assert_eq!(err.code(), "TASK_MISMATCH");
        assert_eq!(engine.processed_count(), 0);
    }

    #[test]
    fn engine_counts_and_adapts() {
        let mut engine = OnlineEngine::new(&artifact(Task::Classification, 0.1));
        let r = ClassificationRecord {
            id: "a".into(),
            logits: vec![2.0, 0.0],
            ref_label: 1,
            protected: Group::Protected,
            counterfactual_logits: None,
        };
        let o = engine.process(&r).unwrap();
        assert!(o.flagged && o.repaired);
        assert_eq!(o.threshold_before, Threshold::Finite(0.1));
        // score > q so min(q, score) = q and the threshold holds.
        assert_eq!(o.threshold_after, Threshold::Finite(0.1));
        assert_eq!((engine.processed_count(), engine.violation_count()), (1, 1));

        let q = engine.update_threshold(0.0);
        assert_abs_diff_eq!(q.as_f64(), 0.09, epsilon = 1e-12);
    }

    #[test]
    fn passthrough_flags_without_repair() {
        let mut engine = OnlineEngine::new(&artifact(Task::Classification, 0.1)).passthrough();
        let r = ClassificationRecord {
            id: "a".into(),
            logits: vec![2.0, 0.0],
            ref_label: 1,
            protected: Group::Protected,
            counterfactual_logits: None,
        };
        let o = engine.process(&r).unwrap();
        assert!(o.flagged && !o.repaired);
        assert_eq!(o.original_output, o.repaired_output);
    }

    #[test]
    fn regional_violation_lowers_threshold() {
        let mut a = artifact(Task::Detection, 10.0);
        a.region_q = Some(vec![vec![Threshold::Finite(0.0); 2]; 2]);
        let mut engine = OnlineEngine::new(&a);
        let o = engine.process(&det_record(Group::Protected)).unwrap();
        assert!(o.flagged);
        assert!(!o.violated_regions.as_ref().unwrap().is_empty());
        assert!(o.threshold_after.as_f64() < 10.0);
    }

    #[test]
    fn outcome_alignment_checked() {
        let r = det_record(Group::Protected);
        let mut engine = OnlineEngine::new(&artifact(Task::Detection, 10.0));
        let mut o = engine.process(&r).unwrap();
        o.id = "other".into();
        let err = apply_detection_outcomes(&[r], &[o]).unwrap_err();
        assert_eq!(err.code(), "OUTCOME_MISMATCH");
    }
}
