//! End-to-end stages: calibrate, stream records through the online engine,
//! evaluate before/after, and sweep one hyper-parameter.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationReport};
use crate::data_model::{
    parse_classification_line, parse_detection_line, CalibrationArtifact, ClassificationRecord,
    Dataset, DetectionRecord, HyperParams, Task,
};
use crate::error::{Error, Result};
use crate::metrics::{self, ClassificationReport, DetectionReport};
use crate::repair::{
    apply_classification_outcomes, apply_detection_outcomes, OnlineEngine, OnlineRecord,
    RepairOutcome,
};

/// Runs every record through `engine` in order.
pub fn apply_records<R: OnlineRecord>(
    engine: &mut OnlineEngine,
    records: &[R],
) -> Result<Vec<RepairOutcome>> {
    records.iter().map(|r| engine.process(r)).collect()
}

pub fn apply_dataset(engine: &mut OnlineEngine, dataset: &Dataset) -> Result<Vec<RepairOutcome>> {
    match dataset {
        Dataset::Classification(records) => apply_records(engine, records),
        Dataset::Detection(records) => apply_records(engine, records),
    }
}

fn as_task_mismatch(engine_task: Task) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::AtLine { line, source } => match *source {
            Error::MixedTask { found, .. } => Error::AtLine {
                line,
                source: Box::new(Error::TaskMismatch {
                    artifact: engine_task,
                    record: found,
                }),
            },
            other => Error::AtLine {
                line,
                source: Box::new(other),
            },
        },
        other => other,
    }
}

/// Streams JSONL records from `input` through `engine`, writing one outcome
/// line per record. Returns the number of records processed.
pub fn apply_stream<R: BufRead, W: Write>(
    engine: &mut OnlineEngine,
    input: R,
    mut output: W,
) -> Result<usize> {
    let task = engine.task();
    let mismatch = as_task_mismatch(task);
    let mut count = 0;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let outcome = match task {
            Task::Classification => {
                let r = parse_classification_line(&text, line_no).map_err(&mismatch)?;
                engine.process(&r)
            }
            Task::Detection => {
                let r = parse_detection_line(&text, line_no).map_err(&mismatch)?;
                engine.process(&r)
            }
        }
        .map_err(|e| Error::AtLine {
            line: line_no,
            source: Box::new(e),
        })?;
        serde_json::to_writer(&mut output, &outcome).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        output.write_all(b"\n").map_err(|e| Error::io("<outcomes>", e))?;
        count += 1;
    }
    output.flush().map_err(|e| Error::io("<outcomes>", e))?;
    Ok(count)
}

pub fn read_outcomes<R: BufRead>(input: R) -> Result<Vec<RepairOutcome>> {
    let mut outcomes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        outcomes.push(serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsReport {
    Classification(ClassificationReport),
    Detection(DetectionReport),
}

impl MetricsReport {
    pub fn csv_header(&self) -> &'static str {
        match self {
            MetricsReport::Classification(_) => ClassificationReport::CSV_HEADER,
            MetricsReport::Detection(_) => DetectionReport::CSV_HEADER,
        }
    }

    pub fn csv_row(&self) -> String {
        match self {
            MetricsReport::Classification(r) => r.csv_row(),
            MetricsReport::Detection(r) => r.csv_row(),
        }
    }

    pub fn as_classification(&self) -> Option<&ClassificationReport> {
        match self {
            MetricsReport::Classification(r) => Some(r),
            MetricsReport::Detection(_) => None,
        }
    }

    pub fn as_detection(&self) -> Option<&DetectionReport> {
        match self {
            MetricsReport::Detection(r) => Some(r),
            MetricsReport::Classification(_) => None,
        }
    }
}

/// Metrics on the original and the repaired outputs side by side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: Task,
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub violation_rate: f64,
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        format!(
            "stage,{}\nbefore,{}\nafter,{}\n",
            self.before.csv_header(),
            self.before.csv_row(),
            self.after.csv_row()
        )
    }
}

fn violation_rate(outcomes: &[RepairOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.flagged).count() as f64 / outcomes.len() as f64
}

fn check_lengths(records: usize, outcomes: usize) -> Result<()> {
    if records != outcomes {
        return Err(Error::OutcomeMismatch {
            index: records.min(outcomes),
            outcome_id: format!("<{outcomes} outcomes>"),
            record_id: format!("<{records} records>"),
        });
    }
    Ok(())
}

pub fn evaluate_classification(
    records: &[ClassificationRecord],
    outcomes: &[RepairOutcome],
    params: &HyperParams,
) -> Result<EvaluationReport> {
    check_lengths(records.len(), outcomes.len())?;
    let repaired = apply_classification_outcomes(records, outcomes)?;
    Ok(EvaluationReport {
        task: Task::Classification,
        before: MetricsReport::Classification(metrics::classification_report(records, params)?),
        after: MetricsReport::Classification(metrics::classification_report(&repaired, params)?),
        violation_rate: violation_rate(outcomes),
    })
}

pub fn evaluate_detection(
    records: &[DetectionRecord],
    outcomes: &[RepairOutcome],
    params: &HyperParams,
) -> Result<EvaluationReport> {
    check_lengths(records.len(), outcomes.len())?;
    let repaired = apply_detection_outcomes(records, outcomes)?;
    Ok(EvaluationReport {
        task: Task::Detection,
        before: MetricsReport::Detection(metrics::ap_gap(records, params.iou_threshold)?),
        after: MetricsReport::Detection(metrics::ap_gap(&repaired, params.iou_threshold)?),
        violation_rate: violation_rate(outcomes),
    })
}

pub fn evaluate(
    dataset: &Dataset,
    outcomes: &[RepairOutcome],
    params: &HyperParams,
) -> Result<EvaluationReport> {
    match dataset {
        Dataset::Classification(records) => evaluate_classification(records, outcomes, params),
        Dataset::Detection(records) => evaluate_detection(records, outcomes, params),
    }
}

/// Calibration, online repair and evaluation in one go.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub calibration: CalibrationReport,
    pub outcomes: Vec<RepairOutcome>,
    pub final_threshold: crate::data_model::Threshold,
    pub evaluation: EvaluationReport,
}

pub fn run(calibration: &Dataset, test: &Dataset, params: &HyperParams) -> Result<PipelineRun> {
    if calibration.task() != test.task() {
        return Err(Error::TaskMismatch {
            artifact: calibration.task(),
            record: test.task(),
        });
    }
    let report = calibrate(calibration, params)?;
    let mut engine = OnlineEngine::new(&report.artifact);
    let outcomes = apply_dataset(&mut engine, test)?;
    let evaluation = evaluate(test, &outcomes, &report.artifact.params)?;
    Ok(PipelineRun {
        final_threshold: engine.current_threshold(),
        calibration: report,
        outcomes,
        evaluation,
    })
}

/// Runs the online stage from an existing artifact.
pub fn run_from_artifact(
    artifact: &CalibrationArtifact,
    test: &Dataset,
) -> Result<(Vec<RepairOutcome>, EvaluationReport)> {
    let mut engine = OnlineEngine::new(artifact);
    let outcomes = apply_dataset(&mut engine, test)?;
    let evaluation = evaluate(test, &outcomes, &artifact.params)?;
    Ok((outcomes, evaluation))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lambda,
    Gamma,
    Eta,
    Kappa,
}

impl SweepAxis {
    /// `params` with this axis pinned to `value`. For `eta` and `kappa`
    /// the candidate list collapses to the single value, so calibration
    /// selects it while everything else is still chosen as usual.
    pub fn pin(self, params: &HyperParams, value: f64) -> HyperParams {
        let mut p = params.clone();
        match self {
            SweepAxis::Lambda => p.lambda = value,
            SweepAxis::Gamma => p.gamma = value,
            SweepAxis::Eta => p.eta_candidates = vec![value],
            SweepAxis::Kappa => {
                p.kappa = value;
                p.kappa_candidates = vec![value];
            }
        }
        p
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Eta => "eta",
            SweepAxis::Kappa => "kappa",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "gamma" => Ok(SweepAxis::Gamma),
            "eta" => Ok(SweepAxis::Eta),
            "kappa" => Ok(SweepAxis::Kappa),
            other => Err(Error::param(
                "sweep.axis",
                format!("unknown axis `{other}` (expected lambda|gamma|eta|kappa)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub evaluation: EvaluationReport,
}

impl SweepRow {
    pub fn after(&self) -> &MetricsReport {
        &self.evaluation.after
    }
}

/// One full pipeline run per value, everything else held fixed.
pub fn sweep(
    calibration: &Dataset,
    test: &Dataset,
    params: &HyperParams,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::param("sweep.values", "needs at least one value"));
    }
    values
        .iter()
        .map(|&value| {
            let pinned = axis.pin(params, value);
            pinned.validate()?;
            Ok(SweepRow {
                axis,
                value,
                evaluation: run(calibration, test, &pinned)?.evaluation,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let header = first.evaluation.after.csv_header();
    let prefixed = |prefix: &str| {
        header
            .split(',')
            .map(|h| format!("{prefix}_{h}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = format!("axis,value,violation_rate,{},{}\n", prefixed("before"), prefixed("after"));
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.axis,
            row.value,
            row.evaluation.violation_rate,
            row.evaluation.before.csv_row(),
            row.evaluation.after.csv_row()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{read_dataset_from, write_jsonl_to, Threshold};
    use crate::synthgen::{generate, BiasScenario};

    fn split(task: Task) -> (Dataset, Dataset) {
        let s = BiasScenario {
            task,
            ..BiasScenario::classification(9, 300)
        };
        (generate(&s).unwrap(), generate(&s.reseeded(10)).unwrap())
    }

    #[test]
    fn streaming_matches_in_memory() {
        let (cal, test) = split(Task::Detection);
        let report = calibrate(&cal, &HyperParams::default()).unwrap();
        let mut a = OnlineEngine::new(&report.artifact);
        let in_memory = apply_dataset(&mut a, &test).unwrap();

        let mut input = Vec::new();
        write_jsonl_to(&mut input, test.as_detection().unwrap()).unwrap();
        let mut b = OnlineEngine::new(&report.artifact);
        let mut out = Vec::new();
        assert_eq!(apply_stream(&mut b, input.as_slice(), &mut out).unwrap(), 300);
        assert_eq!(read_outcomes(out.as_slice()).unwrap(), in_memory);
    }

    #[test]
    fn stream_reports_task_mismatch() {
        let (cal, test) = split(Task::Classification);
        let report = calibrate(&cal, &HyperParams::default()).unwrap();
        let (_, det) = split(Task::Detection);
        let mut input = Vec::new();
        write_jsonl_to(&mut input, det.as_detection().unwrap()).unwrap();
        let mut engine = OnlineEngine::new(&report.artifact);
        let err = apply_stream(&mut engine, input.as_slice(), Vec::new()).unwrap_err();
        assert_eq!(err.code(), "TASK_MISMATCH");
        let _ = test;
    }

    #[test]
    fn empty_stream_is_fine() {
        let (cal, _) = split(Task::Classification);
        let report = calibrate(&cal, &HyperParams::default()).unwrap();
        let mut engine = OnlineEngine::new(&report.artifact);
        assert_eq!(apply_stream(&mut engine, &b""[..], Vec::new()).unwrap(), 0);
    }

    #[test]
    fn in_sample_violation_rate_is_bounded() {
        let (cal, _) = split(Task::Classification);
        let params = HyperParams {
            adaptive_enabled: false,
            ..HyperParams::default()
        };
        let run = run(&cal, &cal, &params).unwrap();
        let n = cal.len() as f64;
        assert!(run.evaluation.violation_rate <= params.alpha + 1.0 / (n + 1.0));
    }

    #[test]
    fn adaptive_threshold_never_rises() {
        let (cal, test) = split(Task::Detection);
        let run = run(&cal, &test, &HyperParams::default()).unwrap();
        assert!(run.final_threshold <= run.calibration.artifact.q_alpha);
        let mut prev = run.calibration.artifact.q_alpha;
        for o in &run.outcomes {
            assert_eq!(o.threshold_before, prev);
            assert!(o.threshold_after <= o.threshold_before);
            prev = o.threshold_after;
        }
    }

    #[test]
    fn singleton_sweep_equals_plain_run() {
        let (cal, test) = split(Task::Classification);
        let params = HyperParams::default();
        let rows = sweep(&cal, &test, &params, SweepAxis::Lambda, &[params.lambda]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].evaluation, run(&cal, &test, &params).unwrap().evaluation);
        assert_eq!(sweep_csv(&rows).lines().count(), 2);
    }

    #[test]
    fn outcome_round_trip_keeps_infinite_threshold() {
        let (cal, test) = split(Task::Classification);
        let mut report = calibrate(&cal, &HyperParams::default()).unwrap();
        report.artifact.q_alpha = Threshold::Infinite;
        let (outcomes, eval) = run_from_artifact(&report.artifact, &test).unwrap();
        assert_eq!(eval.before, eval.after);
        let mut buf = Vec::new();
        write_jsonl_to(&mut buf, &outcomes).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("\"inf\""));
        assert_eq!(read_outcomes(buf.as_slice()).unwrap(), outcomes);
        let again = read_dataset_from(&b""[..], Task::Classification).unwrap();
        assert!(again.is_empty());
    }
}
