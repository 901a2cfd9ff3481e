//! Offline calibration: group statistics, split-conformal thresholds and
//! repair-parameter selection on a held-out calibration set.

use serde::{Deserialize, Serialize};

use crate::data_model::{
    CalibrationArtifact, ClassificationRecord, Dataset, DetectionRecord, Group, GroupStats,
    HyperParams, Task, Threshold,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::par;
use crate::repair::{detection_violation, repair_classification, repair_detection};
use crate::scoring::{nonconformity, regional_scores, RegionScores, Scorable};

/// Smallest `r` with `r / (n + 1) >= 1 - alpha`, i.e. `ceil((n + 1)(1 - alpha))`
/// evaluated so that float rounding in the product cannot shift it.
/// May return `n + 1`, meaning no finite threshold exists.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let target = 1.0 - alpha;
    let denom = (n + 1) as f64;
    let mut r = ((denom * target).ceil().max(1.0) as usize).min(n + 1);
    while r > 1 && (r - 1) as f64 / denom >= target {
        r -= 1;
    }
    while r <= n && (r as f64) / denom < target {
        r += 1;
    }
    r
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest score, or
/// [`Threshold::Infinite`] when that rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteValue { field: "score" });
    }
    let r = conformal_rank(scores.len(), alpha);
    if r > scores.len() {
        return Ok(Threshold::Infinite);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Threshold::Finite(sorted[r - 1]))
}

/// Per-group mean of the confidence statistic. A group without records
/// gets `None`.
pub fn compute_group_stats<R: Scorable>(records: &[R]) -> GroupStats {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for r in records {
        let g = r.group().index();
        sums[g] += r.confidence_statistic();
        counts[g] += 1;
    }
    let mean = |g: usize| (counts[g] > 0).then(|| sums[g] / counts[g] as f64);
    GroupStats::from_means([mean(0), mean(1)], counts)
}

fn require_both_groups(stats: &GroupStats) -> Result<()> {
    for g in Group::BOTH {
        if stats.mean(g).is_none() {
            return Err(Error::UndefinedGroupMean {
                group: g.index() as u8,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || bins == 0 {
            return Histogram {
                edges: Vec::new(),
                counts: Vec::new(),
            };
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaRow {
    pub kappa: f64,
    pub delta_max: f64,
    pub dpd: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub gap: f64,
    pub mean_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub artifact: CalibrationArtifact,
    pub score_histogram: Histogram,
    /// Nominal violation rate `alpha`.
    pub violation_budget: f64,
    /// Calibration records whose score exceeds `q_alpha`.
    pub calibration_exceedances: usize,
    pub kappa_search_table: Vec<KappaRow>,
    pub eta_search_table: Vec<EtaRow>,
}

pub fn calibrate(dataset: &Dataset, params: &HyperParams) -> Result<CalibrationReport> {
    match dataset {
        Dataset::Classification(records) => calibrate_classification(records, params),
        Dataset::Detection(records) => calibrate_detection(records, params),
    }
}

pub fn calibrate_classification(
    records: &[ClassificationRecord],
    params: &HyperParams,
) -> Result<CalibrationReport> {
    params.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let stats = compute_group_stats(records);
    require_both_groups(&stats)?;
    let scores: Vec<f64> = par::try_map(records, |r| nonconformity(r, &stats, params).map(|s| s.total))?;
    let q = conformal_quantile(&scores, params.alpha)?;
    let (best, table) = select_kappa(records, &scores, q, params)?;

    let mut selected = params.clone();
    selected.kappa = best.kappa;
    selected.delta_max = best.delta_max;
    Ok(CalibrationReport {
        artifact: CalibrationArtifact {
            task: Task::Classification,
            q_alpha: q,
            region_q: None,
            group_stats: stats,
            params: selected,
            n: records.len(),
            eta_selected: None,
        },
        score_histogram: Histogram::new(&scores, 20),
        violation_budget: params.alpha,
        calibration_exceedances: scores.iter().filter(|&&s| q.is_exceeded_by(s)).count(),
        kappa_search_table: table,
        eta_search_table: Vec::new(),
    })
}

/// Grid search over `kappa_candidates x delta_max_candidates`, repairing
/// every calibration record with `score > q`. Picks the lowest DPD, then
/// the higher accuracy, then the earliest grid entry.
pub fn select_kappa(
    records: &[ClassificationRecord],
    scores: &[f64],
    q: Threshold,
    params: &HyperParams,
) -> Result<(KappaRow, Vec<KappaRow>)> {
    let grid: Vec<(f64, f64)> = params
        .kappa_candidates
        .iter()
        .flat_map(|&k| params.delta_max_candidates.iter().map(move |&d| (k, d)))
        .collect();
    let base: Vec<usize> = records.iter().map(|r| r.predicted_label()).collect();
    let violators: Vec<usize> = (0..records.len())
        .filter(|&i| q.is_exceeded_by(scores[i]))
        .collect();

    let table = par::try_map(&grid, |&(kappa, delta_max)| {
        let mut predictions = base.clone();
        for &i in &violators {
            let logits = repair_classification(&records[i], scores[i], q, kappa, delta_max);
            predictions[i] = crate::data_model::argmax(&logits);
        }
        Ok::<_, Error>(KappaRow {
            kappa,
            delta_max,
            dpd: metrics::dpd(records, &predictions, params.positive_class)?,
            accuracy: metrics::accuracy(records, &predictions),
        })
    })?;

    let mut best = table[0];
    for row in &table[1..] {
        if row.dpd < best.dpd || (row.dpd == best.dpd && row.accuracy > best.accuracy) {
            best = *row;
        }
    }
    Ok((best, table))
}

/// Per-cell thresholds from the scores of records that occupy each cell.
/// A cell never occupied in calibration gets an infinite threshold.
pub fn region_quantiles(
    region_scores: &[RegionScores],
    grid: usize,
    alpha: f64,
) -> Result<Vec<Vec<Threshold>>> {
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); grid * grid];
    for rs in region_scores {
        for (idx, s) in rs.occupied_cells() {
            per_cell[idx.flat(grid)].push(s);
        }
    }
    let flat = per_cell
        .iter()
        .map(|cell| {
            if cell.is_empty() {
                Ok(Threshold::Infinite)
            } else {
                conformal_quantile(cell, alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flat.chunks(grid).map(<[Threshold]>::to_vec).collect())
}

pub fn calibrate_detection(
    records: &[DetectionRecord],
    params: &HyperParams,
) -> Result<CalibrationReport> {
    params.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let stats = compute_group_stats(records);
    require_both_groups(&stats)?;
    let region_scores = par::try_map(records, |r| regional_scores(r, &stats, params))?;
    let scores: Vec<f64> = region_scores.iter().map(|rs| rs.aggregate).collect();
    let q = conformal_quantile(&scores, params.alpha)?;
    let region_q = region_quantiles(&region_scores, params.grid, params.alpha)?;
    let (eta, table) = select_eta(records, &region_scores, q, &region_q, params)?;

    Ok(CalibrationReport {
        artifact: CalibrationArtifact {
            task: Task::Detection,
            q_alpha: q,
            region_q: Some(region_q),
            group_stats: stats,
            params: params.clone(),
            n: records.len(),
            eta_selected: Some(eta),
        },
        score_histogram: Histogram::new(&scores, 20),
        violation_budget: params.alpha,
        calibration_exceedances: scores.iter().filter(|&&s| q.is_exceeded_by(s)).count(),
        kappa_search_table: Vec::new(),
        eta_search_table: table,
    })
}

/// Tries each `eta` on the calibration set and keeps the one with the
/// smallest `|gap|`, then the higher mean AP, then the one closest to 1.
pub fn select_eta(
    records: &[DetectionRecord],
    region_scores: &[RegionScores],
    q: Threshold,
    region_q: &[Vec<Threshold>],
    params: &HyperParams,
) -> Result<(f64, Vec<EtaRow>)> {
    let violations: Vec<_> = region_scores
        .iter()
        .map(|rs| detection_violation(rs, q, region_q))
        .collect();
    let table = par::try_map(&params.eta_candidates, |&eta| {
        let repaired: Vec<DetectionRecord> = records
            .iter()
            .zip(&violations)
            .map(|(r, v)| {
                let mut out = r.clone();
                out.predictions = repair_detection(r, v, eta, params.grid);
                out.sort_predictions();
                out
            })
            .collect();
        let report = metrics::ap_gap(&repaired, params.iou_threshold)?;
        Ok::<_, Error>(EtaRow {
            eta,
            gap: report.gap,
            mean_ap: report.mean_ap(),
        })
    })?;

    let mut best = table[0];
    for row in &table[1..] {
        let (a, b) = (row.gap.abs(), best.gap.abs());
        let better = a < b
            || (a == b && row.mean_ap > best.mean_ap)
            || (a == b && row.mean_ap == best.mean_ap && (row.eta - 1.0).abs() < (best.eta - 1.0).abs());
        if better {
            best = *row;
        }
    }
    Ok((best.eta, table))
}
