use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-cell detection scores combine into the image score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionAggregation {
    Sum,
    Max,
}

impl std::str::FromStr for RegionAggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(RegionAggregation::Sum),
            "max" => Ok(RegionAggregation::Max),
            other => Err(format!("unknown aggregation `{other}` (expected sum|max)")),
        }
    }
}

/// Every free constant of the calibration and repair procedure.
///
/// `kappa` and `delta_max` are the logit-shift constants in force; calibration
/// overwrites them with the pair selected from `kappa_candidates` x
/// `delta_max_candidates`. The detection scale factor is chosen from
/// `eta_candidates` and stored on the artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Miscoverage level.
    pub alpha: f64,
    /// Weight of the fairness penalty in the non-conformity score.
    pub lambda: f64,
    /// Decay of the adaptive threshold update.
    pub gamma: f64,
    pub kappa: f64,
    pub delta_max: f64,
    pub eta_candidates: Vec<f64>,
    pub kappa_candidates: Vec<f64>,
    pub delta_max_candidates: Vec<f64>,
    /// Group-disparity tolerance for `group_fair`.
    pub epsilon: f64,
    /// Individual-consistency tolerance on softmax outputs.
    pub delta: f64,
    /// Side of the square region grid used for detection.
    pub grid: usize,
    pub adaptive_enabled: bool,
    pub region_aggregation: RegionAggregation,
    pub iou_threshold: f64,
    /// Class treated as "positive" by DPD, EOD, TPR and AUC.
    pub positive_class: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.1,
            lambda: 0.7,
            gamma: 0.95,
            kappa: 0.8,
            delta_max: 0.15,
            eta_candidates: vec![0.6, 0.8, 1.0, 1.2],
            kappa_candidates: vec![0.2, 0.5, 0.8, 1.0],
            delta_max_candidates: vec![0.05, 0.1, 0.15, 0.2],
            epsilon: 0.05,
            delta: 0.1,
            grid: 2,
            adaptive_enabled: true,
            region_aggregation: RegionAggregation::Max,
            iou_threshold: 0.5,
            positive_class: 1,
        }
    }
}

fn positive_list(name: &str, values: &[f64], strictly_increasing: bool) -> Result<()> {
    if values.is_empty() {
        return Err(Error::param(name, "must not be empty"));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::param(name, "entries must be finite and > 0"));
    }
    if strictly_increasing && values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param(name, "must be strictly increasing"));
    }
    Ok(())
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} not in (0, 1)")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be finite and >= 0")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be finite and > 0")))
            }
        };
        open_unit("alpha", self.alpha)?;
        non_negative("lambda", self.lambda)?;
        open_unit("gamma", self.gamma)?;
        positive("kappa", self.kappa)?;
        positive("delta_max", self.delta_max)?;
        non_negative("epsilon", self.epsilon)?;
        non_negative("delta", self.delta)?;
        positive_list("eta_candidates", &self.eta_candidates, true)?;
        positive_list("kappa_candidates", &self.kappa_candidates, false)?;
        positive_list("delta_max_candidates", &self.delta_max_candidates, false)?;
        if self.grid == 0 {
            return Err(Error::param("grid", "must be >= 1"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::param("iou_threshold", "must lie in (0, 1]"));
        }
        Ok(())
    }
}
