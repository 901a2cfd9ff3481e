use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Group, HyperParams, Task};
use crate::error::{Error, Result};

/// A calibrated threshold. `Infinite` means "never flag" and is kept
/// distinct from any finite value; it serializes as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    /// True when `score` lies strictly above the threshold.
    pub fn is_exceeded_by(self, score: f64) -> bool {
        match self {
            Threshold::Finite(q) => score > q,
            Threshold::Infinite => false,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Threshold::Finite(q) => Some(q),
            Threshold::Infinite => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Threshold::Infinite)
    }
}

impl PartialOrd for Threshold {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.as_f64().partial_cmp(&other.as_f64())
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Finite(q) => write!(f, "{q}"),
            Threshold::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Threshold::Finite(q) => s.serialize_f64(*q),
            Threshold::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(q) if q.is_finite() => Ok(Threshold::Finite(q)),
            Raw::Str(s) if s == "inf" => Ok(Threshold::Infinite),
            Raw::Num(q) => Err(serde::de::Error::custom(format!("non-finite threshold {q}"))),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "threshold must be a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Per-group mean of the task's confidence statistic on the calibration
/// set. A group with no records has an undefined (`null`) mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean_conf_g0: Option<f64>,
    pub mean_conf_g1: Option<f64>,
    pub count_g0: usize,
    pub count_g1: usize,
}

impl GroupStats {
    pub fn from_means(mean: [Option<f64>; 2], count: [usize; 2]) -> Self {
        GroupStats {
            mean_conf_g0: mean[0],
            mean_conf_g1: mean[1],
            count_g0: count[0],
            count_g1: count[1],
        }
    }

    pub fn mean(&self, group: Group) -> Option<f64> {
        match group {
            Group::NonProtected => self.mean_conf_g0,
            Group::Protected => self.mean_conf_g1,
        }
    }

    pub fn count(&self, group: Group) -> usize {
        match group {
            Group::NonProtected => self.count_g0,
            Group::Protected => self.count_g1,
        }
    }

    pub fn total(&self) -> usize {
        self.count_g0 + self.count_g1
    }

    /// Mean of the group opposite to `group`, the reference for its penalty.
    pub fn reference_mean(&self, group: Group) -> Result<f64> {
        let other = group.other();
        self.mean(other).ok_or(Error::UndefinedGroupMean {
            group: other.index() as u8,
        })
    }
}

/// Everything the online engine needs, produced once by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub task: Task,
    pub q_alpha: Threshold,
    /// Row-major `grid x grid` per-region thresholds (detection only).
    pub region_q: Option<Vec<Vec<Threshold>>>,
    pub group_stats: GroupStats,
    pub params: HyperParams,
    pub n: usize,
    /// Selected confidence scale factor (detection only).
    pub eta_selected: Option<f64>,
}

impl CalibrationArtifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: CalibrationArtifact =
            serde_json::from_str(text).map_err(|e| Error::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
        artifact.params.validate()?;
        match (&artifact.region_q, artifact.task) {
            (Some(_), Task::Classification) | (None, Task::Detection) => Err(Error::Parse {
                line: 0,
                message: "region_q must be present exactly for detection artifacts".into(),
            }),
            _ => Ok(artifact),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_json_encoding() {
        assert_eq!(serde_json::to_string(&Threshold::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Threshold::Finite(0.25)).unwrap(), "0.25");
        let back: Vec<Threshold> = serde_json::from_str("[0.5, \"inf\"]").unwrap();
        assert_eq!(back, vec![Threshold::Finite(0.5), Threshold::Infinite]);
        assert!(serde_json::from_str::<Threshold>("\"nan\"").is_err());
    }

    #[test]
    fn infinite_never_flags() {
        assert!(!Threshold::Infinite.is_exceeded_by(f64::MAX));
        assert!(Threshold::Finite(0.5).is_exceeded_by(0.51));
        assert!(!Threshold::Finite(0.5).is_exceeded_by(0.5));
        assert!(Threshold::Finite(1e300) < Threshold::Infinite);
    }

    #[test]
    fn undefined_reference_mean() {
        let stats = GroupStats::from_means([Some(0.8), None], [3, 0]);
        assert_eq!(stats.reference_mean(Group::Protected).unwrap(), 0.8);
        assert_eq!(
            stats.reference_mean(Group::NonProtected).unwrap_err().code(),
            "UNDEFINED_GROUP_MEAN"
        );
    }
}
