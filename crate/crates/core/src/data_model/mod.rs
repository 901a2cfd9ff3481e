//! Record, configuration, and artifact types shared by every stage.
//!
//! Records are validated once at ingestion ([`ClassificationRecord::validate`],
//! [`DetectionRecord::validate`]) and treated as immutable afterwards.

mod artifact;
mod jsonl;
mod params;
mod record;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use artifact::{CalibrationArtifact, GroupStats, Threshold};
pub use jsonl::{
    parse_classification_line, parse_detection_line, read_dataset, read_dataset_from,
    write_jsonl, write_jsonl_to,
};
pub use params::{HyperParams, RegionAggregation};
pub use record::{BoundingBox, ClassificationRecord, Dataset, DetectionRecord};
pub(crate) use record::argmax;

/// Which kind of model output a record or artifact describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Detection,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Detection => "detection",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" => Ok(Task::Classification),
            "detection" => Ok(Task::Detection),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// Binary protected attribute. `Protected` (A = 1) marks the group the
/// repair step targets. Serialized as the integers 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    NonProtected,
    Protected,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::NonProtected, Group::Protected];

    pub fn index(self) -> usize {
        match self {
            Group::NonProtected => 0,
            Group::Protected => 1,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::NonProtected => Group::Protected,
            Group::Protected => Group::NonProtected,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Group> {
        match bit {
            0 => Some(Group::NonProtected),
            1 => Some(Group::Protected),
            _ => None,
        }
    }

    pub fn is_protected(self) -> bool {
        self == Group::Protected
    }
}

impl Serialize for Group {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.index() as u8)
    }
}

impl<'de> Deserialize<'de> for Group {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bit = u8::deserialize(d)?;
        Group::from_bit(bit)
            .ok_or_else(|| serde::de::Error::custom(format!("protected must be 0 or 1, got {bit}")))
    }
}
