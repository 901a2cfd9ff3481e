use serde::{Deserialize, Serialize};

use super::{Group, Task};
use crate::error::{Error, Result};

/// One classified image: raw logits, the reference label, and the
/// protected attribute. `counterfactual_logits` is the model output for
/// the same content with the attribute flipped, when available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub id: String,
    pub logits: Vec<f64>,
    pub ref_label: usize,
    pub protected: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_logits: Option<Vec<f64>>,
}

impl ClassificationRecord {
    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn validate(self) -> Result<Self> {
        if self.logits.len() < 2 {
            return Err(Error::EmptyLogits {
                len: self.logits.len(),
            });
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { field: "logits" });
        }
        if self.ref_label >= self.logits.len() {
            return Err(Error::LabelOutOfRange {
                label: self.ref_label,
                classes: self.logits.len(),
            });
        }
        if let Some(cf) = &self.counterfactual_logits {
            if cf.len() != self.logits.len() {
                return Err(Error::CounterfactualLength {
                    expected: self.logits.len(),
                    got: cf.len(),
                });
            }
            if cf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    field: "counterfactual_logits",
                });
            }
        }
        Ok(self)
    }

    /// Index of the largest logit; the first one wins on ties.
    pub fn predicted_label(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Axis-aligned box in pixel coordinates, stored as top-left corner plus
/// extents. Ground-truth boxes carry no confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub class_id: u32,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, class_id: u32) -> Self {
        BoundingBox {
            x,
            y,
            w,
            h,
            confidence: None,
            class_id,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Confidence of a prediction box, 0 when absent.
    pub fn score(&self) -> f64 {
        self.confidence.unwrap_or(0.0)
    }

    fn validate(self, what: &'static str, image_w: f64, image_h: f64) -> Result<Self> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue { field: what });
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::NegativeExtent {
                what,
                w: self.w,
                h: self.h,
            });
        }
        if let Some(c) = self.confidence {
            if !c.is_finite() {
                return Err(Error::NonFiniteValue { field: "confidence" });
            }
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::ConfidenceOutOfRange { value: c });
            }
        }
        let x0 = self.x.clamp(0.0, image_w);
        let y0 = self.y.clamp(0.0, image_h);
        let x1 = (self.x + self.w).clamp(0.0, image_w);
        let y1 = (self.y + self.h).clamp(0.0, image_h);
        let clipped = BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            ..self
        };
        // A box lying entirely outside the image has nothing left after clipping.
        if clipped.w <= 0.0 || clipped.h <= 0.0 {
            return Err(Error::NegativeExtent {
                what,
                w: clipped.w,
                h: clipped.h,
            });
        }
        Ok(clipped)
    }
}

/// One image's detector output alongside its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub protected: Group,
    pub image_w: u32,
    pub image_h: u32,
    pub predictions: Vec<BoundingBox>,
    pub ground_truth: Vec<BoundingBox>,
}

impl DetectionRecord {
    /// Clips every box to the image rectangle and sorts predictions by
    /// descending confidence (stable, so equal confidences keep their order).
    pub fn validate(mut self) -> Result<Self> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::InvalidImage {
                w: self.image_w,
                h: self.image_h,
            });
        }
        let (iw, ih) = (f64::from(self.image_w), f64::from(self.image_h));
        for b in &mut self.predictions {
            if b.confidence.is_none() {
                return Err(Error::MissingConfidence);
            }
            *b = b.validate("prediction", iw, ih)?;
        }
        for b in &mut self.ground_truth {
            *b = BoundingBox {
                confidence: None,
                ..*b
            }
            .validate("ground_truth", iw, ih)?;
        }
        self.sort_predictions();
        Ok(self)
    }

    pub(crate) fn sort_predictions(&mut self) {
        self.predictions
            .sort_by(|a, b| b.score().total_cmp(&a.score()));
    }

    /// Mean prediction confidence; 0 for a record without predictions.
    pub fn mean_confidence(&self) -> f64 {
        if self.predictions.is_empty() {
            return 0.0;
        }
        self.predictions.iter().map(BoundingBox::score).sum::<f64>()
            / self.predictions.len() as f64
    }
}

/// A homogeneous, validated collection of records.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Classification(Vec<ClassificationRecord>),
    Detection(Vec<DetectionRecord>),
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::Classification(_) => Task::Classification,
            Dataset::Detection(_) => Task::Detection,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification(r) => r.len(),
            Dataset::Detection(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record counts for groups 0 and 1.
    pub fn group_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        let groups: Box<dyn Iterator<Item = Group>> = match self {
            Dataset::Classification(r) => Box::new(r.iter().map(|r| r.protected)),
            Dataset::Detection(r) => Box::new(r.iter().map(|r| r.protected)),
        };
        for g in groups {
            counts[g.index()] += 1;
        }
        counts
    }

    pub fn as_classification(&self) -> Result<&[ClassificationRecord]> {
        match self {
            Dataset::Classification(r) => Ok(r),
            Dataset::Detection(_) => Err(Error::MixedTask {
                expected: Task::Classification,
                found: Task::Detection,
            }),
        }
    }

    pub fn as_detection(&self) -> Result<&[DetectionRecord]> {
        match self {
            Dataset::Detection(r) => Ok(r),
            Dataset::Classification(_) => Err(Error::MixedTask {
                expected: Task::Detection,
                found: Task::Classification,
            }),
        }
    }
}
