//! Seeded synthetic datasets with a controllable group bias.
//!
//! Every record `i` draws from its own `ChaCha8Rng` seeded with
//! `seed_from_u64(seed)` and switched to stream `i`, so generation is
//! order-independent and can run in parallel without sharing a generator.
//!
//! Classification: the model's target class equals the reference label with
//! probability `base_accuracy` (otherwise a uniformly chosen other class),
//! with logit margin `m ~ Gamma(2, 0.7)` over the remaining classes. For the
//! protected group the probability of the positive class (class 1) is
//! multiplied by `confidence_suppression` and the freed mass is spread over
//! the other classes in proportion. `counterfactual_logits` is the same
//! draw under the flipped group.
//!
//! Detection: 640x480 images with non-overlapping ground-truth boxes. Each
//! object is found with probability `base_accuracy` by a jittered box with
//! confidence `~ Beta(4, 2)`, scaled by `confidence_suppression` when the
//! image is protected. Spurious boxes (`~ Binomial(2, 0.3)` per image) get
//! confidence `~ Beta(2, 2)` regardless of group.
//!
//! Reference output, `BiasScenario::classification(42, 1)`:
//! `REFERENCE_RECORD` below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    BoundingBox, ClassificationRecord, Dataset, DetectionRecord, Group, Task,
};
use crate::error::{Error, Result};
use crate::par;

pub const IMAGE_W: u32 = 640;
pub const IMAGE_H: u32 = 480;
const POSITIVE_CLASS: usize = 1;
const MARGIN_SHAPE: f64 = 2.0;
const MARGIN_SCALE: f64 = 0.7;
const TP_CONFIDENCE: (f64, f64) = (4.0, 2.0);
const FP_CONFIDENCE: (f64, f64) = (2.0, 2.0);
const FP_TRIALS: u64 = 2;
const FP_RATE: f64 = 0.3;
const JITTER: f64 = 0.02;
const PLACEMENT_ATTEMPTS: usize = 50;

/// Seed offset separating the test split from the calibration split.
pub const TEST_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// First record of `generate(&BiasScenario::classification(42, 1))` as JSON.
pub const REFERENCE_RECORD: &str = r#"{"id":"c000000","logits":[0.0,1.3768935213371025],"ref_label":1,"protected":0,"counterfactual_logits":[0.0,0.5701305493816551]}"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasScenario {
    pub seed: u64,
    pub n_records: usize,
    pub group1_fraction: f64,
    pub base_accuracy: f64,
    /// Multiplier on protected-group positive-class probability
    /// (classification) or true-positive confidence (detection).
    pub confidence_suppression: f64,
    /// Probability that the emitted protected attribute is flipped.
    pub label_noise: f64,
    pub task: Task,
    /// Inclusive range of ground-truth objects per image.
    pub boxes_per_image: (usize, usize),
    pub num_classes: usize,
}

impl Default for BiasScenario {
    fn default() -> Self {
        BiasScenario {
            seed: 0,
            n_records: 1000,
            group1_fraction: 0.3,
            base_accuracy: 0.95,
            confidence_suppression: 0.8,
            label_noise: 0.0,
            task: Task::Classification,
            boxes_per_image: (1, 4),
            num_classes: 2,
        }
    }
}

impl BiasScenario {
    pub fn classification(seed: u64, n_records: usize) -> Self {
        BiasScenario {
            seed,
            n_records,
            ..Default::default()
        }
    }

    pub fn detection(seed: u64, n_records: usize) -> Self {
        BiasScenario {
            seed,
            n_records,
            task: Task::Detection,
            ..Default::default()
        }
    }

    pub fn with_suppression(mut self, s: f64) -> Self {
        self.confidence_suppression = s;
        self
    }

    /// The same scenario under a different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        BiasScenario {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.group1_fraction) {
            return Err(Error::param("scenario.group1_fraction", "must lie in (0, 1)"));
        }
        if !open(self.base_accuracy) {
            return Err(Error::param("scenario.base_accuracy", "must lie in (0, 1)"));
        }
        if !(self.confidence_suppression > 0.0 && self.confidence_suppression <= 1.0) {
            return Err(Error::param("scenario.confidence_suppression", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::param("scenario.label_noise", "must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("scenario.num_classes", "need at least 2 classes"));
        }
        let (lo, hi) = self.boxes_per_image;
        if lo > hi {
            return Err(Error::param("scenario.boxes_per_image", "min exceeds max"));
        }
        Ok(())
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate(scenario: &BiasScenario) -> Result<Dataset> {
    scenario.validate()?;
    Ok(match scenario.task {
        Task::Classification => Dataset::Classification(par::map_range(scenario.n_records, |i| {
            classification_record(scenario, i)
        })),
        Task::Detection => Dataset::Detection(par::map_range(scenario.n_records, |i| {
            detection_record(scenario, i)
        })),
    })
}

/// Calibration split (the scenario's seed) and test split (offset seed).
pub fn generate_split(scenario: &BiasScenario) -> Result<(Dataset, Dataset)> {
    let test = scenario.reseeded(scenario.seed ^ TEST_SEED_OFFSET);
    Ok((generate(scenario)?, generate(&test)?))
}

fn emitted_group(rng: &mut ChaCha8Rng, scenario: &BiasScenario) -> (bool, Group) {
    let protected = rng.random::<f64>() < scenario.group1_fraction;
    let flipped = rng.random::<f64>() < scenario.label_noise;
    let group = if protected != flipped {
        Group::Protected
    } else {
        Group::NonProtected
    };
    (protected, group)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Multiplies the softmax probability of `class` by `s`, rescaling the
/// other classes, by adjusting that class's logit only.
fn suppress(logits: &[f64], class: usize, s: f64) -> Vec<f64> {
    let rest = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != class)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, log_add_exp);
    let z = logits[class];
    let mut out = logits.to_vec();
    out[class] = z + s.ln() + rest - log_add_exp(rest, (1.0 - s).ln() + z);
    out
}

fn classification_record(scenario: &BiasScenario, index: usize) -> ClassificationRecord {
    let mut rng = record_rng(scenario.seed, index);
    let k = scenario.num_classes;
    let (protected, group) = emitted_group(&mut rng, scenario);
    let label = rng.random_range(0..k);
    let target = if rng.random::<f64>() < scenario.base_accuracy {
        label
    } else {
        (label + 1 + rng.random_range(0..k - 1)) % k
    };
    let margin = Gamma::new(MARGIN_SHAPE, MARGIN_SCALE)
        .expect("valid gamma")
        .sample(&mut rng);
    let mut fair = vec![0.0; k];
    fair[target] = margin;
    let biased = suppress(&fair, POSITIVE_CLASS, scenario.confidence_suppression);
    let (logits, counterfactual) = if protected {
        (biased, fair)
    } else {
        (fair, biased)
    };
    ClassificationRecord {
        id: format!("c{index:06}"),
        logits,
        ref_label: label,
        protected: group,
        counterfactual_logits: Some(counterfactual),
    }
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

fn random_box(rng: &mut ChaCha8Rng, class_id: u32) -> BoundingBox {
    let (iw, ih) = (f64::from(IMAGE_W), f64::from(IMAGE_H));
    let w = rng.random_range(0.08..0.3) * iw;
    let h = rng.random_range(0.08..0.3) * ih;
    let x = rng.random_range(0.0..iw - w);
    let y = rng.random_range(0.0..ih - h);
    BoundingBox::new(x, y, w, h, class_id)
}

fn detection_record(scenario: &BiasScenario, index: usize) -> DetectionRecord {
    let mut rng = record_rng(scenario.seed, index);
    let (protected, group) = emitted_group(&mut rng, scenario);
    let classes = scenario.num_classes as u32;
    let (lo, hi) = scenario.boxes_per_image;
    let wanted = rng.random_range(lo..=hi);
    let mut ground_truth: Vec<BoundingBox> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let class_id = rng.random_range(0..classes);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let candidate = random_box(&mut rng, class_id);
            if ground_truth.iter().all(|g| !overlaps(g, &candidate)) {
                ground_truth.push(candidate);
                break;
            }
        }
    }

    let noise = Normal::new(0.0, JITTER).expect("valid normal");
    let tp_conf = Beta::new(TP_CONFIDENCE.0, TP_CONFIDENCE.1).expect("valid beta");
    let fp_conf = Beta::new(FP_CONFIDENCE.0, FP_CONFIDENCE.1).expect("valid beta");
    let mut predictions = Vec::new();
    for g in &ground_truth {
        if rng.random::<f64>() >= scenario.base_accuracy {
            continue;
        }
        let x = g.x + noise.sample(&mut rng) * g.w;
        let y = g.y + noise.sample(&mut rng) * g.h;
        let w = g.w * noise.sample(&mut rng).exp();
        let h = g.h * noise.sample(&mut rng).exp();
        let mut conf = tp_conf.sample(&mut rng);
        if protected {
            conf *= scenario.confidence_suppression;
        }
        predictions.push(BoundingBox::new(x, y, w, h, g.class_id).with_confidence(conf));
    }
    let spurious = Binomial::new(FP_TRIALS, FP_RATE)
        .expect("valid binomial")
        .sample(&mut rng);
    for _ in 0..spurious {
        let class_id = rng.random_range(0..classes);
        let conf = fp_conf.sample(&mut rng);
        predictions.push(random_box(&mut rng, class_id).with_confidence(conf));
    }

    DetectionRecord {
        id: format!("d{index:06}"),
        protected: group,
        image_w: IMAGE_W,
        image_h: IMAGE_H,
        predictions,
        ground_truth,
    }
    .validate()
    .expect("generated boxes lie inside the image")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{softmax, true_class_confidence};

    #[test]
    fn reference_record() {
        let Dataset::Classification(r) = generate(&BiasScenario::classification(42, 1)).unwrap() else {
            panic!("wrong task");
        };
        assert_eq!(serde_json::to_string(&r[0]).unwrap(), REFERENCE_RECORD);
    }

    #[test]
    fn suppression_scales_one_probability() {
        let logits = vec![0.3, 1.2, -0.4];
        let p = softmax(&logits);
        let q = softmax(&suppress(&logits, 1, 0.8));
        assert!((q[1] - 0.8 * p[1]).abs() < 1e-12);
        let rest = (1.0 - 0.8 * p[1]) / (1.0 - p[1]);
        assert!((q[0] - rest * p[0]).abs() < 1e-12);
        assert!((q[2] - rest * p[2]).abs() < 1e-12);
        assert_eq!(suppress(&logits, 1, 1.0), logits);
    }

    #[test]
    fn same_seed_same_data() {
        let s = BiasScenario::detection(7, 50);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let c = BiasScenario::classification(7, 50);
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        assert_ne!(generate(&c).unwrap(), generate(&c.reseeded(8)).unwrap());
    }

    #[test]
    fn invalid_fraction_rejected() {
        let s = BiasScenario {
            group1_fraction: 1.5,
            ..Default::default()
        };
        assert_eq!(s.validate().unwrap_err().code(), "CONFIG_ERROR");
    }

    #[test]
    fn protected_fraction_within_binomial_noise() {
        let s = BiasScenario {
            group1_fraction: 0.5,
            ..BiasScenario::classification(3, 10_000)
        };
        let [_, g1] = generate(&s).unwrap().group_counts();
        assert!((g1 as f64 - 5000.0).abs() <= 3.0 * (10_000.0f64 / 4.0).sqrt());
    }

    #[test]
    fn suppression_lowers_protected_confidence() {
        let data = generate(&BiasScenario::classification(11, 4000)).unwrap();
        let records = data.as_classification().unwrap();
        let mut by_group: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for r in records.iter().filter(|r| r.ref_label == POSITIVE_CLASS) {
            by_group[r.protected.index()].push(true_class_confidence(r));
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var / v.len() as f64)
        };
        let (m0, se0) = stats(&by_group[0]);
        let (m1, se1) = stats(&by_group[1]);
        assert!(m0 - m1 > 3.0 * (se0 + se1).sqrt(), "{m0} vs {m1}");
    }

    fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn no_suppression_no_group_difference() {
        let s = BiasScenario {
            group1_fraction: 0.5,
            ..BiasScenario::classification(5, 2000).with_suppression(1.0)
        };
        let data = generate(&s).unwrap();
        let records = data.as_classification().unwrap();
        let mut by_group: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for r in records {
            by_group[r.protected.index()].push(true_class_confidence(r));
        }
        let (n0, n1) = (by_group[0].len() as f64, by_group[1].len() as f64);
        let critical = 1.358 * ((n0 + n1) / (n0 * n1)).sqrt();
        let [a, b] = by_group;
        assert!(ks_statistic(a, b) < critical);
    }

    #[test]
    fn detection_ground_truth_does_not_overlap() {
        let data = generate(&BiasScenario::detection(1, 200)).unwrap();
        for r in data.as_detection().unwrap() {
            assert!(!r.ground_truth.is_empty() && r.ground_truth.len() <= 4);
            for (i, a) in r.ground_truth.iter().enumerate() {
                for b in &r.ground_truth[i + 1..] {
                    assert!(!overlaps(a, b));
                }
            }
            assert!(r.predictions.iter().all(|b| b.confidence.is_some()));
        }
    }
}
