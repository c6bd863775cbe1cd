//! Evaluation metrics: pixel confusion counts and the segmentation scores
//! derived from them, per-class classification scores, and FID.

mod fid;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fid::{
    fid_score, frechet_distance, gaussian_stats, FeatureExtractor, FidResult, GaussianStats, RandomConvExtractor,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

/// Counts over two binary maps; any nonzero value is foreground.
pub fn confusion_counts(pred: &[u8], target: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return Err(Error::contract(format!(
            "prediction has {} pixels, target has {}",
            pred.len(),
            target.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Mean of foreground and background IoU.
    #[default]
    TwoClassMean,
    ForegroundOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub iou_foreground: f64,
    pub iou_background: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

/// `num / den`, with `0 / 0` read as a perfect score.
fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn ratio_or_zero(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn segmentation_metrics(c: &ConfusionCounts, mode: MiouMode) -> Result<SegmentationMetrics> {
    if c.total() == 0 {
        return Err(Error::contract("segmentation metrics need at least one pixel"));
    }
    let iou_fg = ratio_or_one(c.tp, c.tp + c.fp + c.fn_);
    let iou_bg = ratio_or_one(c.tn, c.tn + c.fp + c.fn_);
    Ok(SegmentationMetrics {
        miou: match mode {
            MiouMode::TwoClassMean => (iou_fg + iou_bg) / 2.0,
            MiouMode::ForegroundOnly => iou_fg,
        },
        iou_foreground: iou_fg,
        iou_background: iou_bg,
        dice: ratio_or_one(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        specificity: ratio_or_one(c.tn, c.tn + c.fp),
        sensitivity: ratio_or_one(c.tp, c.tp + c.fn_),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassScores>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Per-class precision/recall/F1 (0/0 → 0), accuracy and unweighted macro-F1.
pub fn classification_report(preds: &[usize], targets: &[usize], classes: usize) -> Result<ClassificationReport> {
    if preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::contract("classification report needs at least one sample"));
    }
    if let Some(bad) = preds.iter().chain(targets).find(|&&c| c >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    let mut tp = vec![0u64; classes];
    let mut pred_count = vec![0u64; classes];
    let mut support = vec![0u64; classes];
    for (&p, &t) in preds.iter().zip(targets) {
        pred_count[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let per_class: Vec<ClassScores> = (0..classes)
        .map(|k| {
            let precision = ratio_or_zero(tp[k], pred_count[k]);
            let recall = ratio_or_zero(tp[k], support[k]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: support[k] as usize,
            }
        })
        .collect();
    let correct: u64 = tp.iter().sum();
    Ok(ClassificationReport {
        accuracy: correct as f64 / preds.len() as f64,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64,
        per_class,
    })
}

/// Conventions recorded next to every serialized metric block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConventions {
    pub miou_mode: MiouMode,
    pub zero_division: String,
    pub extractor: Option<String>,
}

impl MetricConventions {
    pub fn new(miou_mode: MiouMode, extractor: Option<String>) -> Self {
        MetricConventions {
            miou_mode,
            zero_division: "segmentation ratios: 0/0 = 1; precision/recall/f1: 0/0 = 0".into(),
            extractor,
        }
    }
}
