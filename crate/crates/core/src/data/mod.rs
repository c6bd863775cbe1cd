//! Image samples, labeled datasets, the procedural toy corpus, and on-disk I/O.

mod io;
mod ops;
mod toy;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, quantize_8bit, save_dataset, MANIFEST_FILE};
pub use ops::{patchify, split_dataset, SplitRatios};
pub use toy::{make_toy_corpus, toy_ellipses, Ellipse, ToyCorpusSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    GroundTruth,
    /// Produced by the segmentation model of the given self-training round.
    Pseudo { round: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// One image, channel-major with intensities in `[0, 1]`, plus its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub provenance: Provenance,
    pub class_label: Option<usize>,
    /// Binary `height × width` mask with values in `{0, 1}`.
    pub mask: Option<Vec<u8>>,
    pub mask_origin: Option<MaskOrigin>,
}

impl ImageSample {
    /// Single-channel sample without labels.
    pub fn gray(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>, provenance: Provenance) -> Self {
        ImageSample {
            id: id.into(),
            channels: 1,
            height,
            width,
            pixels,
            provenance,
            class_label: None,
            mask: None,
            mask_origin: None,
        }
    }

    pub fn with_label(mut self, class: usize) -> Self {
        self.class_label = Some(class);
        self
    }

    pub fn with_mask(mut self, mask: Vec<u8>, origin: MaskOrigin) -> Self {
        self.mask = Some(mask);
        self.mask_origin = Some(origin);
        self
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.as_ref().map_or(0, |m| m.iter().filter(|&&v| v != 0).count())
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::contract(format!("sample `{}` has an empty shape", self.id)));
        }
        if self.pixels.len() != self.channels * self.plane() {
            return Err(Error::contract(format!(
                "sample `{}`: {} pixels for shape {}×{}×{}",
                self.id,
                self.pixels.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(format!("sample `{}` has intensities outside [0, 1]", self.id)));
        }
        if let Some(c) = self.class_label {
            if c >= class_count {
                return Err(Error::contract(format!(
                    "sample `{}` has class {c} but only {class_count} classes exist",
                    self.id
                )));
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != self.plane() {
                return Err(Error::contract(format!(
                    "sample `{}`: mask has {} pixels, image plane has {}",
                    self.id,
                    m.len(),
                    self.plane()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::contract(format!("sample `{}`: mask is not binary", self.id)));
            }
        }
        Ok(())
    }
}

/// Ordered samples sharing a task and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<ImageSample>,
    class_count: usize,
    task: Task,
}

impl LabeledDataset {
    pub fn new(samples: Vec<ImageSample>, class_count: usize, task: Task) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::config("class_count must be at least 1"));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate(class_count)?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::contract(format!("duplicate sample id `{}`", s.id)));
            }
            if task == Task::Segmentation && s.mask.is_none() {
                return Err(Error::contract(format!("segmentation sample `{}` has no mask", s.id)));
            }
        }
        Ok(LabeledDataset {
            samples,
            class_count,
            task,
        })
    }

    pub fn empty(class_count: usize, task: Task) -> Self {
        LabeledDataset {
            samples: Vec::new(),
            class_count,
            task,
        }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ImageSample> {
        self.samples
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `n_k` per class; unlabeled samples are not counted.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            if let Some(c) = s.class_label {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Samples of class `k` only, order preserved.
    pub fn restrict_to_class(&self, k: usize) -> LabeledDataset {
        LabeledDataset {
            samples: self
                .samples
                .iter()
                .filter(|s| s.class_label == Some(k))
                .cloned()
                .collect(),
            class_count: self.class_count,
            task: self.task,
        }
    }

    pub fn count_by_provenance(&self, p: Provenance) -> usize {
        self.samples.iter().filter(|s| s.provenance == p).count()
    }

    /// Same samples reinterpreted for another task (validated).
    pub fn with_task(self, task: Task) -> Result<LabeledDataset> {
        LabeledDataset::new(self.samples, self.class_count, task)
    }
}
