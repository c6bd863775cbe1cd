//! Procedural toy corpus with exact ground-truth masks.
//!
//! Class 0 images hold a smooth background texture only. Class `k ≥ 1` images
//! add `k` bright axis-aligned ellipses; the mask is the exact pixel-centre
//! support of the ellipses, computed before noise is added.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageSample, LabeledDataset, MaskOrigin, Provenance, Task};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Per-class sample counts; overrides `samples_per_class` when set.
    pub class_counts: Option<Vec<usize>>,
    pub class_count: usize,
    /// Ellipse semi-axis range as a fraction of `image_size`.
    pub radius_range: (f64, f64),
    /// Intensity added inside an ellipse.
    pub blob_intensity: (f64, f64),
    /// Base background intensity range.
    pub background: (f64, f64),
    /// Amplitude of the low-frequency background texture.
    pub texture: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            image_size: 64,
            samples_per_class: 50,
            class_counts: None,
            class_count: 2,
            radius_range: (0.08, 0.2),
            blob_intensity: (0.35, 0.6),
            background: (0.15, 0.35),
            texture: 0.06,
            noise: 0.05,
            task: Task::Segmentation,
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    pub fn counts(&self) -> Vec<usize> {
        self.class_counts
            .clone()
            .unwrap_or_else(|| vec![self.samples_per_class; self.class_count])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} is below the minimum of 8", self.image_size));
        }
        if self.class_count < 1 {
            return bad("class_count must be at least 1".into());
        }
        if let Some(c) = &self.class_counts {
            if c.len() != self.class_count {
                return bad(format!("{} class_counts for {} classes", c.len(), self.class_count));
            }
        }
        if self.counts().iter().any(|&n| n < 1) {
            return bad("every class needs at least one sample".into());
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !range_ok(self.radius_range) || self.radius_range.0 <= 0.0 || self.radius_range.1 >= 0.5 {
            return bad(format!("radius_range {:?} must lie within (0, 0.5)", self.radius_range));
        }
        if !range_ok(self.blob_intensity) || !range_ok(self.background) {
            return bad("intensity ranges must be ordered and finite".into());
        }
        if !(self.noise >= 0.0) || !(self.texture >= 0.0) {
            return bad("noise and texture must be non-negative".into());
        }
        Ok(())
    }
}

/// Axis-aligned ellipse in pixel coordinates (pixel `(y, x)` has centre `(y + 0.5, x + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Ellipse {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn class_of(counts: &[usize], index: usize) -> Option<usize> {
    let mut acc = 0;
    for (k, n) in counts.iter().enumerate() {
        acc += n;
        if index < acc {
            return Some(k);
        }
    }
    None
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn toy_sample(spec: &ToyCorpusSpec, index: usize) -> Result<(ImageSample, Vec<Ellipse>)> {
    let counts = spec.counts();
    let class = class_of(&counts, index)
        .ok_or_else(|| Error::config(format!("toy sample index {index} is out of range")))?;
    let size = spec.image_size;
    let s = size as f64;
    let mut rng = sample_rng(spec.seed, index);

    let base = uniform(&mut rng, spec.background);
    let fy = rng.random_range(1..=3) as f64;
    let fx = rng.random_range(1..=3) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let ellipses: Vec<Ellipse> = (0..class)
        .map(|_| {
            // semi-axes of at least 0.75 px always cover the nearest pixel centre
            let ry = (uniform(&mut rng, spec.radius_range) * s).max(0.75);
            let rx = (uniform(&mut rng, spec.radius_range) * s).max(0.75);
            Ellipse {
                cy: rng.random_range(ry..=s - ry),
                cx: rng.random_range(rx..=s - rx),
                ry,
                rx,
            }
        })
        .collect();
    let contrast: Vec<f64> = ellipses.iter().map(|_| uniform(&mut rng, spec.blob_intensity)).collect();

    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("non-negative std");
    let mut pixels = Vec::with_capacity(size * size);
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let arg = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / s + phase;
            let mut v = base + spec.texture * arg.sin();
            for (e, c) in ellipses.iter().zip(&contrast) {
                if e.contains(y, x) {
                    v += c;
                    mask[y * size + x] = 1;
                }
            }
            if spec.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let sample = ImageSample::gray(format!("toy-{index:05}"), size, size, pixels, Provenance::Real)
        .with_label(class)
        .with_mask(mask, MaskOrigin::GroundTruth);
    Ok((sample, ellipses))
}

/// Builds the corpus described by `spec`. Equal specs give bit-identical corpora.
pub fn make_toy_corpus(spec: &ToyCorpusSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let total: usize = spec.counts().iter().sum();
    let samples = (0..total)
        .map(|i| toy_sample(spec, i).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(samples, spec.class_count, spec.task)
}

/// Ellipses drawn into sample `index` of the corpus for `spec`.
pub fn toy_ellipses(spec: &ToyCorpusSpec, index: usize) -> Result<Vec<Ellipse>> {
    spec.validate()?;
    toy_sample(spec, index).map(|(_, e)| e)
}
