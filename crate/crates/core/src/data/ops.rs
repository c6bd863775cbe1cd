use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageSample, LabeledDataset, Task};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios {}/{}/{} must be in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Stratified split into train/val/test. Each class is shuffled with its own
/// stream of `seed`; partitions keep the input order.
pub fn split_dataset(
    d: &LabeledDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    ratios.validate()?;
    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in d.samples().iter().enumerate() {
        strata.entry(s.class_label).or_default().push(i);
    }
    // 0 = train, 1 = val, 2 = test
    let mut part = vec![0u8; d.len()];
    for (key, mut idx) in strata {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(key.map_or(0, |k| k as u64 + 1));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = round_half_up(n as f64 * ratios.train).min(n);
        let n_val = round_half_up(n as f64 * ratios.val).min(n - n_train);
        let n_test = n - n_train - n_val;
        for (which, (count, ratio)) in [(n_train, ratios.train), (n_val, ratios.val), (n_test, ratios.test)]
            .into_iter()
            .enumerate()
        {
            if count == 0 && ratio > 0.0 {
                log::warn!(
                    "class {key:?} has no samples in the {} split",
                    ["train", "val", "test"][which]
                );
            }
        }
        for (j, &i) in idx.iter().enumerate() {
            part[i] = if j < n_train {
                0
            } else if j < n_train + n_val {
                1
            } else {
                2
            };
        }
    }
    let pick = |p: u8| {
        let samples = d
            .samples()
            .iter()
            .zip(&part)
            .filter(|(_, q)| **q == p)
            .map(|(s, _)| s.clone())
            .collect();
        LabeledDataset::new(samples, d.class_count(), d.task())
    };
    Ok((pick(0)?, pick(1)?, pick(2)?))
}

/// Tiles every image into `patch × patch` crops taken every `stride` pixels.
///
/// Each patch is labeled 1 when its cropped mask has any foreground and 0
/// otherwise; the result is a two-class classification dataset that keeps the
/// cropped masks.
pub fn patchify(d: &LabeledDataset, patch: usize, stride: usize) -> Result<LabeledDataset> {
    if stride == 0 {
        return Err(Error::config("patch stride must be positive"));
    }
    if patch == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    let mut out = Vec::new();
    for s in d.samples() {
        if patch > s.height || patch > s.width {
            return Err(Error::config(format!(
                "patch size {patch} exceeds image `{}` ({}×{})",
                s.id, s.height, s.width
            )));
        }
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::contract(format!("sample `{}` has no mask to label patches from", s.id)))?;
        for top in (0..=s.height - patch).step_by(stride) {
            for left in (0..=s.width - patch).step_by(stride) {
                let mut pixels = Vec::with_capacity(s.channels * patch * patch);
                for c in 0..s.channels {
                    for y in top..top + patch {
                        let row = c * s.plane() + y * s.width;
                        pixels.extend_from_slice(&s.pixels[row + left..row + left + patch]);
                    }
                }
                let mut m = Vec::with_capacity(patch * patch);
                for y in top..top + patch {
                    m.extend_from_slice(&mask[y * s.width + left..y * s.width + left + patch]);
                }
                let label = usize::from(m.iter().any(|&v| v != 0));
                out.push(ImageSample {
                    id: format!("{}_y{top}_x{left}", s.id),
                    channels: s.channels,
                    height: patch,
                    width: patch,
                    pixels,
                    provenance: s.provenance,
                    class_label: Some(label),
                    mask: Some(m),
                    mask_origin: s.mask_origin,
                });
            }
        }
    }
    LabeledDataset::new(out, 2, Task::Classification)
}
