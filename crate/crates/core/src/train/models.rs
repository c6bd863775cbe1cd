use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_layout, load_checkpoint, save_checkpoint};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{Graph, Padding, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    SmallCnnClassifier,
    SmallUnetSegmenter,
}

impl ArchitectureId {
    /// Spatial sides must be multiples of this.
    pub fn size_multiple(self) -> usize {
        match self {
            ArchitectureId::SmallCnnClassifier => 16,
            ArchitectureId::SmallUnetSegmenter => 4,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchitectureId,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Class count for the classifier, 1 for the segmenter.
    pub outputs: usize,
    /// Channel count of the first block.
    pub base_width: usize,
}

impl ModelSpec {
    pub fn classifier(in_channels: usize, height: usize, width: usize, classes: usize, base_width: usize) -> Self {
        ModelSpec {
            arch: ArchitectureId::SmallCnnClassifier,
            in_channels,
            height,
            width,
            outputs: classes,
            base_width,
        }
    }

    pub fn segmenter(in_channels: usize, height: usize, width: usize, base_width: usize) -> Self {
        ModelSpec {
            arch: ArchitectureId::SmallUnetSegmenter,
            in_channels,
            height,
            width,
            outputs: 1,
            base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.arch.size_multiple();
        if self.height == 0 || self.width == 0 || self.height % m != 0 || self.width % m != 0 {
            return Err(Error::config(format!(
                "{:?} needs image sides divisible by {m}, got {}x{}",
                self.arch, self.height, self.width
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.outputs == 0 {
            return Err(Error::config("model channels, width and outputs must be positive"));
        }
        if self.arch == ArchitectureId::SmallCnnClassifier && self.outputs < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        Ok(())
    }

    /// Per-sample output length: class probabilities or a probability map.
    pub fn output_len(&self) -> usize {
        match self.arch {
            ArchitectureId::SmallCnnClassifier => self.outputs,
            ArchitectureId::SmallUnetSegmenter => self.height * self.width,
        }
    }

    fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = self.base_width;
        match self.arch {
            ArchitectureId::SmallCnnClassifier => {
                let mut cin = self.in_channels;
                for (i, mult) in [1, 2, 4, 8].into_iter().enumerate() {
                    p.add_conv(&format!("block{i}"), cin, w * mult, 3, &mut rng);
                    cin = w * mult;
                }
                p.add_linear("head", cin, self.outputs, 1.0, 0.0, &mut rng);
            }
            ArchitectureId::SmallUnetSegmenter => {
                let layers = [
                    ("enc1a", self.in_channels, w),
                    ("enc1b", w, w),
                    ("enc2a", w, 2 * w),
                    ("enc2b", 2 * w, 2 * w),
                    ("mid_a", 2 * w, 4 * w),
                    ("mid_b", 4 * w, 4 * w),
                    ("dec2a", 6 * w, 2 * w),
                    ("dec2b", 2 * w, 2 * w),
                    ("dec1a", 3 * w, w),
                    ("dec1b", w, w),
                ];
                for (name, cin, cout) in layers {
                    p.add_conv(name, cin, cout, 3, &mut rng);
                }
                p.add_conv("head", w, 1, 1, &mut rng);
            }
        }
        p
    }
}

/// A trained or freshly initialized backbone: spec plus parameter snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

const CHECKPOINT_KIND: &str = "model";

impl<T: Scalar> ModelHandle<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec.init(seed);
        Ok(ModelHandle { spec, params })
    }

    /// Probabilities: `[N, C]` rows for the classifier, `[N, 1, H, W]` for the segmenter.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        match self.spec.arch {
            ArchitectureId::SmallCnnClassifier => {
                let mut h = x;
                for i in 0..4 {
                    h = g.conv2d(h, p[2 * i], p[2 * i + 1], Padding::Zero);
                    h = g.relu(h);
                    h = g.max_pool2(h);
                }
                let f = g.global_avg_pool(h);
                let logits = g.linear(f, p[8], p[9]);
                g.softmax(logits)
            }
            ArchitectureId::SmallUnetSegmenter => {
                let mut layer = 0;
                let mut conv = |g: &mut Graph<T>, h: Var| {
                    let out = g.conv2d(h, p[2 * layer], p[2 * layer + 1], Padding::Zero);
                    layer += 1;
                    g.relu(out)
                };
                let e1 = conv(g, x);
                let e1 = conv(g, e1);
                let d = g.max_pool2(e1);
                let e2 = conv(g, d);
                let e2 = conv(g, e2);
                let d = g.max_pool2(e2);
                let m = conv(g, d);
                let m = conv(g, m);
                let u = g.upsample2(m);
                let u = g.concat(u, e2);
                let u = conv(g, u);
                let u = conv(g, u);
                let u = g.upsample2(u);
                let u = g.concat(u, e1);
                let u = conv(g, u);
                let u = conv(g, u);
                let logits = g.conv2d(u, p[20], p[21], Padding::Zero);
                g.sigmoid(logits)
            }
        }
    }

    pub fn check_input(&self, s: &ImageSample) -> Result<()> {
        let spec = &self.spec;
        if (s.channels, s.height, s.width) != (spec.in_channels, spec.height, spec.width) {
            return Err(Error::contract(format!(
                "sample `{}` is {}x{}x{}, model expects {}x{}x{}",
                s.id, s.channels, s.height, s.width, spec.in_channels, spec.height, spec.width
            )));
        }
        Ok(())
    }

    /// Per-sample output vectors (see [`ModelSpec::output_len`]).
    pub fn predict(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<T>>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let x = batch_tensor(chunk, |s| self.check_input(s))?;
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let xv = g.input(x);
            let y = self.forward(&mut g, &p, xv);
            out.extend(g.value(y).data().chunks(self.spec.output_len()).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, params): (ModelSpec, ParamStore<T>) = load_checkpoint(path, CHECKPOINT_KIND)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_owned(),
            reason,
        };
        spec.validate().map_err(|e| bad(e.to_string()))?;
        check_layout(&params, &spec.init::<T>(0)).map_err(bad)?;
        Ok(ModelHandle { spec, params })
    }
}

/// Stacks samples into an `[N, C, H, W]` tensor after checking each one.
pub(crate) fn batch_tensor<T: Scalar>(
    samples: &[&ImageSample],
    check: impl Fn(&ImageSample) -> Result<()>,
) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let mut data = Vec::with_capacity(samples.len() * first.pixels.len());
    for s in samples {
        check(s)?;
        data.extend(s.pixels.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::new(
        vec![samples.len(), first.channels, first.height, first.width],
        data,
    ))
}
