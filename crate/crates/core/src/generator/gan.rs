//! Adversarial training of one class's generator with a non-saturating
//! logistic loss and fixed-probability discriminator augmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GeneratorArch, GeneratorBundle, NetworkConfig, LEAK};
use crate::data::{ImageSample, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, Padding, ParamStore, Tensor, Var};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::train::batch_tensor;

pub const MIN_CLASS_IMAGES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: (f64, f64),
    /// Per-sample probability of augmenting a discriminator input.
    pub augment_p: f64,
    pub seed: u64,
    pub net: NetworkConfig,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            epochs: 30,
            batch_size: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            betas: (0.0, 0.99),
            augment_p: 0.2,
            seed: 0,
            net: NetworkConfig::default(),
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.augment_p) {
            return Err(Error::config(format!("augment_p {} outside [0, 1]", self.augment_p)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("GAN epochs and batch size must be positive"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::config("GAN learning rates must be positive"));
        }
        Ok(())
    }
}

/// Conv / leaky ReLU / 2× average pool blocks down to the constant-input
/// resolution, a minibatch standard-deviation channel, then a linear logit.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    blocks: usize,
    params: ParamStore<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(arch: &GeneratorArch, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 2);
        let mut p = ParamStore::new();
        let mut cin = 1;
        let blocks = arch.stages();
        for i in 0..blocks {
            let cout = (arch.net.disc_width << i).min(256);
            p.add_conv(&format!("d{i}"), cin, cout, 3, &mut rng);
            cin = cout;
        }
        let side = arch.net.const_size;
        p.add_linear("logit", (cin + 1) * side * side, 1, 1.0, 0.0, &mut rng);
        Discriminator { blocks, params: p }
    }

    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for i in 0..self.blocks {
            h = g.conv2d(h, p[2 * i], p[2 * i + 1], Padding::Zero);
            h = g.leaky_relu(h, LEAK);
            h = g.avg_pool2(h);
        }
        let h = g.minibatch_stddev(h);
        let n = g.value(h).shape()[0];
        let flat = g.value(h).numel() / n;
        let h = g.reshape(h, vec![n, flat]);
        g.linear(h, p[2 * self.blocks], p[2 * self.blocks + 1])
    }
}

/// Mean of `softplus(sign · l)` and its gradient w.r.t. the logits.
fn softplus_loss<T: Scalar>(logits: &[T], sign: f64) -> (T, Vec<T>) {
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .map(|l| {
            let a = sign * l.to_f64_lossy();
            total += a.max(0.0) + (-a.abs()).exp().ln_1p();
            T::lit(sign / (1.0 + (-a).exp()) / n)
        })
        .collect();
    (T::lit(total / n), grad)
}

/// Random flip plus circular translation up to `size / 8`, applied with
/// probability `p` per sample; returns a gather index over `[N, 1, H, W]`.
fn augment_index<R: Rng>(n: usize, h: usize, w: usize, p: f64, rng: &mut R) -> Vec<usize> {
    let reach = (h.min(w) / 8) as i64;
    let mut index = Vec::with_capacity(n * h * w);
    for s in 0..n {
        let on = p > 0.0 && rng.random::<f64>() < p;
        let (flip, dy, dx) = if on {
            (
                rng.random::<bool>(),
                rng.random_range(-reach..=reach),
                rng.random_range(-reach..=reach),
            )
        } else {
            (false, 0, 0)
        };
        for y in 0..h {
            let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let mut sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                if flip {
                    sx = w - 1 - sx;
                }
                index.push(s * h * w + sy * w + sx);
            }
        }
    }
    index
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochLog {
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
}

#[derive(Clone, Debug)]
pub struct GanTraining<T> {
    pub bundle: GeneratorBundle<T>,
    pub log: Vec<GanEpochLog>,
}

fn normal_batch<T: Scalar, R: Rng>(n: usize, d: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..n * d)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect();
    Tensor::new(vec![n, d], data)
}

/// Trains class `class`'s generator on `class_data`, which must hold only
/// samples of that class.
pub fn train_generator<T: Scalar>(
    class_data: &LabeledDataset,
    class: usize,
    cfg: &GanTrainConfig,
) -> Result<GanTraining<T>> {
    cfg.validate()?;
    if let Some(s) = class_data.samples().iter().find(|s| s.class_label != Some(class)) {
        return Err(Error::contract(format!(
            "sample `{}` does not belong to class {class}",
            s.id
        )));
    }
    if class_data.len() < MIN_CLASS_IMAGES {
        return Err(Error::config(format!(
            "class {class}: generator training needs at least {MIN_CLASS_IMAGES} images, got {}",
            class_data.len()
        )));
    }
    let first = &class_data.samples()[0];
    let size = first.height;
    let check = |s: &ImageSample| {
        if (s.channels, s.height, s.width) != (1, size, size) {
            Err(Error::contract(format!(
                "sample `{}`: generator training needs square single-channel images of side {size}",
                s.id
            )))
        } else {
            Ok(())
        }
    };
    let arch = GeneratorArch::new(size, cfg.net.clone())?;
    let mut gen = GeneratorBundle::<T>::init(class, arch, cfg.seed)?;
    let disc = Discriminator::<T>::init(&gen.arch, cfg.seed);
    let mut d_params = disc.params.clone();
    let mut adam_g = Adam::new(&gen.params, cfg.betas.0, cfg.betas.1);
    let mut adam_d = Adam::new(&d_params, cfg.betas.0, cfg.betas.1);
    let mut rng = stream_rng(cfg.seed, 3);
    let dz = cfg.net.latent_dim;
    let mut order: Vec<usize> = (0..class_data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut g_sum, mut d_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImageSample> = idx.iter().map(|&i| &class_data.samples()[i]).collect();
            let n = batch.len();
            let real = batch_tensor::<T>(&batch, check)?;

            // discriminator step
            let fake = {
                let mut g = Graph::new();
                let p = g.bind(&gen.params);
                let z = g.input(normal_batch(n, dz, &mut rng));
                let img = gen.forward(&mut g, &p, z);
                g.value(img).clone()
            };
            let mut g = Graph::new();
            let pd = g.bind(&d_params);
            let xr = g.input(real);
            let xr = g.gather(xr, augment_index(n, size, size, cfg.augment_p, &mut rng), vec![n, 1, size, size]);
            let xf = g.input(fake);
            let xf = g.gather(xf, augment_index(n, size, size, cfg.augment_p, &mut rng), vec![n, 1, size, size]);
            let lr_ = disc.forward(&mut g, &pd, xr);
            let lf = disc.forward(&mut g, &pd, xf);
            let (vr, gr) = softplus_loss(g.value(lr_).data(), -1.0);
            let (vf, gf) = softplus_loss(g.value(lf).data(), 1.0);
            let d_loss = vr.to_f64_lossy() + vf.to_f64_lossy();
            if !d_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let a = g.attach_loss(lr_, vr, gr);
            let b = g.attach_loss(lf, vf, gf);
            let grads = g.backward(&[a, b]).collect(&pd, &d_params);
            adam_d.update(&mut d_params, &grads, cfg.lr_d);

            // generator step
            let mut g = Graph::new();
            let pg = g.bind(&gen.params);
            let pd = g.bind(&d_params);
            let z = g.input(normal_batch(n, dz, &mut rng));
            let img = gen.forward(&mut g, &pg, z);
            let img = g.gather(img, augment_index(n, size, size, cfg.augment_p, &mut rng), vec![n, 1, size, size]);
            let l = disc.forward(&mut g, &pd, img);
            let (vg, gg) = softplus_loss(g.value(l).data(), -1.0);
            if !vg.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let root = g.attach_loss(l, vg, gg);
            let grads = g.backward(&[root]).collect(&pg, &gen.params);
            adam_g.update(&mut gen.params, &grads, cfg.lr_g);

            g_sum += vg.to_f64_lossy();
            d_sum += d_loss;
            batches += 1;
        }
        let entry = GanEpochLog {
            epoch,
            g_loss: g_sum / batches as f64,
            d_loss: d_sum / batches as f64,
        };
        log::debug!("class {class} gan epoch {epoch}: g {:.4} d {:.4}", entry.g_loss, entry.d_loss);
        log.push(entry);
    }
    Ok(GanTraining { bundle: gen, log })
}
