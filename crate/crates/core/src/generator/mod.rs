//! Class-specific style-modulated generators.
//!
//! A mapping MLP turns `z` into an intermediate code `w`. The synthesis
//! network starts from a learned constant `z₀`, then repeats
//! upsample → 3×3 conv → per-channel modulation by `affine(w)` → leaky ReLU
//! until the image size is reached, and ends with a 1×1 conv and a sigmoid.

mod gan;
mod source;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_layout, load_checkpoint, save_checkpoint};
use crate::data::{ImageSample, Provenance};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Graph, Padding, ParamStore, Tensor, Var};
use crate::rng::stream_rng;
use crate::scalar::Scalar;

pub use gan::{train_generator, Discriminator, GanEpochLog, GanTrainConfig, GanTraining};
pub use source::{ImageFolderSource, SyntheticSource};

pub const LEAK: f64 = 0.2;

/// Size-independent network hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub style_dim: usize,
    pub const_channels: usize,
    /// Side of the learned constant input.
    pub const_size: usize,
    pub min_channels: usize,
    pub padding: Padding,
    /// First-layer width of the discriminator.
    pub disc_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latent_dim: 64,
            style_dim: 64,
            const_channels: 128,
            const_size: 4,
            min_channels: 8,
            padding: Padding::Zero,
            disc_width: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub image_size: usize,
    pub net: NetworkConfig,
}

impl GeneratorArch {
    pub fn new(image_size: usize, net: NetworkConfig) -> Result<Self> {
        let arch = GeneratorArch { image_size, net };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.net;
        if n.latent_dim == 0 || n.style_dim == 0 || n.const_channels == 0 || n.min_channels == 0 || n.disc_width == 0 {
            return Err(Error::config("generator dimensions must be positive"));
        }
        if n.const_size < 1 {
            return Err(Error::config("const_size must be at least 1"));
        }
        let ratio = self.image_size / n.const_size;
        if self.image_size % n.const_size != 0 || ratio < 2 || !ratio.is_power_of_two() {
            return Err(Error::config(format!(
                "image size {} must be const_size {} times a power of two (at least 2)",
                self.image_size, n.const_size
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        (self.image_size / self.net.const_size).trailing_zeros() as usize
    }

    /// Output pixels per constant-grid cell along each axis.
    pub fn upscale(&self) -> usize {
        self.image_size / self.net.const_size
    }

    fn stage_channels(&self, i: usize) -> usize {
        (self.net.const_channels >> (i + 1)).max(self.net.min_channels)
    }

    fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = stream_rng(seed, 0);
        let n = &self.net;
        let mut p = ParamStore::new();
        p.add(
            "const",
            normal_tensor(vec![n.const_channels, n.const_size, n.const_size], 1.0, &mut rng),
        );
        p.add_linear("map0", n.latent_dim, n.style_dim, 2f64.sqrt(), 0.0, &mut rng);
        p.add_linear("map1", n.style_dim, n.style_dim, 2f64.sqrt(), 0.0, &mut rng);
        let mut cin = n.const_channels;
        for i in 0..self.stages() {
            let cout = self.stage_channels(i);
            p.add_conv(&format!("conv{i}"), cin, cout, 3, &mut rng);
            p.add_linear(&format!("style{i}"), n.style_dim, cout, 0.25, 1.0, &mut rng);
            cin = cout;
        }
        p.add_conv("to_img", cin, 1, 1, &mut rng);
        p
    }
}

/// Latent draw `z ~ N(0, I)`; `w` is filled in by [`GeneratorBundle::map_latents`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w: Option<Vec<f64>>,
}

/// `count` i.i.d. standard-normal codes of dimension `dim`.
pub fn sample_latents(count: usize, dim: usize, seed: u64) -> Result<Vec<LatentCode>> {
    if count == 0 {
        return Err(Error::config("latent count must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::config("latent dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| LatentCode {
            z: (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
            w: None,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    class_id: usize,
    seed: u64,
    arch: GeneratorArch,
}

/// Trained (or freshly initialized) generator for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBundle<T> {
    pub class_id: usize,
    pub seed: u64,
    pub arch: GeneratorArch,
    pub params: ParamStore<T>,
}

const CHECKPOINT_KIND: &str = "generator";
const GEN_CHUNK: usize = 32;

impl<T: Scalar> GeneratorBundle<T> {
    pub fn init(class_id: usize, arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = arch.init(seed);
        Ok(GeneratorBundle {
            class_id,
            seed,
            arch,
            params,
        })
    }

    pub fn checkpoint_name(class_id: usize) -> String {
        format!("gen_class_{class_id}.ckpt")
    }

    /// `z → w` on the tape.
    pub(crate) fn mapping(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Var {
        let h = g.linear(z, p[1], p[2]);
        let h = g.leaky_relu(h, LEAK);
        let w = g.linear(h, p[3], p[4]);
        g.leaky_relu(w, LEAK)
    }

    /// `(z₀ [N, C, s, s], w [N, d_w]) → image [N, 1, H, W]`.
    pub(crate) fn synthesis(&self, g: &mut Graph<T>, p: &[Var], z0: Var, w: Var) -> Var {
        let mut h = z0;
        for i in 0..self.arch.stages() {
            let base = 5 + 4 * i;
            h = g.upsample2(h);
            h = g.conv2d(h, p[base], p[base + 1], self.arch.net.padding);
            let s = g.linear(w, p[base + 2], p[base + 3]);
            h = g.modulate(h, s);
            h = g.leaky_relu(h, LEAK);
        }
        let last = 5 + 4 * self.arch.stages();
        let out = g.conv2d(h, p[last], p[last + 1], self.arch.net.padding);
        g.sigmoid(out)
    }

    /// Full generator for a batch of `z` rows.
    pub(crate) fn forward(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Var {
        let n = g.value(z).dims2().0;
        let w = self.mapping(g, p, z);
        let z0 = g.broadcast(p[0], n);
        self.synthesis(g, p, z0, w)
    }

    fn check_latents(&self, latents: &[LatentCode]) -> Result<()> {
        let d = self.arch.net.latent_dim;
        for (i, l) in latents.iter().enumerate() {
            if l.z.len() != d {
                return Err(Error::contract(format!(
                    "latent {i} has dimension {}, generator expects {d}",
                    l.z.len()
                )));
            }
        }
        Ok(())
    }

    fn z_tensor(&self, latents: &[LatentCode]) -> Tensor<T> {
        let data = latents.iter().flat_map(|l| l.z.iter().map(|&v| T::lit(v))).collect();
        Tensor::new(vec![latents.len(), self.arch.net.latent_dim], data)
    }

    /// Fills in `w` for each code.
    pub fn map_latents(&self, latents: &[LatentCode]) -> Result<Vec<LatentCode>> {
        self.check_latents(latents)?;
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(GEN_CHUNK) {
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let z = g.input(self.z_tensor(chunk));
            let w = self.mapping(&mut g, &p, z);
            let dw = self.arch.net.style_dim;
            for (l, row) in chunk.iter().zip(g.value(w).data().chunks(dw)) {
                out.push(LatentCode {
                    z: l.z.clone(),
                    w: Some(row.iter().map(|v| v.to_f64_lossy()).collect()),
                });
            }
        }
        Ok(out)
    }

    /// Raw image planes `[H·W]` per latent.
    pub fn render(&self, latents: &[LatentCode]) -> Result<Vec<Vec<T>>> {
        self.check_latents(latents)?;
        let plane = self.arch.image_size * self.arch.image_size;
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(GEN_CHUNK) {
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let z = g.input(self.z_tensor(chunk));
            let img = self.forward(&mut g, &p, z);
            out.extend(g.value(img).data().chunks(plane).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// One synthetic, maskless sample of this generator's class per latent.
    pub fn generate(&self, latents: &[LatentCode]) -> Result<Vec<ImageSample>> {
        let size = self.arch.image_size;
        Ok(self
            .render(latents)?
            .into_iter()
            .enumerate()
            .map(|(i, px)| {
                let pixels = px.iter().map(|v| v.to_f64_lossy().clamp(0.0, 1.0) as f32).collect();
                ImageSample::gray(
                    format!("syn-c{}-{i:05}", self.class_id),
                    size,
                    size,
                    pixels,
                    Provenance::Synthetic,
                )
                .with_label(self.class_id)
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BundleMeta {
            class_id: self.class_id,
            seed: self.seed,
            arch: self.arch.clone(),
        };
        save_checkpoint(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (BundleMeta, ParamStore<T>) = load_checkpoint(path, CHECKPOINT_KIND)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_owned(),
            reason,
        };
        meta.arch.validate().map_err(|e| bad(e.to_string()))?;
        check_layout(&params, &meta.arch.init::<T>(0)).map_err(bad)?;
        Ok(GeneratorBundle {
            class_id: meta.class_id,
            seed: meta.seed,
            arch: meta.arch,
            params,
        })
    }

    /// Largest translation (in constant-grid cells) accepted by
    /// [`measure_equivariance`]; one cell spans `image_size / const_size`
    /// output pixels, so this bounds output shifts to a quarter of the image.
    pub fn max_shift(&self) -> i64 {
        (self.arch.net.const_size / 4).max(1) as i64
    }
}

/// Circular shift of every `[h, w]` plane of `data` by `(dy, dx)`.
pub fn roll_planes<T: Copy>(data: &[T], h: usize, w: usize, dy: i64, dx: i64) -> Vec<T> {
    let mut out = data.to_vec();
    let (h_i, w_i) = (h as i64, w as i64);
    for (src, dst) in data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            let ty = (y as i64 + dy).rem_euclid(h_i) as usize;
            for x in 0..w {
                let tx = (x as i64 + dx).rem_euclid(w_i) as usize;
                dst[ty * w + tx] = src[y * w + x];
            }
        }
    }
    out
}

/// Mean over (latent, shift) pairs of the mean absolute difference between
/// `g(t[z₀]; w)` and `t[g(z₀; w)]`, where `t` is a circular translation given
/// in constant-grid cells and scaled by the upsampling factor on the output.
pub fn measure_equivariance<T: Scalar>(
    gen: &GeneratorBundle<T>,
    shifts: &[(i64, i64)],
    latents: &[LatentCode],
) -> Result<f64> {
    if shifts.is_empty() || latents.is_empty() {
        return Err(Error::config("equivariance needs at least one shift and one latent"));
    }
    let bound = gen.max_shift();
    if let Some(s) = shifts.iter().find(|(dy, dx)| dy.abs() > bound || dx.abs() > bound) {
        return Err(Error::contract(format!(
            "shift {s:?} exceeds ±{bound} constant-grid cells"
        )));
    }
    gen.check_latents(latents)?;
    let net = &gen.arch.net;
    let (c0, s0) = (net.const_channels, net.const_size);
    let size = gen.arch.image_size;
    let f = gen.arch.upscale() as i64;
    let z0 = gen.params.tensors()[0].data().to_vec();
    let mut total = 0.0;
    for latent in latents {
        // batch row 0 is the unshifted input, rows 1.. the shifted ones
        let mut consts = z0.clone();
        for &(dy, dx) in shifts {
            consts.extend(roll_planes(&z0, s0, s0, dy, dx));
        }
        let n = shifts.len() + 1;
        let mut g = Graph::new();
        let p = g.bind(&gen.params);
        let z = g.input(gen.z_tensor(std::slice::from_ref(latent)));
        let w = gen.mapping(&mut g, &p, z);
        let w = g.reshape(w, vec![net.style_dim]);
        let w = g.broadcast(w, n);
        let zin = g.input(Tensor::new(vec![n, c0, s0, s0], consts));
        let img = gen.synthesis(&mut g, &p, zin, w);
        let out = g.value(img).data();
        let plane = size * size;
        let base = &out[..plane];
        for (i, &(dy, dx)) in shifts.iter().enumerate() {
            let moved = roll_planes(base, size, size, dy * f, dx * f);
            let shifted = &out[(i + 1) * plane..(i + 2) * plane];
            let mad: f64 = moved
                .iter()
                .zip(shifted)
                .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
                .sum::<f64>()
                / plane as f64;
            total += mad;
        }
    }
    Ok(total / (latents.len() * shifts.len()) as f64)
}
