//! Fréchet distance between Gaussian fits of image embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Graph, Padding, ParamStore, Tensor};

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_stats<T: Float>(features: &[Vec<T>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::config(format!(
            "gaussian statistics need at least 2 samples, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::contract("feature vectors differ in dimension"));
    }
    let n = features.len() as f64;
    let rows: Vec<DVector<f64>> = features
        .iter()
        .map(|f| DVector::from_iterator(d, f.iter().map(|v| v.to_f64().unwrap_or(f64::NAN))))
        .collect();
    let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n;
    let mut cov = DMatrix::zeros(d, d);
    for r in &rows {
        let c = r - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

/// Symmetric PSD square root with negative eigenvalues clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, clamped at 0.
///
/// `Tr (Σa Σb)^½` is evaluated as the sum of square roots of the eigenvalues of
/// the symmetric matrix `Σa^½ Σb Σa^½`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "cannot compare {}-d and {}-d statistics",
            a.dim(),
            b.dim()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Deterministic image embedding used for FID.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>>;
}

/// Three frozen random 3×3 conv layers (ReLU, 2× average pooling between
/// them) followed by global average pooling.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    params: ParamStore<f32>,
}

impl RandomConvExtractor {
    const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in Self::WIDTHS.iter().enumerate() {
            params.add_conv(&format!("fx{i}"), cin, c, 3, &mut rng);
            cin = c;
        }
        RandomConvExtractor { seed, params }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0)
    }
}

fn to_gray(s: &ImageSample) -> Vec<f32> {
    if s.channels == 1 {
        return s.pixels.clone();
    }
    let plane = s.plane();
    (0..plane)
        .map(|i| (0..s.channels).map(|c| s.pixels[c * plane + i]).sum::<f32>() / s.channels as f32)
        .collect()
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> String {
        format!("random-conv3-gap64-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        Self::WIDTHS[2]
    }

    fn extract(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let (h, w) = (chunk[0].height, chunk[0].width);
            if chunk.iter().any(|s| (s.height, s.width) != (h, w)) || h % 4 != 0 || w % 4 != 0 {
                return Err(Error::contract(
                    "feature extraction needs equally sized images with sides divisible by 4",
                ));
            }
            let data: Vec<f32> = chunk.iter().flat_map(|s| to_gray(s)).collect();
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let mut x = g.input(Tensor::new(vec![chunk.len(), 1, h, w], data));
            for layer in 0..3 {
                x = g.conv2d(x, p[2 * layer], p[2 * layer + 1], Padding::Zero);
                x = g.relu(x);
                if layer < 2 {
                    x = g.avg_pool2(x);
                }
            }
            let f = g.global_avg_pool(x);
            let d = self.dim();
            out.extend(g.value(f).data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub fid: f64,
    pub extractor: String,
    pub real_count: usize,
    pub synthetic_count: usize,
}

pub fn fid_score(real: &LabeledDataset, synth: &LabeledDataset, fx: &dyn FeatureExtractor) -> Result<FidResult> {
    for (name, d) in [("real", real), ("synthetic", synth)] {
        if d.len() < 2 {
            return Err(Error::config(format!("FID needs at least 2 {name} images, got {}", d.len())));
        }
    }
    let feats = |d: &LabeledDataset| fx.extract(&d.samples().iter().collect::<Vec<_>>());
    let a = gaussian_stats(&feats(real)?)?;
    let b = gaussian_stats(&feats(synth)?)?;
    Ok(FidResult {
        fid: frechet_distance(&a, &b)?,
        extractor: fx.id(),
        real_count: real.len(),
        synthetic_count: synth.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_stats() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn identical_points_have_zero_covariance() {
        let s = gaussian_stats(&vec![vec![1.5f32, -2.0, 3.0]; 5]).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(gaussian_stats::<f64>(&[vec![1.0]]), Err(Error::Config(_))));
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = GaussianStats {
            mean: DVector::from_vec(vec![0.0]),
            cov: DMatrix::from_vec(1, 1, vec![1.0]),
        };
        let b = GaussianStats {
            mean: DVector::from_vec(vec![3.0]),
            cov: DMatrix::from_vec(1, 1, vec![1.0]),
        };
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        let c = GaussianStats {
            mean: DVector::from_vec(vec![1.0]),
            cov: DMatrix::from_vec(1, 1, vec![4.0]),
        };
        // (0 - 1)² + (1 - 2)²
        assert!((frechet_distance(&a, &c).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = gaussian_stats(&[vec![0.0], vec![1.0]]).unwrap();
        let b = gaussian_stats(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Contract(_))));
    }
}
