//! Sources of synthetic images: trained bundles or folders of externally
//! generated PNGs.

use std::fs;
use std::path::PathBuf;

use image::ImageReader;
use rand::seq::SliceRandom;

use super::{sample_latents, GeneratorBundle};
use crate::data::{ImageSample, Provenance};
use crate::error::{Error, IoContext, Result};
use crate::rng::stream_rng;
use crate::scalar::Scalar;

pub trait SyntheticSource {
    fn class_id(&self) -> usize;
    /// Exactly `count` synthetic samples of [`Self::class_id`], deterministic under `seed`.
    fn synthesize(&self, count: usize, seed: u64) -> Result<Vec<ImageSample>>;
}

impl<T: Scalar> SyntheticSource for GeneratorBundle<T> {
    fn class_id(&self) -> usize {
        self.class_id
    }

    fn synthesize(&self, count: usize, seed: u64) -> Result<Vec<ImageSample>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        self.generate(&sample_latents(count, self.arch.net.latent_dim, seed)?)
    }
}

/// PNG files produced by an external generator for one class. A seeded
/// shuffle of the sorted file list picks which files are used.
#[derive(Clone, Debug)]
pub struct ImageFolderSource {
    pub class_id: usize,
    pub dir: PathBuf,
}

impl SyntheticSource for ImageFolderSource {
    fn class_id(&self) -> usize {
        self.class_id
    }

    fn synthesize(&self, count: usize, seed: u64) -> Result<Vec<ImageSample>> {
        let mut files: Vec<PathBuf> = fs::read_dir(&self.dir)
            .at(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.len() < count {
            return Err(Error::config(format!(
                "class {}: {} holds {} images, {count} requested",
                self.class_id,
                self.dir.display(),
                files.len()
            )));
        }
        files.shuffle(&mut stream_rng(seed, self.class_id as u64));
        files
            .iter()
            .take(count)
            .map(|path| {
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                let id = format!("ext-c{}-{stem}", self.class_id);
                let img = ImageReader::open(path)
                    .at(path)?
                    .decode()
                    .map_err(|e| Error::Load {
                        id: id.clone(),
                        reason: e.to_string(),
                    })?
                    .into_luma8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let pixels = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
                Ok(ImageSample::gray(id, h, w, pixels, Provenance::Synthetic).with_label(self.class_id))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::GrayImage;

    #[test]
    fn folder_source_reads_and_tags() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4u8 {
            GrayImage::from_pixel(4, 4, image::Luma([i * 60]))
                .save(dir.path().join(format!("img{i}.png")))
                .unwrap();
        }
        let src = ImageFolderSource {
            class_id: 1,
            dir: dir.path().to_owned(),
        };
        let a = src.synthesize(3, 7).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, src.synthesize(3, 7).unwrap());
        assert!(a.iter().all(|s| s.class_label == Some(1) && s.provenance == Provenance::Synthetic));
        assert!(src.synthesize(5, 7).is_err());
    }
}
