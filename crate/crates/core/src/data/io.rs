//! Dataset directories: `manifest.json`, `images/<id>.png`, `masks/<id>.png`.
//!
//! Images are stored as 8-bit grayscale (or RGB) PNG, masks as 8-bit
//! single-channel PNG with foreground written as 255.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ImageSample, LabeledDataset, MaskOrigin, Provenance, Task};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    task: Task,
    class_count: usize,
    samples: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: String,
    class_label: Option<usize>,
    provenance: Provenance,
    mask_origin: Option<MaskOrigin>,
    image: String,
    mask: Option<String>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pixels snapped to the 8-bit grid a save/load round trip produces.
pub fn quantize_8bit(d: &LabeledDataset) -> LabeledDataset {
    let samples = d
        .samples()
        .iter()
        .map(|s| ImageSample {
            pixels: s.pixels.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
            ..s.clone()
        })
        .collect();
    LabeledDataset::new(samples, d.class_count(), d.task()).expect("quantization keeps invariants")
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::contract(format!("sample id `{id}` is not a valid file name")));
    }
    Ok(())
}

pub fn save_dataset(d: &LabeledDataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).at(&images)?;
    fs::create_dir_all(&masks).at(&masks)?;
    let mut entries = Vec::with_capacity(d.len());
    for s in d.samples() {
        check_id(&s.id)?;
        let rel = format!("images/{}.png", s.id);
        let path = dir.join(&rel);
        let bytes: Vec<u8> = s.pixels.iter().map(|&v| to_u8(v)).collect();
        let (h, w) = (s.height as u32, s.width as u32);
        match s.channels {
            1 => GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(&path).at(&path)?,
            3 => {
                let plane = s.plane();
                let hwc = (0..plane).flat_map(|i| [bytes[i], bytes[plane + i], bytes[2 * plane + i]]).collect();
                RgbImage::from_raw(w, h, hwc).expect("sized buffer").save(&path).at(&path)?
            }
            c => return Err(Error::contract(format!("sample `{}`: cannot store {c}-channel image", s.id))),
        }
        let mask_rel = match &s.mask {
            Some(m) => {
                let rel = format!("masks/{}.png", s.id);
                let path = dir.join(&rel);
                let bytes = m.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
                GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(&path).at(&path)?;
                Some(rel)
            }
            None => None,
        };
        let entry = Entry {
            id: s.id.clone(),
            class_label: s.class_label,
            provenance: s.provenance,
            mask_origin: s.mask_origin,
            image: rel,
            mask: mask_rel,
        };
        entries.push(serde_json::to_value(entry).expect("entry serializes"));
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        task: d.task(),
        class_count: d.class_count(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).at(&path)
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).at(&path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Load {
            id: MANIFEST_FILE.into(),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, raw) in manifest.samples.into_iter().enumerate() {
        let hint = raw
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("entry #{i}"), str::to_owned);
        let entry: Entry = serde_json::from_value(raw).map_err(|e| Error::Load {
            id: hint.clone(),
            reason: format!("malformed manifest entry: {e}"),
        })?;
        samples.push(load_entry(dir, entry)?);
    }
    LabeledDataset::new(samples, manifest.class_count, manifest.task)
}

fn load_entry(dir: &Path, e: Entry) -> Result<ImageSample> {
    let fail = |reason: String| Error::Load {
        id: e.id.clone(),
        reason,
    };
    let img_path = dir.join(&e.image);
    let img = ImageReader::open(&img_path)
        .map_err(|err| fail(format!("cannot open {}: {err}", img_path.display())))?
        .decode()
        .map_err(|err| fail(format!("cannot decode {}: {err}", img_path.display())))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, pixels) = match img.color().channel_count() {
        1 | 2 => (1, img.into_luma8().into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        _ => {
            let rgb = img.into_rgb8().into_raw();
            let plane = width * height;
            let mut chw = vec![0f32; 3 * plane];
            for (i, px) in rgb.chunks(3).enumerate() {
                for c in 0..3 {
                    chw[c * plane + i] = px[c] as f32 / 255.0;
                }
            }
            (3, chw)
        }
    };
    let mask = match &e.mask {
        Some(rel) => {
            let p = dir.join(rel);
            let m = ImageReader::open(&p)
                .map_err(|err| fail(format!("cannot open mask {}: {err}", p.display())))?
                .decode()
                .map_err(|err| fail(format!("cannot decode mask {}: {err}", p.display())))?
                .into_luma8();
            if (m.width() as usize, m.height() as usize) != (width, height) {
                return Err(fail("mask size differs from image size".into()));
            }
            Some(m.into_raw().iter().map(|&v| u8::from(v >= 128)).collect())
        }
        None => None,
    };
    Ok(ImageSample {
        id: e.id.clone(),
        channels,
        height,
        width,
        pixels,
        provenance: e.provenance,
        class_label: e.class_label,
        mask,
        mask_origin: e.mask_origin,
    })
}
