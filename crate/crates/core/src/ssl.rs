//! Iterative pseudo-labeling of synthetic images for segmentation.
//!
//! Round 0 trains on the real set and labels the synthetic set. Round `t ≥ 1`
//! retrains on the real set plus round `t-1`'s pseudo-labeled images and
//! labels the synthetic set again.

use std::collections::HashMap;
use std::fs;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader};
use serde::{Deserialize, Serialize};

use crate::augment::merge;
use crate::data::{ImageSample, LabeledDataset, MaskOrigin, Provenance, Task};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{confusion_counts, segmentation_metrics, ConfusionCounts, MetricConventions, MiouMode, SegmentationMetrics};
use crate::persist::{write_json, write_jsonl};
use crate::scalar::Scalar;
use crate::train::{fine_tune, train_segmenter, ArchitectureId, EpochRecord, ModelHandle, TrainConfig};

/// Anything that maps images to per-pixel foreground probabilities.
pub trait SegmentationModel {
    fn predict_probs(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> SegmentationModel for ModelHandle<T> {
    fn predict_probs(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        if self.spec.arch != ArchitectureId::SmallUnetSegmenter {
            return Err(Error::contract("pseudo-labeling needs a segmentation model"));
        }
        Ok(self
            .predict(images)?
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
            .collect())
    }
}

/// Per-round replacements for the trainer's own settings.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

pub struct TrainedRound<M> {
    pub model: M,
    pub history: Vec<EpochRecord>,
}

/// Trains segmentation models for the rounds of [`run_ssl`].
pub trait SegmentationTrainer {
    type Model: SegmentationModel;

    /// `warm` is the previous round's model when warm starting.
    fn train(
        &mut self,
        train: &LabeledDataset,
        val: &LabeledDataset,
        warm: Option<&Self::Model>,
        overrides: RoundOverrides,
    ) -> Result<TrainedRound<Self::Model>>;

    fn save(&self, model: &Self::Model, path: &Path) -> Result<()>;
    fn load(&self, path: &Path) -> Result<Self::Model>;
}

/// [`SegmentationTrainer`] over the built-in U-shaped segmenter.
pub struct UnetTrainer<T> {
    pub cfg: TrainConfig,
    _scalar: PhantomData<T>,
}

impl<T> UnetTrainer<T> {
    pub fn new(cfg: TrainConfig) -> Self {
        UnetTrainer {
            cfg,
            _scalar: PhantomData,
        }
    }
}

impl<T: Scalar> SegmentationTrainer for UnetTrainer<T> {
    type Model = ModelHandle<T>;

    fn train(
        &mut self,
        train: &LabeledDataset,
        val: &LabeledDataset,
        warm: Option<&ModelHandle<T>>,
        overrides: RoundOverrides,
    ) -> Result<TrainedRound<ModelHandle<T>>> {
        let cfg = TrainConfig {
            epochs: overrides.epochs.unwrap_or(self.cfg.epochs),
            lr: overrides.lr.unwrap_or(self.cfg.lr),
            ..self.cfg.clone()
        };
        let out = match warm {
            Some(m) => fine_tune(m.clone(), train, val, &cfg)?,
            None => train_segmenter(train, val, &cfg)?,
        };
        Ok(TrainedRound {
            model: out.model,
            history: out.history,
        })
    }

    fn save(&self, model: &ModelHandle<T>, path: &Path) -> Result<()> {
        model.save(path)
    }

    fn load(&self, path: &Path) -> Result<ModelHandle<T>> {
        ModelHandle::load(path)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stopping {
    /// Always run every round.
    #[default]
    Fixed,
    /// Stop once validation Dice gains less than `min_gain` (a fraction, 0.001 = 0.1 points).
    Convergence { min_gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub rounds: usize,
    pub threshold: f64,
    /// Drop pseudo-labeled images whose mean `max(p, 1-p)` is below this from `D_aug`.
    pub min_confidence: Option<f64>,
    /// Epochs for rounds `t ≥ 1`; the trainer's own setting when absent.
    pub round_epochs: Option<usize>,
    /// Learning rate for rounds `t ≥ 1`. A fresh optimizer at the full rate
    /// can wreck a warm-started model.
    pub round_lr: Option<f64>,
    pub retrain_from_scratch: bool,
    pub stopping: Stopping,
    pub miou_mode: MiouMode,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            rounds: 2,
            threshold: 0.5,
            min_confidence: None,
            round_epochs: None,
            round_lr: None,
            retrain_from_scratch: false,
            stopping: Stopping::Fixed,
            miou_mode: MiouMode::TwoClassMean,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("SSL needs at least 1 round"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let Some(lr) = self.round_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(format!("round_lr must be positive, got {lr}")));
            }
        }
        if let Some(c) = self.min_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config(format!("min_confidence {c} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Mean of `max(p, 1 - p)` over a probability map.
fn confidence(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| p.max(1.0 - p)).sum::<f64>() / probs.len().max(1) as f64
}

fn threshold_mask(probs: &[f64], tau: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= tau)).collect()
}

/// Thresholded model masks for every synthetic image, tagged `pseudo(round)`.
/// Also returns each image's mean confidence.
pub fn infer_pseudo_masks_scored<M: SegmentationModel + ?Sized>(
    model: &M,
    d_gen: &LabeledDataset,
    tau: f64,
    round: usize,
) -> Result<(LabeledDataset, Vec<f64>)> {
    if let Some(s) = d_gen.samples().iter().find(|s| s.provenance != Provenance::Synthetic || s.mask.is_some()) {
        return Err(Error::contract(format!(
            "sample `{}` is not a maskless synthetic image",
            s.id
        )));
    }
    let refs: Vec<&ImageSample> = d_gen.samples().iter().collect();
    let probs = if refs.is_empty() { Vec::new() } else { model.predict_probs(&refs)? };
    let mut samples = Vec::with_capacity(refs.len());
    let mut scores = Vec::with_capacity(refs.len());
    for (s, p) in refs.iter().zip(&probs) {
        if p.len() != s.plane() {
            return Err(Error::contract(format!(
                "model returned {} values for the {}-pixel image `{}`",
                p.len(),
                s.plane(),
                s.id
            )));
        }
        scores.push(confidence(p));
        samples.push((*s).clone().with_mask(threshold_mask(p, tau), MaskOrigin::Pseudo { round }));
    }
    Ok((LabeledDataset::new(samples, d_gen.class_count(), Task::Segmentation)?, scores))
}

pub fn infer_pseudo_masks<M: SegmentationModel + ?Sized>(
    model: &M,
    d_gen: &LabeledDataset,
    tau: f64,
    round: usize,
) -> Result<LabeledDataset> {
    infer_pseudo_masks_scored(model, d_gen, tau, round).map(|(d, _)| d)
}

/// `D_aug^(t) = D_train ∪ D_pseudo^(t)`.
pub fn build_round_dataset(d_train: &LabeledDataset, d_pseudo: &LabeledDataset) -> Result<LabeledDataset> {
    merge(d_train, d_pseudo)
}

/// Pixel counts of thresholded predictions against ground-truth masks.
pub fn evaluate_masks<M: SegmentationModel + ?Sized>(model: &M, d: &LabeledDataset, tau: f64) -> Result<ConfusionCounts> {
    let refs: Vec<&ImageSample> = d.samples().iter().collect();
    let mut total = ConfusionCounts::default();
    for (s, p) in refs.iter().zip(model.predict_probs(&refs)?) {
        let truth = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::contract(format!("sample `{}` has no mask", s.id)))?;
        total += confusion_counts(&threshold_mask(&p, tau), truth)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub validation: ConfusionCounts,
    pub metrics: SegmentationMetrics,
    pub conventions: MetricConventions,
    pub train_size: usize,
    pub pseudo_count: usize,
    /// Pseudo-labeled images admitted to this round's training set.
    pub pseudo_used: usize,
    pub pseudo_foreground_fraction: f64,
    pub epochs_run: usize,
}

pub struct PseudoLabelRound<M> {
    pub round: usize,
    pub model: M,
    pub pseudo: LabeledDataset,
    pub metrics: RoundMetrics,
    pub history: Vec<EpochRecord>,
    /// Checkpoint path when the run is persisted.
    pub checkpoint: Option<PathBuf>,
}

pub fn round_dir(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join("pseudo").join(format!("round_{round}"))
}

pub fn round_checkpoint(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("seg_round_{round}.ckpt"))
}

fn save_masks(d: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for s in d.samples() {
        let mask = s.mask.as_ref().expect("pseudo samples carry masks");
        let path = dir.join(format!("{}.png", s.id));
        let bytes = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        GrayImage::from_raw(s.width as u32, s.height as u32, bytes)
            .expect("sized buffer")
            .save(&path)
            .at(&path)?;
    }
    Ok(())
}

/// Binary masks stored for `round`, keyed by sample id.
pub fn load_round_masks(run_dir: &Path, round: usize) -> Result<HashMap<String, Vec<u8>>> {
    let dir = round_dir(run_dir, round).join("masks");
    let mut out = HashMap::new();
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        if path.extension().is_none_or(|e| e != "png") {
            continue;
        }
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let img = ImageReader::open(&path)
            .at(&path)?
            .decode()
            .map_err(|e| Error::Load {
                id: id.clone(),
                reason: e.to_string(),
            })?
            .into_luma8();
        out.insert(id, img.into_raw().iter().map(|&v| u8::from(v >= 128)).collect());
    }
    Ok(out)
}

fn filter_confident(pseudo: &LabeledDataset, scores: &[f64], min: Option<f64>) -> Result<LabeledDataset> {
    match min {
        None => Ok(pseudo.clone()),
        Some(c) => {
            let kept = pseudo
                .samples()
                .iter()
                .zip(scores)
                .filter(|(_, &s)| s >= c)
                .map(|(s, _)| s.clone())
                .collect();
            LabeledDataset::new(kept, pseudo.class_count(), pseudo.task())
        }
    }
}

/// Runs round 0 and rounds `1..=cfg.rounds`, persisting each round under
/// `run_dir` when given. Errors are wrapped with the failing round index.
pub fn run_ssl<Tr: SegmentationTrainer>(
    d_train: &LabeledDataset,
    d_val: &LabeledDataset,
    d_gen: &LabeledDataset,
    trainer: &mut Tr,
    cfg: &SslConfig,
    run_dir: Option<&Path>,
) -> Result<Vec<PseudoLabelRound<Tr::Model>>> {
    cfg.validate()?;
    if d_train.task() != Task::Segmentation || d_val.task() != Task::Segmentation {
        return Err(Error::config("SSL needs segmentation training and validation sets"));
    }
    let mut rounds: Vec<PseudoLabelRound<Tr::Model>> = Vec::new();
    let mut used_prev: Option<LabeledDataset> = None;
    for t in 0..=cfg.rounds {
        let wrap = |e: Error| Error::Round {
            round: t,
            source: Box::new(e),
        };
        let (train_set, overrides) = match &used_prev {
            None => (d_train.clone(), RoundOverrides::default()),
            Some(p) => (
                build_round_dataset(d_train, p).map_err(wrap)?,
                RoundOverrides {
                    epochs: cfg.round_epochs,
                    lr: cfg.round_lr,
                },
            ),
        };
        let warm = match (t, cfg.retrain_from_scratch) {
            (0, _) | (_, true) => None,
            _ => rounds.last().map(|r| &r.model),
        };
        let trained = trainer.train(&train_set, d_val, warm, overrides).map_err(wrap)?;
        let (pseudo, scores) = infer_pseudo_masks_scored(&trained.model, d_gen, cfg.threshold, t).map_err(wrap)?;
        let counts = evaluate_masks(&trained.model, d_val, cfg.threshold).map_err(wrap)?;
        let fg: usize = pseudo.samples().iter().map(ImageSample::foreground_pixels).sum();
        let px: usize = pseudo.samples().iter().map(ImageSample::plane).sum();
        let metrics = RoundMetrics {
            round: t,
            validation: counts,
            metrics: segmentation_metrics(&counts, cfg.miou_mode).map_err(wrap)?,
            conventions: MetricConventions::new(cfg.miou_mode, None),
            train_size: train_set.len(),
            pseudo_count: pseudo.len(),
            pseudo_used: train_set.len() - d_train.len(),
            pseudo_foreground_fraction: if px == 0 { 0.0 } else { fg as f64 / px as f64 },
            epochs_run: trained.history.len(),
        };
        log::info!(
            "ssl round {t}: val dice {:.4} on {} training images",
            metrics.metrics.dice,
            metrics.train_size
        );
        let checkpoint = match run_dir {
            Some(dir) => {
                let ckpt = round_checkpoint(dir, t);
                trainer.save(&trained.model, &ckpt).map_err(wrap)?;
                let rd = round_dir(dir, t);
                save_masks(&pseudo, &rd.join("masks")).map_err(wrap)?;
                write_json(&rd.join("metrics.json"), &metrics).map_err(wrap)?;
                write_jsonl(&rd.join("history.jsonl"), &trained.history).map_err(wrap)?;
                Some(ckpt)
            }
            None => None,
        };
        used_prev = Some(filter_confident(&pseudo, &scores, cfg.min_confidence).map_err(wrap)?);
        let prev_dice = rounds.last().map(|r| r.metrics.metrics.dice);
        rounds.push(PseudoLabelRound {
            round: t,
            model: trained.model,
            pseudo,
            metrics,
            history: trained.history,
            checkpoint,
        });
        if let (Stopping::Convergence { min_gain }, Some(prev)) = (cfg.stopping, prev_dice) {
            if rounds[t].metrics.metrics.dice - prev < min_gain {
                log::info!("ssl converged after round {t}");
                break;
            }
        }
    }
    Ok(rounds)
}
