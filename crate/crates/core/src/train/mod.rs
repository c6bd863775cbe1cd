//! Baseline classifier/segmenter training with Adam, a decaying learning rate,
//! early stopping and best-validation snapshot selection.

mod models;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::losses::{
    bce_dice_loss_grad, bce_loss_grad, dice_loss_grad, tvmf_dice_loss_binary_grad, update_kappa, KappaState,
    PredictionBatch, DICE_EPS,
};
use crate::metrics::{classification_report, confusion_counts, ClassificationReport, ConfusionCounts};
use crate::nn::{Adam, Graph};
use crate::scalar::Scalar;

pub use models::{ArchitectureId, ModelHandle, ModelSpec};
pub(crate) use models::batch_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    Bce,
    /// Dice alone; used for classification ablations.
    Dice,
    BceDice,
    TvmfDice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Cosine from `lr` down to `lr * final_fraction` at the last epoch.
    Cosine { final_fraction: f64 },
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    Exponential { gamma: f64 },
    Constant,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine { final_fraction: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Epochs without validation-loss improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    pub loss: LossId,
    pub seed: u64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub base_width: usize,
    pub betas: (f64, f64),
    /// Binarization threshold for validation Dice.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            schedule: LrSchedule::default(),
            patience: None,
            loss: LossId::BceDice,
            seed: 0,
            max_steps: None,
            base_width: 8,
            betas: (0.9, 0.999),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Classification setup with batch 64, 100 epochs, lr 5e-3, BCE.
    pub fn classification_preset() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 5e-3,
            loss: LossId::Bce,
            ..Default::default()
        }
    }

    /// Segmentation setup with 300 epochs at lr 1e-3 and BCE-Dice.
    pub fn segmentation_preset() -> Self {
        TrainConfig {
            epochs: 300,
            ..Default::default()
        }
    }

    /// t-vMF segmentation setup: 200 epochs, batch 24.
    pub fn tvmf_preset() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 24,
            loss: LossId::TvmfDice,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch under `cfg.schedule`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Step { every, gamma } => cfg.lr * gamma.powi((epoch / every.max(1)) as i32),
        LrSchedule::Exponential { gamma } => cfg.lr * gamma.powi(epoch as i32),
        LrSchedule::Cosine { final_fraction } => {
            if epoch == 0 || cfg.epochs <= 1 {
                return cfg.lr;
            }
            let last = (cfg.epochs - 1) as f64;
            let t = (epoch as f64).min(last) / last;
            let lo = cfg.lr * final_fraction;
            lo + (cfg.lr - lo) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Minimum drop in validation loss that counts as an improvement.
pub const IMPROVEMENT: f64 = 1e-6;

/// True once the last `patience` validation losses brought no improvement of
/// at least [`IMPROVEMENT`] over the best loss before them.
pub fn early_stop(val_losses: &[f64], patience: usize) -> bool {
    let Some(&first) = val_losses.first() else {
        return false;
    };
    let mut best = first;
    let mut since = 0;
    for &l in &val_losses[1..] {
        if l <= best - IMPROVEMENT {
            best = l;
            since = 0;
        } else {
            since += 1;
        }
    }
    since >= patience
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy for classifiers, global Dice for segmenters.
    pub val_metric: f64,
    pub lr: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<Vec<f64>>,
    /// Background/foreground Dice over the epoch's training batches.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_class_dice: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Snapshot with the lowest validation loss.
    pub model: ModelHandle<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn one_hot<T: Scalar>(s: &ImageSample, classes: usize) -> Result<Vec<T>> {
    let k = s
        .class_label
        .ok_or_else(|| Error::contract(format!("sample `{}` has no class label", s.id)))?;
    Ok((0..classes).map(|c| if c == k { T::one() } else { T::zero() }).collect())
}

fn mask_target<T: Scalar>(s: &ImageSample) -> Result<Vec<T>> {
    let m = s
        .mask
        .as_ref()
        .ok_or_else(|| Error::contract(format!("sample `{}` has no mask", s.id)))?;
    Ok(m.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect())
}

fn targets<T: Scalar>(spec: &ModelSpec, samples: &[&ImageSample]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(samples.len() * spec.output_len());
    for s in samples {
        out.extend(match spec.arch {
            ArchitectureId::SmallCnnClassifier => one_hot::<T>(s, spec.outputs)?,
            ArchitectureId::SmallUnetSegmenter => mask_target::<T>(s)?,
        });
    }
    Ok(out)
}

/// Loss value and gradient w.r.t. the probabilities.
pub fn batch_loss<T: Scalar>(
    loss: LossId,
    probs: &[T],
    targets: &[T],
    batch: usize,
    kappa: Option<&KappaState>,
) -> Result<(T, Vec<T>)> {
    let b = PredictionBatch::new(probs, targets, batch)?;
    Ok(match loss {
        LossId::Bce => bce_loss_grad(&b),
        LossId::Dice => dice_loss_grad(&b, DICE_EPS),
        LossId::BceDice => bce_dice_loss_grad(&b),
        LossId::TvmfDice => {
            let k = kappa.ok_or_else(|| Error::contract("t-vMF loss needs a kappa state"))?;
            tvmf_dice_loss_binary_grad(&b, k)?
        }
    })
}

fn binarize<T: Scalar>(probs: &[T], tau: f64) -> Vec<u8> {
    let t = T::lit(tau);
    probs.iter().map(|&p| u8::from(p >= t)).collect()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Pixel counts of the thresholded segmenter output against ground truth.
pub fn evaluate_segmentation<T: Scalar>(model: &ModelHandle<T>, d: &LabeledDataset, tau: f64) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    let refs: Vec<&ImageSample> = d.samples().iter().collect();
    for (probs, s) in model.predict(&refs)?.iter().zip(&refs) {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::contract(format!("sample `{}` has no mask", s.id)))?;
        total += confusion_counts(&binarize(probs, tau), mask)?;
    }
    Ok(total)
}

pub fn predict_classes<T: Scalar>(model: &ModelHandle<T>, d: &LabeledDataset) -> Result<Vec<usize>> {
    let refs: Vec<&ImageSample> = d.samples().iter().collect();
    Ok(model.predict(&refs)?.iter().map(|r| argmax(r)).collect())
}

pub fn evaluate_classification<T: Scalar>(model: &ModelHandle<T>, d: &LabeledDataset) -> Result<ClassificationReport> {
    let preds = predict_classes(model, d)?;
    let labels = d
        .samples()
        .iter()
        .map(|s| s.class_label.ok_or_else(|| Error::contract(format!("sample `{}` has no class label", s.id))))
        .collect::<Result<Vec<_>>>()?;
    classification_report(&preds, &labels, d.class_count())
}

fn dice_from(two_a: u64, b: u64) -> f64 {
    if two_a + b == 0 {
        1.0
    } else {
        two_a as f64 / (two_a + b) as f64
    }
}

/// Background and foreground Dice of one confusion table.
fn class_dice(c: &ConfusionCounts) -> Vec<f64> {
    vec![dice_from(2 * c.tn, c.fp + c.fn_), dice_from(2 * c.tp, c.fp + c.fn_)]
}

struct Evaluation {
    loss: f64,
    metric: f64,
}

fn evaluate<T: Scalar>(
    model: &ModelHandle<T>,
    d: &LabeledDataset,
    cfg: &TrainConfig,
    kappa: Option<&KappaState>,
) -> Result<Evaluation> {
    let refs: Vec<&ImageSample> = d.samples().iter().collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut counts = ConfusionCounts::default();
    for chunk in refs.chunks(cfg.batch_size) {
        let probs: Vec<T> = model.predict(chunk)?.concat();
        let y = targets::<T>(&model.spec, chunk)?;
        let (v, _) = batch_loss(cfg.loss, &probs, &y, chunk.len(), kappa)?;
        loss += v.to_f64_lossy() * chunk.len() as f64;
        let per = model.spec.output_len();
        match model.spec.arch {
            ArchitectureId::SmallCnnClassifier => {
                for (p, t) in probs.chunks(per).zip(y.chunks(per)) {
                    correct += usize::from(argmax(p) == argmax(t));
                }
            }
            ArchitectureId::SmallUnetSegmenter => {
                let truth: Vec<u8> = y.iter().map(|&v| u8::from(v > T::zero())).collect();
                counts += confusion_counts(&binarize(&probs, cfg.threshold), &truth)?;
            }
        }
    }
    let n = refs.len() as f64;
    let metric = match model.spec.arch {
        ArchitectureId::SmallCnnClassifier => correct as f64 / n,
        ArchitectureId::SmallUnetSegmenter => dice_from(2 * counts.tp, counts.fp + counts.fn_),
    };
    Ok(Evaluation { loss: loss / n, metric })
}

fn check_split(train: &LabeledDataset, val: &LabeledDataset, task: Task) -> Result<()> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    if train.task() != task || val.task() != task {
        return Err(Error::config(format!("expected {task:?} datasets")));
    }
    Ok(())
}

/// Model spec matching the first training sample's geometry.
fn spec_for(train: &LabeledDataset, cfg: &TrainConfig, task: Task) -> ModelSpec {
    let s = &train.samples()[0];
    match task {
        Task::Classification => ModelSpec::classifier(s.channels, s.height, s.width, train.class_count(), cfg.base_width),
        Task::Segmentation => ModelSpec::segmenter(s.channels, s.height, s.width, cfg.base_width),
    }
}

pub fn train_classifier<T: Scalar>(
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    check_split(train, val, Task::Classification)?;
    if cfg.loss == LossId::TvmfDice {
        return Err(Error::config("the t-vMF Dice loss is only available for segmentation"));
    }
    let model = ModelHandle::new(spec_for(train, cfg, Task::Classification), cfg.seed)?;
    fit(model, train, val, cfg)
}

pub fn train_segmenter<T: Scalar>(
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    check_split(train, val, Task::Segmentation)?;
    let model = ModelHandle::new(spec_for(train, cfg, Task::Segmentation), cfg.seed)?;
    fit(model, train, val, cfg)
}

/// Continue training `model` (warm start).
pub fn fine_tune<T: Scalar>(
    model: ModelHandle<T>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let task = match model.spec.arch {
        ArchitectureId::SmallCnnClassifier => Task::Classification,
        ArchitectureId::SmallUnetSegmenter => Task::Segmentation,
    };
    check_split(train, val, task)?;
    fit(model, train, val, cfg)
}

fn fit<T: Scalar>(
    mut model: ModelHandle<T>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    for s in train.samples().iter().chain(val.samples()) {
        model.check_input(s)?;
    }
    let segmenter = model.spec.arch == ArchitectureId::SmallUnetSegmenter;
    let mut kappa = (cfg.loss == LossId::TvmfDice).then(|| KappaState::with_defaults(2));
    let mut adam = Adam::new(&model.params, cfg.betas.0, cfg.betas.1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, ModelHandle<T>)> = None;
    let mut steps = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut counts = ConfusionCounts::default();
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&ImageSample> = idx.iter().map(|&i| &train.samples()[i]).collect();
            let x = batch_tensor(&batch, |_| Ok(()))?;
            let y = targets::<T>(&model.spec, &batch)?;
            let mut g = Graph::new();
            let p = g.bind(&model.params);
            let xv = g.input(x);
            let out = model.forward(&mut g, &p, xv);
            let probs = g.value(out).data().to_vec();
            let (value, grad) = batch_loss(cfg.loss, &probs, &y, batch.len(), kappa.as_ref())?;
            if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            if segmenter {
                let truth: Vec<u8> = y.iter().map(|&v| u8::from(v > T::zero())).collect();
                counts += confusion_counts(&binarize(&probs, cfg.threshold), &truth)?;
            }
            let root = g.attach_loss(out, value, grad);
            let grads = g.backward(&[root]).collect(&p, &model.params);
            adam.update(&mut model.params, &grads, lr);
            steps += 1;
            loss_sum += value.to_f64_lossy() * batch.len() as f64;
            seen += batch.len();
        }
        let train_class_dice = (segmenter && seen > 0).then(|| class_dice(&counts));
        let eval = evaluate(&model, val, cfg, kappa.as_ref())?;
        if !eval.loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if let (Some(k), Some(d)) = (&kappa, &train_class_dice) {
            kappa = Some(update_kappa(k, d)?);
        }
        let record = EpochRecord {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_loss: eval.loss,
            val_metric: eval.metric,
            lr,
            steps,
            kappa: kappa.as_ref().map(|k| k.kappa.clone()),
            train_class_dice,
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} metric {:.4} lr {:.2e}",
            record.train_loss,
            record.val_loss,
            record.val_metric,
            lr
        );
        if best.as_ref().map_or(true, |(l, _, _)| eval.loss < *l) {
            best = Some((eval.loss, epoch, model.clone()));
        }
        history.push(record);
        let val_losses: Vec<f64> = history.iter().map(|r| r.val_loss).collect();
        if cfg.patience.is_some_and(|p| early_stop(&val_losses, p)) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) && seen == 0 {
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            epochs: 11,
            lr: 0.01,
            ..Default::default()
        };
        assert_eq!(lr_at(&cfg, 0), 0.01);
        assert!((lr_at(&cfg, 10) - 1e-4).abs() < 1e-12);
        let lo = 1e-4;
        let mid = lo + (0.01 - lo) * 0.5 * (1.0 + (std::f64::consts::PI * 0.3).cos());
        assert!((lr_at(&cfg, 3) - mid).abs() < 1e-15);
    }

    #[test]
    fn other_schedules() {
        let step = TrainConfig {
            schedule: LrSchedule::Step { every: 2, gamma: 0.5 },
            lr: 1.0,
            ..Default::default()
        };
        assert_eq!((lr_at(&step, 1), lr_at(&step, 2), lr_at(&step, 5)), (1.0, 0.5, 0.25));
        let exp = TrainConfig {
            schedule: LrSchedule::Exponential { gamma: 0.9 },
            lr: 1.0,
            ..Default::default()
        };
        assert!((lr_at(&exp, 2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_rule() {
        let decreasing: Vec<f64> = (0..30).map(|i| 1.0 - i as f64 * 0.01).collect();
        for n in 1..=30 {
            assert!(!early_stop(&decreasing[..n], 3));
        }
        let flat = [0.5; 4];
        assert!(!early_stop(&flat[..3], 3));
        assert!(early_stop(&flat, 3));
        assert!(!early_stop(&[0.5, 0.5, 0.4, 0.4], 3));
        assert!(!early_stop(&[0.5, 0.5 - 5e-7, 0.5 - 9e-7], 3));
        assert!(early_stop(&[0.5, 0.5 - 5e-7, 0.5 - 9e-7, 0.5], 3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::classification_preset().batch_size, 64);
        assert_eq!(TrainConfig::tvmf_preset().batch_size, 24);
    }
}
