use std::fs;
use std::path::Path;

use ssgnet_core::data::{make_toy_corpus, ImageSample, LabeledDataset, MaskOrigin, Provenance, Task, ToyCorpusSpec};
use ssgnet_core::ssl::*;
use ssgnet_core::train::EpochRecord;
use ssgnet_core::{Error, Result};

/// Foreground wherever intensity exceeds `cutoff`.
#[derive(Clone, Debug, PartialEq)]
struct Cutoff(f64);

impl SegmentationModel for Cutoff {
    fn predict_probs(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|s| s.pixels.iter().map(|&v| if f64::from(v) > self.0 { 0.9 } else { 0.1 }).collect())
            .collect())
    }
}

fn record(epoch: usize) -> EpochRecord {
    EpochRecord {
        epoch,
        train_loss: 0.5,
        val_loss: 0.5,
        val_metric: 0.5,
        lr: 1e-3,
        steps: 1,
        kappa: None,
        train_class_dice: None,
    }
}

#[derive(Debug, PartialEq)]
struct Call {
    train_size: usize,
    warm: Option<f64>,
    overrides: RoundOverrides,
}

#[derive(Default)]
struct Recorder {
    calls: Vec<Call>,
    fail_at: Option<usize>,
}

impl SegmentationTrainer for Recorder {
    type Model = Cutoff;

    fn train(
        &mut self,
        train: &LabeledDataset,
        _val: &LabeledDataset,
        warm: Option<&Cutoff>,
        overrides: RoundOverrides,
    ) -> Result<TrainedRound<Cutoff>> {
        if self.fail_at == Some(self.calls.len()) {
            return Err(Error::contract("trainer gave up"));
        }
        self.calls.push(Call {
            train_size: train.len(),
            warm: warm.map(|m| m.0),
            overrides,
        });
        let round = self.calls.len() as f64;
        Ok(TrainedRound {
            model: Cutoff((45.0 + round) / 100.0),
            history: (0..overrides.epochs.unwrap_or(4)).map(record).collect(),
        })
    }

    fn save(&self, model: &Cutoff, path: &Path) -> Result<()> {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, model.0.to_string()).unwrap();
        Ok(())
    }

    fn load(&self, path: &Path) -> Result<Cutoff> {
        Ok(Cutoff(fs::read_to_string(path).unwrap().parse().unwrap()))
    }
}

fn corpus(n: usize, seed: u64) -> LabeledDataset {
    make_toy_corpus(&ToyCorpusSpec {
        image_size: 16,
        samples_per_class: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn synthetic(n: usize) -> LabeledDataset {
    let samples = corpus(n, 99)
        .into_samples()
        .into_iter()
        .map(|s| ImageSample {
            id: format!("gen_{}", s.id),
            provenance: Provenance::Synthetic,
            mask: None,
            mask_origin: None,
            ..s
        })
        .collect();
    LabeledDataset::new(samples, 2, Task::Classification).unwrap()
}

#[test]
fn rounds_grow_the_training_set_by_the_synthetic_set() {
    let (train, val, gen) = (corpus(10, 1), corpus(4, 2), synthetic(6));
    let cfg = SslConfig {
        rounds: 3,
        round_epochs: Some(2),
        round_lr: Some(1e-4),
        ..Default::default()
    };
    let mut tr = Recorder::default();
    let rounds = run_ssl(&train, &val, &gen, &mut tr, &cfg, None).unwrap();
    assert_eq!(rounds.len(), 4);
    let later = RoundOverrides {
        epochs: Some(2),
        lr: Some(1e-4),
    };
    assert_eq!(
        tr.calls,
        [
            Call { train_size: 20, warm: None, overrides: RoundOverrides::default() },
            Call { train_size: 32, warm: Some(0.46), overrides: later },
            Call { train_size: 32, warm: Some(0.47), overrides: later },
            Call { train_size: 32, warm: Some(0.48), overrides: later },
        ]
    );
    for (t, r) in rounds.iter().enumerate() {
        assert_eq!(r.metrics.pseudo_count, 12);
        assert_eq!(r.metrics.pseudo_used, if t == 0 { 0 } else { 12 });
        assert_eq!(r.metrics.epochs_run, if t == 0 { 4 } else { 2 });
        assert!(r.pseudo.samples().iter().all(|s| s.mask_origin == Some(MaskOrigin::Pseudo { round: t })));
        assert!(r.checkpoint.is_none());
    }
}

#[test]
fn retraining_from_scratch_never_warm_starts() {
    let cfg = SslConfig {
        retrain_from_scratch: true,
        ..Default::default()
    };
    let mut tr = Recorder::default();
    run_ssl(&corpus(5, 1), &corpus(2, 2), &synthetic(3), &mut tr, &cfg, None).unwrap();
    assert!(tr.calls.iter().all(|c| c.warm.is_none()));
}

#[test]
fn persisted_masks_match_the_stored_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let gen = synthetic(4);
    let cfg = SslConfig::default();
    let mut tr = Recorder::default();
    let rounds = run_ssl(&corpus(5, 1), &corpus(2, 2), &gen, &mut tr, &cfg, Some(dir.path())).unwrap();
    for r in &rounds {
        let model = tr.load(&round_checkpoint(dir.path(), r.round)).unwrap();
        let again = infer_pseudo_masks(&model, &gen, cfg.threshold, r.round).unwrap();
        let stored = load_round_masks(dir.path(), r.round).unwrap();
        assert_eq!(stored.len(), gen.len());
        for s in again.samples() {
            assert_eq!(stored.get(&s.id), s.mask.as_ref());
        }
        assert!(round_dir(dir.path(), r.round).join("metrics.json").exists());
        assert!(round_dir(dir.path(), r.round).join("history.jsonl").exists());
    }
}

#[test]
fn confidence_filter_limits_admitted_images() {
    let cfg = SslConfig {
        rounds: 1,
        min_confidence: Some(0.95),
        ..Default::default()
    };
    let mut tr = Recorder::default();
    let rounds = run_ssl(&corpus(5, 1), &corpus(2, 2), &synthetic(3), &mut tr, &cfg, None).unwrap();
    // every probability is 0.1 or 0.9, so confidence is 0.9 everywhere
    assert_eq!(rounds[1].metrics.pseudo_used, 0);
    assert_eq!(rounds[1].metrics.pseudo_count, 6);
}

#[test]
fn convergence_stops_once_dice_stalls() {
    let cfg = SslConfig {
        rounds: 5,
        stopping: Stopping::Convergence { min_gain: 1.0 },
        ..Default::default()
    };
    let mut tr = Recorder::default();
    let rounds = run_ssl(&corpus(5, 1), &corpus(2, 2), &synthetic(3), &mut tr, &cfg, None).unwrap();
    assert_eq!(rounds.len(), 2);
}

#[test]
fn failures_name_the_round() {
    let mut tr = Recorder {
        fail_at: Some(1),
        ..Default::default()
    };
    let err = run_ssl(&corpus(5, 1), &corpus(2, 2), &synthetic(3), &mut tr, &SslConfig::default(), None)
        .err()
        .unwrap();
    assert!(matches!(err, Error::Round { round: 1, .. }), "{err}");
}

#[test]
fn classification_sets_are_rejected() {
    let cls = make_toy_corpus(&ToyCorpusSpec {
        image_size: 16,
        samples_per_class: 4,
        task: Task::Classification,
        ..Default::default()
    })
    .unwrap();
    let mut tr = Recorder::default();
    let err = run_ssl(&cls, &corpus(2, 2), &synthetic(3), &mut tr, &SslConfig::default(), None).err();
    assert!(matches!(err, Some(Error::Config(_))));
    assert!(tr.calls.is_empty());
}
