//! Config-driven runs of the whole pipeline.
//!
//! A run directory `<root>/<run_id>/` holds `config.json`, one JSON file per
//! completed stage under `stages/`, the datasets, checkpoints and pseudo
//! masks the stages produced, and finally `report.json`, `report.md` and
//! `plots/*.png`. A stage whose JSON exists is never recomputed, so an
//! interrupted run resumes where it stopped.

mod plot;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{materialize_plan, merge, plan_augmentation, AugmentationPlan, Strategy};
use crate::data::{
    load_dataset, make_toy_corpus, quantize_8bit, save_dataset, split_dataset, LabeledDataset, SplitRatios, Task,
    ToyCorpusSpec,
};
use crate::error::{Error, IoContext, Result};
use crate::generator::{
    sample_latents, train_generator, GanEpochLog, GanTrainConfig, GeneratorBundle, SyntheticSource,
};
use crate::metrics::{
    fid_score, segmentation_metrics, ClassificationReport, ConfusionCounts, FeatureExtractor, FidResult,
    MetricConventions, MiouMode, RandomConvExtractor, SegmentationMetrics,
};
use crate::persist::{read_json, write_json, write_jsonl};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::ssl::{round_checkpoint, run_ssl, SslConfig, UnetTrainer};
use crate::train::{evaluate_classification, evaluate_segmentation, train_classifier, EpochRecord, TrainConfig};

pub use plot::{emit_plots, PlotOutput};
pub use report::{
    build_report, compare_runs, render_markdown, verify_report, Cell, Curve, DeltaRow, DeltaTable, Headline,
    MetricsReport, ReportProvenance, Row, Table, Winner,
};

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Toy { spec: ToyCorpusSpec },
    /// A dataset directory as written by `save_dataset`.
    Directory { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Toy { spec } => make_toy_corpus(spec),
            DatasetSource::Directory { path } => load_dataset(path),
        }
    }

    fn describe(&self) -> String {
        match self {
            DatasetSource::Toy { spec } => format!("toy corpus (seed {})", spec.seed),
            DatasetSource::Directory { path } => path.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fid: bool,
    /// Seed of the frozen random-conv FID embedder.
    pub extractor_seed: u64,
    pub miou_mode: MiouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fid: true,
            extractor_seed: 0,
            miou_mode: MiouMode::TwoClassMean,
        }
    }
}

fn default_split() -> SplitRatios {
    SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    }
}

/// One experiment. `seed` drives every random choice; the `seed` fields of
/// the nested configs act as extra salts on top of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub run_id: String,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Separate evaluation set; the split's test fraction must then be 0.
    #[serde(default)]
    pub test_set: Option<DatasetSource>,
    #[serde(default = "default_split")]
    pub split: SplitRatios,
    pub strategy: Strategy,
    #[serde(default)]
    pub gan: GanTrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Only valid for segmentation; defaults apply when absent.
    #[serde(default)]
    pub ssl: Option<SslConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

const SALT_SPLIT: u64 = 1;
const SALT_SYNTH: u64 = 2;
const SALT_TRAIN: u64 = 3;
const SALT_GAN: u64 = 100;
const SALT_UNTRAINED: u64 = 300;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let id_ok = !self.run_id.is_empty()
            && !self.run_id.starts_with('.')
            && self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !id_ok {
            return Err(Error::config(format!(
                "run id `{}` must be non-empty and use only letters, digits, '-', '_' and '.'",
                self.run_id
            )));
        }
        self.split.validate()?;
        if self.test_set.is_some() && self.split.test > 0.0 {
            return Err(Error::config("with a separate test set the split's test fraction must be 0"));
        }
        for src in std::iter::once(&self.dataset).chain(&self.test_set) {
            if let DatasetSource::Toy { spec } = src {
                spec.validate()?;
                if spec.task != self.task {
                    return Err(Error::config(format!(
                        "toy corpus task {:?} does not match experiment task {:?}",
                        spec.task, self.task
                    )));
                }
            }
        }
        self.gan.validate()?;
        self.train.validate()?;
        match (self.task, &self.ssl) {
            (Task::Classification, Some(_)) => {
                return Err(Error::config("pseudo-labeling (ssl) requires the segmentation task"));
            }
            (Task::Classification, None) if self.train.loss == crate::train::LossId::TvmfDice => {
                return Err(Error::config("the t-vMF Dice loss is only available for segmentation"));
            }
            (Task::Segmentation, Some(s)) => {
                s.validate()?;
                if s.miou_mode != self.eval.miou_mode {
                    return Err(Error::config("ssl.miou_mode and eval.miou_mode disagree"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The pseudo-labeling settings used for a segmentation run.
    pub fn ssl_or_default(&self) -> SslConfig {
        self.ssl.clone().unwrap_or_else(|| SslConfig {
            miou_mode: self.eval.miou_mode,
            ..SslConfig::default()
        })
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, SALT_SPLIT)
    }

    pub fn synth_seed(&self) -> u64 {
        derive_seed(self.seed, SALT_SYNTH)
    }

    pub fn gan_config(&self, class: usize) -> GanTrainConfig {
        GanTrainConfig {
            seed: derive_seed(derive_seed(self.seed, SALT_GAN + class as u64), self.gan.seed),
            ..self.gan.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(derive_seed(self.seed, SALT_TRAIN), self.train.seed),
            ..self.train.clone()
        }
    }

    pub fn run_dir(&self, runs_root: &Path) -> PathBuf {
        runs_root.join(&self.run_id)
    }
}

/// Sorts object keys recursively so equal values serialize identically.
fn canonical(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            serde_json::Value::Object(entries.into_iter().map(|(k, v)| (k, canonical(v))).collect())
        }
        serde_json::Value::Array(a) => serde_json::Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

/// SHA-256 of the canonical JSON form, defaults filled in.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let value = canonical(serde_json::to_value(cfg).expect("config serializes"));
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

// ---- stage records -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStage {
    pub task: Task,
    pub class_count: usize,
    pub source: String,
    pub test_source: String,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub class_id: usize,
    pub checkpoint: String,
    pub log: String,
    pub train_images: usize,
    pub epochs: usize,
    pub final_g_loss: f64,
    pub final_d_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorsStage {
    pub generators: Vec<GeneratorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeStage {
    pub dir: String,
    pub counts: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidRow {
    pub class_id: usize,
    pub trained: FidResult,
    /// Same latents through a freshly initialised generator.
    pub untrained: FidResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidStage {
    pub extractor: String,
    pub rows: Vec<FidRow>,
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStage {
    pub label: String,
    pub checkpoint: String,
    pub train_size: usize,
    pub synthetic_used: usize,
    pub best_epoch: usize,
    pub evaluated_on: String,
    pub test: ClassificationReport,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslRoundRecord {
    pub round: usize,
    pub checkpoint: String,
    pub train_size: usize,
    pub pseudo_count: usize,
    pub pseudo_used: usize,
    pub epochs_run: usize,
    pub validation_counts: ConfusionCounts,
    pub validation: SegmentationMetrics,
    pub test_counts: ConfusionCounts,
    pub test: SegmentationMetrics,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslStage {
    pub evaluated_on: String,
    pub conventions: MetricConventions,
    pub rounds: Vec<SslRoundRecord>,
}

// ---- the run -------------------------------------------------------------

pub const STAGE_DATASET: &str = "dataset";
pub const STAGE_PLAN: &str = "plan";
pub const STAGE_GENERATORS: &str = "generators";
pub const STAGE_SYNTHESIZE: &str = "synthesize";
pub const STAGE_FID: &str = "fid";
pub const STAGE_BASELINE: &str = "baseline";
pub const STAGE_AUGMENTED: &str = "augmented";
pub const STAGE_SSL: &str = "ssl";
pub const STAGE_REPORT: &str = "report";

pub fn stage_path(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join("stages").join(format!("{stage}.json"))
}

fn rel(run_dir: &Path, path: &Path) -> String {
    path.strip_prefix(run_dir).unwrap_or(path).to_string_lossy().into_owned()
}

struct Run<'a> {
    dir: PathBuf,
    cfg: &'a ExperimentConfig,
}

impl Run<'_> {
    fn stage<R: Serialize + DeserializeOwned>(&self, name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let path = stage_path(&self.dir, name);
        if path.exists() {
            log::info!("stage {name}: reusing {}", path.display());
            return read_json(&path).map_err(|e| Error::stage(name, e));
        }
        log::info!("stage {name}: running");
        let out = f().map_err(|e| Error::stage(name, e))?;
        write_json(&path, &out).map_err(|e| Error::stage(name, e))?;
        Ok(out)
    }

    fn data(&self, part: &str) -> PathBuf {
        self.dir.join("data").join(part)
    }

    fn load(&self, part: &str, stage: &str) -> Result<LabeledDataset> {
        load_dataset(&self.data(part)).map_err(|e| Error::stage(stage, e))
    }

    fn dataset(&self) -> Result<DatasetStage> {
        self.stage(STAGE_DATASET, || {
            let cfg = self.cfg;
            let full = cfg.dataset.load()?;
            if full.task() != cfg.task {
                return Err(Error::config(format!(
                    "dataset holds {:?} data but the experiment task is {:?}",
                    full.task(),
                    cfg.task
                )));
            }
            let (train, val, mut test) = split_dataset(&full, cfg.split, cfg.split_seed())?;
            let mut test_source = "held-out split".to_string();
            if let Some(src) = &cfg.test_set {
                test = src.load()?;
                if test.task() != cfg.task || test.class_count() != full.class_count() {
                    return Err(Error::config("test set task or class count differs from the dataset"));
                }
                test_source = src.describe();
            }
            for (part, d) in [("train", &train), ("val", &val), ("test", &test)] {
                save_dataset(d, &self.data(part))?;
            }
            Ok(DatasetStage {
                task: cfg.task,
                class_count: full.class_count(),
                source: cfg.dataset.describe(),
                test_source,
                train_counts: train.class_counts(),
                val_counts: val.class_counts(),
                test_counts: test.class_counts(),
            })
        })
    }

    fn plan(&self, train: &LabeledDataset) -> Result<AugmentationPlan> {
        self.stage(STAGE_PLAN, || {
            let plan = plan_augmentation(train, &self.cfg.strategy)?;
            write_json(&self.dir.join("plans").join("augment.json"), &plan)?;
            Ok(plan)
        })
    }

    fn generators<T: Scalar>(&self, train: &LabeledDataset, plan: &AugmentationPlan) -> Result<GeneratorsStage> {
        self.stage(STAGE_GENERATORS, || {
            let mut generators = Vec::new();
            for (k, &m) in plan.synthetic_counts.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                let ckpt = self.dir.join("checkpoints").join(GeneratorBundle::<T>::checkpoint_name(k));
                let log_path = self.dir.join("logs").join(format!("gan_class_{k}.jsonl"));
                let class_data = train.restrict_to_class(k);
                // the log is written last, so its presence marks a finished class
                let log: Vec<GanEpochLog> = if log_path.exists() && ckpt.exists() {
                    crate::persist::read_jsonl(&log_path)?
                } else {
                    let out = train_generator::<T>(&class_data, k, &self.cfg.gan_config(k))?;
                    out.bundle.save(&ckpt)?;
                    write_jsonl(&log_path, &out.log)?;
                    out.log
                };
                let last = log.last().cloned().unwrap_or(GanEpochLog {
                    epoch: 0,
                    g_loss: f64::NAN,
                    d_loss: f64::NAN,
                });
                generators.push(GeneratorRecord {
                    class_id: k,
                    checkpoint: rel(&self.dir, &ckpt),
                    log: rel(&self.dir, &log_path),
                    train_images: class_data.len(),
                    epochs: log.len(),
                    final_g_loss: last.g_loss,
                    final_d_loss: last.d_loss,
                });
            }
            Ok(GeneratorsStage { generators })
        })
    }

    fn bundles<T: Scalar>(&self, gens: &GeneratorsStage) -> Result<Vec<GeneratorBundle<T>>> {
        gens.generators
            .iter()
            .map(|g| GeneratorBundle::load(&self.dir.join(&g.checkpoint)))
            .collect()
    }

    fn synthesize<T: Scalar>(&self, plan: &AugmentationPlan, gens: &GeneratorsStage) -> Result<SynthesizeStage> {
        self.stage(STAGE_SYNTHESIZE, || {
            let bundles = self.bundles::<T>(gens)?;
            let sources: Vec<&dyn SyntheticSource> = bundles.iter().map(|b| b as &dyn SyntheticSource).collect();
            let seed = self.cfg.synth_seed();
            let d_gen = materialize_plan(plan, &sources, seed)?;
            let dir = self.data("gen");
            save_dataset(&d_gen, &dir)?;
            Ok(SynthesizeStage {
                dir: rel(&self.dir, &dir),
                counts: d_gen.class_counts(),
                seed,
            })
        })
    }

    fn fid<T: Scalar>(&self, train: &LabeledDataset, d_gen: &LabeledDataset, gens: &GeneratorsStage) -> Result<FidStage> {
        self.stage(STAGE_FID, || {
            let fx = RandomConvExtractor::new(self.cfg.eval.extractor_seed);
            let bundles = self.bundles::<T>(gens)?;
            let mut rows = Vec::new();
            let mut skipped = Vec::new();
            for b in &bundles {
                let k = b.class_id;
                let real = train.restrict_to_class(k);
                let synth = d_gen.restrict_to_class(k);
                if real.len() < 2 || synth.len() < 2 {
                    skipped.push(format!(
                        "class {k}: {} real and {} synthetic images, FID needs 2 of each",
                        real.len(),
                        synth.len()
                    ));
                    continue;
                }
                let fresh = GeneratorBundle::<T>::init(
                    k,
                    b.arch.clone(),
                    derive_seed(self.cfg.seed, SALT_UNTRAINED + k as u64),
                )?;
                let latents = sample_latents(synth.len(), b.arch.net.latent_dim, self.cfg.synth_seed())?;
                let base = LabeledDataset::new(fresh.generate(&latents)?, d_gen.class_count(), Task::Classification)?;
                rows.push(FidRow {
                    class_id: k,
                    trained: fid_score(&real, &synth, &fx)?,
                    untrained: fid_score(&real, &quantize_8bit(&base), &fx)?,
                });
            }
            Ok(FidStage {
                extractor: fx.id(),
                rows,
                skipped,
            })
        })
    }

    fn classifier<T: Scalar>(
        &self,
        name: &str,
        label: String,
        train: &LabeledDataset,
        val: &LabeledDataset,
        test: &LabeledDataset,
        synthetic_used: usize,
    ) -> Result<ClassifierStage> {
        self.stage(name, || {
            let out = train_classifier::<T>(train, val, &self.cfg.train_config())?;
            let ckpt = self.dir.join("checkpoints").join(format!("cls_{name}.ckpt"));
            out.model.save(&ckpt)?;
            let (eval_set, evaluated_on) = evaluation_set(test, val);
            Ok(ClassifierStage {
                label,
                checkpoint: rel(&self.dir, &ckpt),
                train_size: train.len(),
                synthetic_used,
                best_epoch: out.best_epoch,
                evaluated_on,
                test: evaluate_classification(&out.model, eval_set)?,
                history: out.history,
            })
        })
    }

    fn ssl<T: Scalar>(
        &self,
        train: &LabeledDataset,
        val: &LabeledDataset,
        test: &LabeledDataset,
        d_gen: &LabeledDataset,
    ) -> Result<SslStage> {
        self.stage(STAGE_SSL, || {
            let ssl = self.cfg.ssl_or_default();
            let mut trainer = UnetTrainer::<T>::new(self.cfg.train_config());
            let rounds = run_ssl(train, val, d_gen, &mut trainer, &ssl, Some(&self.dir))?;
            let (eval_set, evaluated_on) = evaluation_set(test, val);
            let mut records = Vec::new();
            for r in rounds {
                let test_counts = evaluate_segmentation(&r.model, eval_set, ssl.threshold)?;
                records.push(SslRoundRecord {
                    round: r.round,
                    checkpoint: rel(&self.dir, &round_checkpoint(&self.dir, r.round)),
                    train_size: r.metrics.train_size,
                    pseudo_count: r.metrics.pseudo_count,
                    pseudo_used: r.metrics.pseudo_used,
                    epochs_run: r.metrics.epochs_run,
                    validation_counts: r.metrics.validation,
                    validation: r.metrics.metrics,
                    test_counts,
                    test: segmentation_metrics(&test_counts, ssl.miou_mode)?,
                    history: r.history,
                });
            }
            Ok(SslStage {
                evaluated_on,
                conventions: MetricConventions::new(ssl.miou_mode, None),
                rounds: records,
            })
        })
    }
}

fn evaluation_set<'d>(test: &'d LabeledDataset, val: &'d LabeledDataset) -> (&'d LabeledDataset, String) {
    if test.is_empty() {
        log::warn!("test set is empty; evaluating on the validation set");
        (val, "validation".into())
    } else {
        (test, "test".into())
    }
}

/// Writes `config.json`, or checks that an existing one hashes equal.
pub fn prepare_run_dir(cfg: &ExperimentConfig, runs_root: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir(runs_root);
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        let stored: ExperimentConfig = read_json(&path)?;
        let (a, b) = (config_hash(&stored), config_hash(cfg));
        if a != b {
            return Err(Error::config(format!(
                "{} was created by a different config (hash {} vs {})",
                dir.display(),
                &a[..12],
                &b[..12]
            )));
        }
    } else {
        write_json(&path, cfg)?;
    }
    Ok(dir)
}

/// Runs every stage not yet persisted in the run directory, then writes the
/// report and plots.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig, runs_root: &Path) -> Result<MetricsReport> {
    let dir = prepare_run_dir(cfg, runs_root)?;
    let run = Run { dir: dir.clone(), cfg };
    run.dataset()?;
    let train = run.load("train", STAGE_DATASET)?;
    let val = run.load("val", STAGE_DATASET)?;
    let test = run.load("test", STAGE_DATASET)?;
    let plan = run.plan(&train)?;
    let gens = run.generators::<T>(&train, &plan)?;
    run.synthesize::<T>(&plan, &gens)?;
    let d_gen = run.load("gen", STAGE_SYNTHESIZE)?;
    if cfg.eval.fid {
        run.fid::<T>(&train, &d_gen, &gens)?;
    }
    match cfg.task {
        Task::Classification => {
            run.classifier::<T>(STAGE_BASELINE, "Baseline".into(), &train, &val, &test, 0)?;
            let d_aug = merge(&train, &d_gen).map_err(|e| Error::stage(STAGE_AUGMENTED, e))?;
            let label = format!("Augmented ({})", cfg.strategy);
            run.classifier::<T>(STAGE_AUGMENTED, label, &d_aug, &val, &test, d_gen.len())?;
        }
        Task::Segmentation => {
            run.ssl::<T>(&train, &val, &test, &d_gen)?;
        }
    }
    let wrap = |e| Error::stage(STAGE_REPORT, e);
    let report = build_report(cfg, &dir, T::DTYPE).map_err(wrap)?;
    write_json(&dir.join(REPORT_JSON), &report).map_err(wrap)?;
    fs::write(dir.join(REPORT_MD), render_markdown(&report))
        .at(dir.join(REPORT_MD))
        .map_err(wrap)?;
    let plots = emit_plots(&report, &dir.join("plots")).map_err(wrap)?;
    for note in &plots.notes {
        log::info!("plots: {note}");
    }
    Ok(report)
}
