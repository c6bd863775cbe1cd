//! `ssgnet`: command-line access to every pipeline stage.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 when a stage fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ssgnet_core::augment::{materialize_plan, merge, plan_augmentation, AugmentationPlan, Strategy};
use ssgnet_core::data::{
    load_dataset, make_toy_corpus, patchify, save_dataset, split_dataset, SplitRatios, Task, ToyCorpusSpec,
};
use ssgnet_core::experiment::{
    build_report, compare_runs, emit_plots, render_markdown, run_experiment, verify_report, DatasetSource,
    ExperimentConfig, MetricsReport, CONFIG_FILE, REPORT_JSON, REPORT_MD,
};
use ssgnet_core::generator::{train_generator, GanTrainConfig, GeneratorBundle, ImageFolderSource, SyntheticSource};
use ssgnet_core::metrics::{fid_score, segmentation_metrics, MiouMode, RandomConvExtractor};
use ssgnet_core::persist::{read_json, write_json, write_jsonl};
use ssgnet_core::ssl::{run_ssl, SslConfig};
use ssgnet_core::train::{
    evaluate_classification, evaluate_segmentation, train_classifier, train_segmenter, ArchitectureId, TrainConfig,
};
use ssgnet_core::{Error, GeneratorBundle32, ModelHandle32, Result, UnetTrainer32};

#[derive(Parser, Debug)]
#[command(name = "ssgnet", version, about = "Generative augmentation and pseudo-labeling pipeline")]
struct Cli {
    /// Experiment config (JSON); supplies defaults for every subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory; defaults to <runs root>/<run id>.
    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "SSGNET_RUNS_ROOT", default_value = "runs", value_name = "PATH")]
    runs_root: PathBuf,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Classification,
    Segmentation,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Segmentation => Task::Segmentation,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural toy corpus.
    Toygen {
        /// Output dataset directory [default: <run dir>/data/full].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        /// Per-class counts, e.g. `100,30`.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        task: Option<TaskArg>,
    },
    /// Stratified train/val/test split into <run dir>/data.
    Split {
        /// Dataset directory [default: <run dir>/data/full].
        #[arg(long)]
        input: Option<PathBuf>,
        /// `train,val,test` fractions.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Tile images into labeled patches.
    Patchify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patch: usize,
        #[arg(long)]
        stride: usize,
    },
    /// Train the generator of one class on <run dir>/data/train.
    TrainGen {
        #[arg(long = "class")]
        class: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Plan per-class synthetic counts; writes <run dir>/plans/augment.json.
    PlanAugment {
        /// balance | frac:<f> | fixed:<M>
        #[arg(long)]
        strategy: Option<String>,
        /// Training set [default: <run dir>/data/train].
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Materialize the plan with the trained generators into <run dir>/data/gen.
    Synthesize {
        /// Use a folder of external PNGs for a class: `K=DIR`.
        #[arg(long = "external", value_name = "K=DIR")]
        external: Vec<String>,
    },
    /// Train a classifier on <run dir>/data/train (plus data/gen with --augmented).
    TrainCls {
        #[arg(long)]
        augmented: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a segmenter on <run dir>/data/train.
    TrainSeg {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Iterative pseudo-labeling over <run dir>/data/{train,val,gen}.
    SslRun {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a model checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// FID between two dataset directories.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// Restrict both sets to one class.
        #[arg(long = "class")]
        class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        extractor_seed: u64,
    },
    /// Run (or resume) the full experiment described by --config.
    Run,
    /// Rebuild report.json, report.md and plots from a run's stage files.
    Report,
    /// Delta table of two reports (report.json files or run directories).
    Compare {
        baseline: PathBuf,
        treatment: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Toygen { .. } => "toygen",
            Command::Split { .. } => "split",
            Command::Patchify { .. } => "patchify",
            Command::TrainGen { .. } => "train-gen",
            Command::PlanAugment { .. } => "plan-augment",
            Command::Synthesize { .. } => "synthesize",
            Command::TrainCls { .. } => "train-cls",
            Command::TrainSeg { .. } => "train-seg",
            Command::SslRun { .. } => "ssl-run",
            Command::Eval { .. } => "eval",
            Command::Fid { .. } => "fid",
            Command::Run => "run",
            Command::Report => "report",
            Command::Compare { .. } => "compare",
        }
    }
}

struct Ctx {
    cfg: Option<ExperimentConfig>,
    run_dir: Option<PathBuf>,
    runs_root: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn run_dir(&self) -> Result<PathBuf> {
        match (&self.run_dir, &self.cfg) {
            (Some(d), _) => Ok(d.clone()),
            (None, Some(c)) => Ok(c.run_dir(&self.runs_root)),
            (None, None) => Err(Error::config("pass --run-dir or --config")),
        }
    }

    fn data(&self, part: &str) -> Result<PathBuf> {
        Ok(self.run_dir()?.join("data").join(part))
    }

    fn config(&self) -> Result<&ExperimentConfig> {
        self.cfg.as_ref().ok_or_else(|| Error::config("this subcommand needs --config"))
    }

    fn train_config(&self, epochs: Option<usize>) -> TrainConfig {
        let mut t = self.cfg.as_ref().map(|c| c.train_config()).unwrap_or_default();
        if self.cfg.is_none() {
            t.seed = self.seed.unwrap_or(0);
        }
        t.epochs = epochs.unwrap_or(t.epochs);
        t
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn load_report(path: &Path) -> Result<MetricsReport> {
    let file = if path.is_dir() { path.join(REPORT_JSON) } else { path.to_owned() };
    read_json(&file)
}

fn dispatch(cmd: Command, ctx: &Ctx) -> Result<()> {
    match cmd {
        Command::Toygen {
            out,
            size,
            per_class,
            counts,
            task,
        } => {
            let mut spec = match ctx.cfg.as_ref().map(|c| &c.dataset) {
                Some(DatasetSource::Toy { spec }) => spec.clone(),
                _ => ToyCorpusSpec::default(),
            };
            spec.image_size = size.unwrap_or(spec.image_size);
            spec.samples_per_class = per_class.unwrap_or(spec.samples_per_class);
            if let Some(c) = counts {
                spec.class_count = c.len();
                spec.class_counts = Some(c);
            }
            spec.task = task.map_or(spec.task, Task::from);
            spec.seed = ctx.seed.unwrap_or(spec.seed);
            let d = make_toy_corpus(&spec)?;
            let out = match out {
                Some(o) => o,
                None => ctx.data("full")?,
            };
            save_dataset(&d, &out)?;
            print_json(&json!({"dir": out, "class_counts": d.class_counts()}));
        }
        Command::Split { input, ratios } => {
            let ratios = match (ratios, &ctx.cfg) {
                (Some(r), _) => match r[..] {
                    [train, val, test] => SplitRatios::new(train, val, test)?,
                    _ => return Err(Error::config(format!("--ratios needs 3 values, got {}", r.len()))),
                },
                (None, Some(c)) => c.split,
                (None, None) => SplitRatios::new(0.6, 0.2, 0.2)?,
            };
            let seed = match (ctx.seed, &ctx.cfg) {
                (Some(s), _) => s,
                (None, Some(c)) => c.split_seed(),
                (None, None) => 0,
            };
            let input = match input {
                Some(i) => i,
                None => ctx.data("full")?,
            };
            let (train, val, test) = split_dataset(&load_dataset(&input)?, ratios, seed)?;
            let mut summary = serde_json::Map::new();
            for (part, d) in [("train", &train), ("val", &val), ("test", &test)] {
                save_dataset(d, &ctx.data(part)?)?;
                summary.insert(part.into(), json!(d.class_counts()));
            }
            print_json(&summary);
        }
        Command::Patchify {
            input,
            out,
            patch,
            stride,
        } => {
            let d = patchify(&load_dataset(&input)?, patch, stride)?;
            save_dataset(&d, &out)?;
            print_json(&json!({"dir": out, "class_counts": d.class_counts()}));
        }
        Command::TrainGen { class, epochs } => {
            let mut gan = match (&ctx.cfg, ctx.seed) {
                (Some(c), _) => c.gan_config(class),
                (None, seed) => GanTrainConfig {
                    seed: seed.unwrap_or(0),
                    ..GanTrainConfig::default()
                },
            };
            gan.epochs = epochs.unwrap_or(gan.epochs);
            let train = load_dataset(&ctx.data("train")?)?;
            let out = train_generator::<f32>(&train.restrict_to_class(class), class, &gan)?;
            let dir = ctx.run_dir()?;
            let ckpt = dir.join("checkpoints").join(GeneratorBundle32::checkpoint_name(class));
            out.bundle.save(&ckpt)?;
            write_jsonl(&dir.join("logs").join(format!("gan_class_{class}.jsonl")), &out.log)?;
            print_json(&json!({"checkpoint": ckpt, "epochs": out.log.len(), "final": out.log.last()}));
        }
        Command::PlanAugment { strategy, input } => {
            let strategy: Strategy = match (strategy, &ctx.cfg) {
                (Some(s), _) => s.parse()?,
                (None, Some(c)) => c.strategy.clone(),
                (None, None) => return Err(Error::config("pass --strategy or --config")),
            };
            let input = match input {
                Some(i) => i,
                None => ctx.data("train")?,
            };
            let plan = plan_augmentation(&load_dataset(&input)?, &strategy)?;
            write_json(&ctx.run_dir()?.join("plans").join("augment.json"), &plan)?;
            print_json(&plan);
        }
        Command::Synthesize { external } => {
            let dir = ctx.run_dir()?;
            let plan: AugmentationPlan = read_json(&dir.join("plans").join("augment.json"))?;
            let mut folders = Vec::new();
            for e in &external {
                let (k, path) = e
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("--external expects K=DIR, got `{e}`")))?;
                let class_id = k
                    .parse()
                    .map_err(|_| Error::config(format!("bad class id `{k}` in --external")))?;
                folders.push(ImageFolderSource {
                    class_id,
                    dir: path.into(),
                });
            }
            let mut bundles = Vec::new();
            for (k, &m) in plan.synthetic_counts.iter().enumerate() {
                if m > 0 && !folders.iter().any(|f| f.class_id == k) {
                    let path = dir.join("checkpoints").join(GeneratorBundle32::checkpoint_name(k));
                    if path.exists() {
                        bundles.push(GeneratorBundle::<f32>::load(&path)?);
                    }
                }
            }
            let mut sources: Vec<&dyn SyntheticSource> = bundles.iter().map(|b| b as &dyn SyntheticSource).collect();
            sources.extend(folders.iter().map(|f| f as &dyn SyntheticSource));
            let seed = match (ctx.seed, &ctx.cfg) {
                (Some(s), _) => s,
                (None, Some(c)) => c.synth_seed(),
                (None, None) => 0,
            };
            let d_gen = materialize_plan(&plan, &sources, seed)?;
            save_dataset(&d_gen, &ctx.data("gen")?)?;
            print_json(&json!({"dir": ctx.data("gen")?, "class_counts": d_gen.class_counts()}));
        }
        Command::TrainCls { augmented, epochs } => {
            let mut train = load_dataset(&ctx.data("train")?)?;
            if augmented {
                train = merge(&train, &load_dataset(&ctx.data("gen")?)?)?;
            }
            let val = load_dataset(&ctx.data("val")?)?;
            let out = train_classifier::<f32>(&train, &val, &ctx.train_config(epochs))?;
            let name = if augmented { "augmented" } else { "baseline" };
            let dir = ctx.run_dir()?;
            let ckpt = dir.join("checkpoints").join(format!("cls_{name}.ckpt"));
            out.model.save(&ckpt)?;
            write_jsonl(&dir.join("logs").join(format!("cls_{name}.jsonl")), &out.history)?;
            let report = evaluate_classification(&out.model, &val)?;
            print_json(&json!({"checkpoint": ckpt, "best_epoch": out.best_epoch, "validation": report}));
        }
        Command::TrainSeg { epochs } => {
            let train = load_dataset(&ctx.data("train")?)?;
            let val = load_dataset(&ctx.data("val")?)?;
            let cfg = ctx.train_config(epochs);
            let out = train_segmenter::<f32>(&train, &val, &cfg)?;
            let dir = ctx.run_dir()?;
            let ckpt = dir.join("checkpoints").join("seg.ckpt");
            out.model.save(&ckpt)?;
            write_jsonl(&dir.join("logs").join("seg.jsonl"), &out.history)?;
            let counts = evaluate_segmentation(&out.model, &val, cfg.threshold)?;
            let mode = ctx.cfg.as_ref().map_or(MiouMode::TwoClassMean, |c| c.eval.miou_mode);
            let metrics = segmentation_metrics(&counts, mode)?;
            print_json(&json!({"checkpoint": ckpt, "best_epoch": out.best_epoch, "validation": metrics}));
        }
        Command::SslRun { rounds, epochs } => {
            let mut ssl = match &ctx.cfg {
                Some(c) if c.task == Task::Segmentation => c.ssl_or_default(),
                _ => SslConfig::default(),
            };
            ssl.rounds = rounds.unwrap_or(ssl.rounds);
            let train = load_dataset(&ctx.data("train")?)?;
            let val = load_dataset(&ctx.data("val")?)?;
            let gen = load_dataset(&ctx.data("gen")?)?;
            let mut trainer = UnetTrainer32::new(ctx.train_config(epochs));
            let dir = ctx.run_dir()?;
            let out = run_ssl(&train, &val, &gen, &mut trainer, &ssl, Some(&dir))?;
            let metrics: Vec<_> = out.iter().map(|r| &r.metrics).collect();
            print_json(&metrics);
        }
        Command::Eval {
            checkpoint,
            data,
            threshold,
        } => {
            let model = ModelHandle32::load(&checkpoint)?;
            let d = load_dataset(&data)?;
            match model.spec.arch {
                ArchitectureId::SmallCnnClassifier => print_json(&evaluate_classification(&model, &d)?),
                ArchitectureId::SmallUnetSegmenter => {
                    let counts = evaluate_segmentation(&model, &d, threshold)?;
                    let mode = ctx.cfg.as_ref().map_or(MiouMode::TwoClassMean, |c| c.eval.miou_mode);
                    print_json(&json!({"counts": counts, "metrics": segmentation_metrics(&counts, mode)?}));
                }
            }
        }
        Command::Fid {
            real,
            synthetic,
            class,
            extractor_seed,
        } => {
            let (mut a, mut b) = (load_dataset(&real)?, load_dataset(&synthetic)?);
            if let Some(k) = class {
                a = a.restrict_to_class(k);
                b = b.restrict_to_class(k);
            }
            print_json(&fid_score(&a, &b, &RandomConvExtractor::new(extractor_seed))?);
        }
        Command::Run => {
            let report = run_experiment::<f32>(ctx.config()?, &ctx.runs_root)?;
            print!("{}", render_markdown(&report));
        }
        Command::Report => {
            let dir = ctx.run_dir()?;
            let cfg: ExperimentConfig = match &ctx.cfg {
                Some(c) => c.clone(),
                None => read_json(&dir.join(CONFIG_FILE))?,
            };
            let report = build_report(&cfg, &dir, "f32")?;
            verify_report(&report, &dir)?;
            write_json(&dir.join(REPORT_JSON), &report)?;
            let md = render_markdown(&report);
            std::fs::write(dir.join(REPORT_MD), &md).map_err(|source| Error::Io {
                path: dir.join(REPORT_MD),
                source,
            })?;
            for note in emit_plots(&report, &dir.join("plots"))?.notes {
                eprintln!("note: {note}");
            }
            print!("{md}");
        }
        Command::Compare {
            baseline,
            treatment,
            json,
        } => {
            let table = compare_runs(&load_report(&baseline)?, &load_report(&treatment)?)?;
            if json {
                print_json(&table);
            } else {
                print!("{}", table.to_markdown());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let name = cli.command.name();
    let cfg = match cli.config.as_deref().map(ExperimentConfig::load).transpose() {
        Ok(mut c) => {
            if let (Some(c), Some(s)) = (c.as_mut(), cli.seed) {
                c.seed = s;
            }
            c
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let ctx = Ctx {
        cfg,
        run_dir: cli.run_dir,
        runs_root: cli.runs_root,
        seed: cli.seed,
    };
    match dispatch(cli.command, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_user_error() => {
            eprintln!("error: {name}: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => name.to_string(),
            };
            eprintln!("error: stage `{stage}` failed: {e}");
            ExitCode::from(2)
        }
    }
}
