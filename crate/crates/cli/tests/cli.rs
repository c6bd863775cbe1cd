use std::path::Path;
use std::process::{Command, Output};

use ssgnet_core::augment::{plan_from_counts, AugmentationPlan, Strategy};
use ssgnet_core::data::{load_dataset, make_toy_corpus, save_dataset, ImageSample, LabeledDataset, Provenance, Task, ToyCorpusSpec};
use ssgnet_core::experiment::{DatasetSource, EvalConfig, ExperimentConfig, CONFIG_VERSION};
use ssgnet_core::generator::GanTrainConfig;
use ssgnet_core::metrics::{fid_score, FidResult, RandomConvExtractor};
use ssgnet_core::persist::read_json;
use ssgnet_core::train::TrainConfig;

fn ssgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssgnet"))
        .args(args)
        .env_remove("SSGNET_RUNS_ROOT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn plan_augment_tops_up_and_adds_a_fraction() {
    let run = tempfile::tempdir().unwrap();
    let train = run.path().join("data/train");
    let o = ssgnet(&["toygen", "--size", "16", "--counts", "100,60", "--task", "classification", "--out", p(&train)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = ssgnet(&["plan-augment", "--strategy", "frac:0.2", "--run-dir", p(run.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: AugmentationPlan = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed.synthetic_counts, [20, 60]);
    let direct = plan_from_counts(&[100, 60], &Strategy::BalancePlus { fraction: 0.2 }).unwrap();
    assert_eq!(printed, direct);
    let stored: AugmentationPlan = read_json(&run.path().join("plans/augment.json")).unwrap();
    assert_eq!(stored, direct);
}

#[test]
fn toygen_matches_the_library_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let o = ssgnet(&["toygen", "--size", "16", "--per-class", "6", "--seed", "4", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let direct = make_toy_corpus(&ToyCorpusSpec {
        image_size: 16,
        samples_per_class: 6,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let lib = dir.path().join("lib");
    save_dataset(&direct, &lib).unwrap();
    assert_eq!(load_dataset(&out).unwrap(), load_dataset(&lib).unwrap());
}

#[test]
fn fid_subcommand_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let spec = |seed| ToyCorpusSpec {
        image_size: 16,
        samples_per_class: 12,
        task: Task::Classification,
        seed,
        ..Default::default()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_dataset(&make_toy_corpus(&spec(1)).unwrap(), &a).unwrap();
    save_dataset(&make_toy_corpus(&spec(2)).unwrap(), &b).unwrap();
    let o = ssgnet(&["fid", "--real", p(&a), "--synthetic", p(&b), "--class", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: FidResult = serde_json::from_str(&stdout(&o)).unwrap();
    let direct = fid_score(
        &load_dataset(&a).unwrap().restrict_to_class(1),
        &load_dataset(&b).unwrap().restrict_to_class(1),
        &RandomConvExtractor::new(0),
    )
    .unwrap();
    assert_eq!(printed, direct);
}

fn synthetic(d: LabeledDataset) -> LabeledDataset {
    let samples = d
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
fn ssl_run_leaves_one_directory_per_round() {
    let run = tempfile::tempdir().unwrap();
    let o = ssgnet(&["toygen", "--size", "16", "--per-class", "10", "--task", "segmentation", "--run-dir", p(run.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ssgnet(&["split", "--ratios", "0.6,0.4,0", "--run-dir", p(run.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gen = make_toy_corpus(&ToyCorpusSpec {
        image_size: 16,
        samples_per_class: 3,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    save_dataset(&synthetic(gen), &run.path().join("data/gen")).unwrap();

    let o = ssgnet(&["ssl-run", "--rounds", "2", "--epochs", "1", "--run-dir", p(run.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rounds: Vec<serde_json::Value> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rounds.len(), 3);
    let mut dirs: Vec<String> = std::fs::read_dir(run.path().join("pseudo"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["round_0", "round_1", "round_2"]);
    for r in &rounds {
        assert_eq!(r["pseudo_count"], 6);
    }
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let o = ssgnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn help_exits_0() {
    let o = ssgnet(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ssl-run"));
}

#[test]
fn missing_run_dir_is_a_user_error() {
    let o = ssgnet(&["train-seg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-seg"), "{}", stderr(&o));
}

#[test]
fn failing_stage_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    // too few class-1 images to train a generator
    let cfg = ExperimentConfig {
        version: CONFIG_VERSION,
        run_id: "fails".into(),
        task: Task::Classification,
        seed: 0,
        dataset: DatasetSource::Toy {
            spec: ToyCorpusSpec {
                image_size: 16,
                class_counts: Some(vec![30, 10]),
                task: Task::Classification,
                ..Default::default()
            },
        },
        test_set: None,
        split: ssgnet_core::data::SplitRatios::new(0.6, 0.2, 0.2).unwrap(),
        strategy: Strategy::Balance,
        gan: GanTrainConfig {
            epochs: 1,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 1,
            loss: ssgnet_core::train::LossId::Bce,
            ..Default::default()
        },
        ssl: None,
        eval: EvalConfig::default(),
    };
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let root = dir.path().join("runs");
    let o = ssgnet(&["run", "--config", p(&path), "--runs-root", p(&root)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage `generators` failed"), "{}", stderr(&o));
    assert!(root.join("fails/stages/dataset.json").exists());
}

#[test]
fn malformed_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, "{\"version\": 1, \"bogus\": true}").unwrap();
    let o = ssgnet(&["run", "--config", p(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let path = e.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|err| panic!("{}: {err}", path.display()));
        seen += 1;
    }
    assert!(seen >= 2);
}
