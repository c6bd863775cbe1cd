//! Reports built from stage JSON, their markdown form, and run comparison.
//!
//! Every number in a [`MetricsReport`] is a [`Cell`] or [`Curve`] that names
//! the stage file and JSON pointer it was read from; [`verify_report`] walks
//! them and checks each against the files on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    config_hash, stage_path, ExperimentConfig, CONFIG_VERSION, STAGE_AUGMENTED, STAGE_BASELINE, STAGE_FID,
    STAGE_SSL,
};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::metrics::MetricConventions;
use crate::persist::read_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    /// `stages/<name>.json#<json pointer>`
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub lower_is_better: bool,
    /// Print values ×100.
    pub percent: bool,
}

impl Table {
    /// Indices of the best rows in each column (all of them on ties).
    pub fn best_rows(&self) -> Vec<Vec<usize>> {
        (0..self.columns.len())
            .map(|c| {
                let values: Vec<f64> = self.rows.iter().map(|r| r.cells[c].value).collect();
                let best = values.iter().copied().fold(None, |acc: Option<f64>, v| match acc {
                    Some(a) if self.lower_is_better => Some(a.min(v)),
                    Some(a) => Some(a.max(v)),
                    None => Some(v),
                });
                values
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| Some(**v) == best)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }
}

/// One per-epoch series, e.g. the training loss of a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    /// Pointer to an array of epoch records.
    pub source: String,
    pub field: String,
    pub values: Vec<f64>,
}

/// A run's final numbers, the unit of [`compare_runs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub metric: String,
    pub cell: Cell,
    pub lower_is_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub config_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub component_seeds: BTreeMap<String, u64>,
    pub crate_version: String,
    pub dtype: String,
    pub conventions: MetricConventions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub task: Task,
    pub strategy: String,
    pub provenance: ReportProvenance,
    pub tables: Vec<Table>,
    pub fid: Option<Table>,
    /// Validation metrics per pseudo-labeling round.
    pub rounds: Option<Table>,
    pub headline: Vec<Headline>,
    pub curves: Vec<Curve>,
    pub notes: Vec<String>,
}

struct Sources<'a> {
    run_dir: &'a Path,
    loaded: BTreeMap<String, serde_json::Value>,
}

impl Sources<'_> {
    fn value(&mut self, stage: &str, pointer: &str) -> Result<serde_json::Value> {
        if !self.loaded.contains_key(stage) {
            let v: serde_json::Value = read_json(&stage_path(self.run_dir, stage))?;
            self.loaded.insert(stage.to_string(), v);
        }
        self.loaded[stage]
            .pointer(pointer)
            .cloned()
            .ok_or_else(|| Error::contract(format!("stages/{stage}.json has nothing at {pointer}")))
    }

    fn cell(&mut self, stage: &str, pointer: &str) -> Result<Cell> {
        let v = self.value(stage, pointer)?;
        let value = v
            .as_f64()
            .ok_or_else(|| Error::contract(format!("stages/{stage}.json#{pointer} is not a number")))?;
        Ok(Cell {
            value,
            source: format!("stages/{stage}.json#{pointer}"),
        })
    }

    fn curve(&mut self, name: String, stage: &str, pointer: &str, field: &str) -> Result<Curve> {
        let v = self.value(stage, pointer)?;
        Ok(Curve {
            name,
            source: format!("stages/{stage}.json#{pointer}"),
            field: field.to_string(),
            values: series(&v, field)?,
        })
    }
}

fn series(records: &serde_json::Value, field: &str) -> Result<Vec<f64>> {
    let arr = records
        .as_array()
        .ok_or_else(|| Error::contract("curve source is not an array"))?;
    arr.iter()
        .map(|r| {
            r.get(field)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::contract(format!("epoch record without numeric `{field}`")))
        })
        .collect()
}

fn split_source(source: &str) -> Result<(&str, &str)> {
    source
        .split_once('#')
        .ok_or_else(|| Error::contract(format!("malformed source `{source}`")))
}

/// `Initial Training`, `1st Pseudo-Labeling`, `2nd Pseudo-Labeling`, ...
pub(crate) fn round_label(t: usize) -> String {
    if t == 0 {
        return "Initial Training".into();
    }
    let suffix = match (t % 10, t % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{t}{suffix} Pseudo-Labeling")
}

const SEG_METRICS: [(&str, &str); 5] = [
    ("mIoU", "miou"),
    ("Dice", "dice"),
    ("Accuracy", "accuracy"),
    ("Specificity", "specificity"),
    ("Sensitivity", "sensitivity"),
];

/// Reads the stage files of a finished run into a report.
pub fn build_report(cfg: &ExperimentConfig, run_dir: &Path, dtype: &str) -> Result<MetricsReport> {
    let mut src = Sources {
        run_dir,
        loaded: BTreeMap::new(),
    };
    let mut tables = Vec::new();
    let mut headline = Vec::new();
    let mut curves = Vec::new();
    let mut notes = Vec::new();
    let mut rounds_table = None;
    let mut extractor = None;

    match cfg.task {
        Task::Classification => {
            let classes = src.value(STAGE_BASELINE, "/test/per_class")?.as_array().map_or(0, Vec::len);
            let mut columns = vec!["Accuracy".to_string(), "Macro-F1".to_string()];
            columns.extend((0..classes).map(|k| format!("F1 class {k}")));
            let mut rows = Vec::new();
            for stage in [STAGE_BASELINE, STAGE_AUGMENTED] {
                let label = src
                    .value(stage, "/label")?
                    .as_str()
                    .unwrap_or(stage)
                    .to_string();
                let mut cells = vec![src.cell(stage, "/test/accuracy")?, src.cell(stage, "/test/macro_f1")?];
                for k in 0..classes {
                    cells.push(src.cell(stage, &format!("/test/per_class/{k}/f1"))?);
                }
                curves.push(src.curve(format!("{label} train loss"), stage, "/history", "train_loss")?);
                curves.push(src.curve(format!("{label} val loss"), stage, "/history", "val_loss")?);
                rows.push(Row { label, cells });
            }
            let on = src.value(STAGE_BASELINE, "/evaluated_on")?;
            for (name, ptr) in [("Accuracy", "/test/accuracy"), ("Macro-F1", "/test/macro_f1")] {
                headline.push(Headline {
                    metric: name.into(),
                    cell: src.cell(STAGE_AUGMENTED, ptr)?,
                    lower_is_better: false,
                });
            }
            tables.push(Table {
                title: format!("Classification ({})", on.as_str().unwrap_or("test")),
                columns,
                rows,
                lower_is_better: false,
                percent: true,
            });
        }
        Task::Segmentation => {
            let n = src.value(STAGE_SSL, "/rounds")?.as_array().map_or(0, Vec::len);
            let on = src.value(STAGE_SSL, "/evaluated_on")?;
            let mut rows = Vec::new();
            let mut val_rows = Vec::new();
            for t in 0..n {
                let cells = SEG_METRICS
                    .iter()
                    .map(|(_, key)| src.cell(STAGE_SSL, &format!("/rounds/{t}/test/{key}")))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(Row {
                    label: round_label(t),
                    cells,
                });
                val_rows.push(Row {
                    label: round_label(t),
                    cells: vec![
                        src.cell(STAGE_SSL, &format!("/rounds/{t}/validation/miou"))?,
                        src.cell(STAGE_SSL, &format!("/rounds/{t}/validation/dice"))?,
                    ],
                });
                for field in ["train_loss", "val_loss"] {
                    let name = format!("{} {}", round_label(t), field.replace('_', " "));
                    curves.push(src.curve(name, STAGE_SSL, &format!("/rounds/{t}/history"), field)?);
                }
            }
            if n > 0 {
                for (name, key) in SEG_METRICS {
                    headline.push(Headline {
                        metric: name.into(),
                        cell: src.cell(STAGE_SSL, &format!("/rounds/{}/test/{key}", n - 1))?,
                        lower_is_better: false,
                    });
                }
            }
            tables.push(Table {
                title: format!("Segmentation ({})", on.as_str().unwrap_or("test")),
                columns: SEG_METRICS.iter().map(|(c, _)| c.to_string()).collect(),
                rows,
                lower_is_better: false,
                percent: true,
            });
            rounds_table = Some(Table {
                title: "Per-round validation".into(),
                columns: vec!["mIoU".into(), "Dice".into()],
                rows: val_rows,
                lower_is_better: false,
                percent: true,
            });
        }
    }

    let fid = if cfg.eval.fid {
        extractor = src.value(STAGE_FID, "/extractor")?.as_str().map(str::to_string);
        let rows_v = src.value(STAGE_FID, "/rows")?;
        let mut rows = Vec::new();
        for (i, r) in rows_v.as_array().into_iter().flatten().enumerate() {
            let k = r.get("class_id").and_then(serde_json::Value::as_u64).unwrap_or(i as u64);
            rows.push(Row {
                label: format!("class {k}"),
                cells: vec![
                    src.cell(STAGE_FID, &format!("/rows/{i}/trained/fid"))?,
                    src.cell(STAGE_FID, &format!("/rows/{i}/untrained/fid"))?,
                ],
            });
        }
        for s in src.value(STAGE_FID, "/skipped")?.as_array().into_iter().flatten() {
            notes.push(format!("FID skipped for {}", s.as_str().unwrap_or("?")));
        }
        Some(Table {
            title: "FID (lower is better)".into(),
            columns: vec!["Trained generator".into(), "Untrained generator".into()],
            rows,
            lower_is_better: true,
            percent: false,
        })
    } else {
        notes.push("FID evaluation disabled".into());
        None
    };

    let mut component_seeds = BTreeMap::new();
    component_seeds.insert("split".to_string(), cfg.split_seed());
    component_seeds.insert("synthesize".to_string(), cfg.synth_seed());
    component_seeds.insert("train".to_string(), cfg.train_config().seed);
    let classes = src.value(super::STAGE_DATASET, "/class_count")?.as_u64().unwrap_or(0) as usize;
    for k in 0..classes {
        component_seeds.insert(format!("gan_class_{k}"), cfg.gan_config(k).seed);
    }

    Ok(MetricsReport {
        run_id: cfg.run_id.clone(),
        task: cfg.task,
        strategy: cfg.strategy.to_string(),
        provenance: ReportProvenance {
            config_version: CONFIG_VERSION,
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            component_seeds,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dtype: dtype.to_string(),
            conventions: MetricConventions::new(cfg.eval.miou_mode, extractor),
        },
        tables,
        fid,
        rounds: rounds_table,
        headline,
        curves,
        notes,
    })
}

/// Checks every cell, headline and curve against the stage files under
/// `run_dir`; returns the number of values checked.
pub fn verify_report(report: &MetricsReport, run_dir: &Path) -> Result<usize> {
    let mut files: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let mut lookup = |source: &str| -> Result<serde_json::Value> {
        let (file, pointer) = split_source(source)?;
        if !files.contains_key(file) {
            files.insert(file.to_string(), read_json(&run_dir.join(file))?);
        }
        files[file]
            .pointer(pointer)
            .cloned()
            .ok_or_else(|| Error::contract(format!("{source} does not exist")))
    };
    let mut checked = 0;
    let tables = report.tables.iter().chain(&report.fid).chain(&report.rounds);
    let cells = tables
        .flat_map(|t| t.rows.iter().flat_map(|r| &r.cells))
        .chain(report.headline.iter().map(|h| &h.cell));
    for cell in cells {
        let stored = lookup(&cell.source)?.as_f64();
        if stored != Some(cell.value) {
            return Err(Error::contract(format!(
                "{} holds {stored:?}, report says {}",
                cell.source, cell.value
            )));
        }
        checked += 1;
    }
    for c in &report.curves {
        if series(&lookup(&c.source)?, &c.field)? != c.values {
            return Err(Error::contract(format!("curve `{}` differs from {}", c.name, c.source)));
        }
        checked += c.values.len();
    }
    Ok(checked)
}

fn fmt_value(v: f64, percent: bool) -> String {
    if percent {
        format!("{:.2}", v * 100.0)
    } else {
        format!("{v:.4}")
    }
}

fn push_table(out: &mut String, t: &Table) {
    let best = t.best_rows();
    let _ = writeln!(out, "## {}\n", t.title);
    let _ = writeln!(out, "| | {} |", t.columns.join(" | "));
    let _ = writeln!(out, "|---|{}", "---:|".repeat(t.columns.len()));
    for (i, r) in t.rows.iter().enumerate() {
        let cells: Vec<String> = r
            .cells
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let s = fmt_value(cell.value, t.percent);
                // a single row has nothing to beat
                if t.rows.len() > 1 && best[c].contains(&i) {
                    format!("**{s}**")
                } else {
                    s
                }
            })
            .collect();
        let _ = writeln!(out, "| {} | {} |", r.label, cells.join(" | "));
    }
    out.push('\n');
}

/// Markdown tables, best entries in bold, percentages with two decimals.
pub fn render_markdown(r: &MetricsReport) -> String {
    let mut out = String::new();
    let p = &r.provenance;
    let _ = writeln!(out, "# Run `{}`\n", r.run_id);
    let _ = writeln!(out, "- task: {:?}", r.task);
    let _ = writeln!(out, "- strategy: {}", r.strategy);
    let _ = writeln!(out, "- config hash: `{}`", p.config_hash);
    let _ = writeln!(out, "- seed: {}", p.seed);
    let _ = writeln!(out, "- crate version: {} ({})", p.crate_version, p.dtype);
    let _ = writeln!(out, "- mIoU: {:?}", p.conventions.miou_mode);
    if let Some(x) = &p.conventions.extractor {
        let _ = writeln!(out, "- FID extractor: {x}");
    }
    out.push('\n');
    for t in r.tables.iter().chain(&r.rounds).chain(&r.fid) {
        push_table(&mut out, t);
    }
    if !r.notes.is_empty() {
        out.push_str("## Notes\n\n");
        for n in &r.notes {
            let _ = writeln!(out, "- {n}");
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Baseline,
    Treatment,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub baseline: f64,
    pub treatment: f64,
    /// `treatment - baseline`.
    pub delta: f64,
    pub best: Winner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub baseline_run: String,
    pub treatment_run: String,
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| metric | {} | {} | delta |\n|---|---:|---:|---:|\n",
            self.baseline_run, self.treatment_run
        );
        for r in &self.rows {
            let bold = |s: String, on: bool| if on { format!("**{s}**") } else { s };
            let tie = r.best == Winner::Tie;
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:+.4} |",
                r.metric,
                bold(format!("{:.4}", r.baseline), tie || r.best == Winner::Baseline),
                bold(format!("{:.4}", r.treatment), tie || r.best == Winner::Treatment),
                r.delta
            );
        }
        out
    }
}

/// Per-metric deltas of the two runs' headline numbers.
pub fn compare_runs(baseline: &MetricsReport, treatment: &MetricsReport) -> Result<DeltaTable> {
    let names = |r: &MetricsReport| r.headline.iter().map(|h| h.metric.clone()).collect::<Vec<_>>();
    if names(baseline) != names(treatment) {
        return Err(Error::contract(format!(
            "reports carry different metrics: {:?} vs {:?}",
            names(baseline),
            names(treatment)
        )));
    }
    let rows = baseline
        .headline
        .iter()
        .zip(&treatment.headline)
        .map(|(b, t)| {
            let (x, y) = (b.cell.value, t.cell.value);
            let best = if x == y {
                Winner::Tie
            } else if (y > x) != b.lower_is_better {
                Winner::Treatment
            } else {
                Winner::Baseline
            };
            DeltaRow {
                metric: b.metric.clone(),
                baseline: x,
                treatment: y,
                delta: y - x,
                best,
            }
        })
        .collect();
    Ok(DeltaTable {
        baseline_run: baseline.run_id.clone(),
        treatment_run: treatment.run_id.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordinals() {
        let labels: Vec<String> = (0..5).map(round_label).collect();
        assert_eq!(
            labels,
            [
                "Initial Training",
                "1st Pseudo-Labeling",
                "2nd Pseudo-Labeling",
                "3rd Pseudo-Labeling",
                "4th Pseudo-Labeling"
            ]
        );
        assert_eq!(round_label(11), "11th Pseudo-Labeling");
        assert_eq!(round_label(22), "22nd Pseudo-Labeling");
    }

    #[test]
    fn best_rows_follow_direction() {
        let cell = |v| Cell {
            value: v,
            source: String::new(),
        };
        let mut t = Table {
            title: "t".into(),
            columns: vec!["a".into(), "b".into()],
            rows: vec![
                Row {
                    label: "x".into(),
                    cells: vec![cell(1.0), cell(5.0)],
                },
                Row {
                    label: "y".into(),
                    cells: vec![cell(3.0), cell(5.0)],
                },
            ],
            lower_is_better: false,
            percent: false,
        };
        assert_eq!(t.best_rows(), vec![vec![1], vec![0, 1]]);
        t.lower_is_better = true;
        assert_eq!(t.best_rows(), vec![vec![0], vec![0, 1]]);
    }
}
