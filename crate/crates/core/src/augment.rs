//! Synthetic augmentation plans and the assembly of `D_aug = D_train ∪ D_gen`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Provenance, Task};
use crate::error::{Error, Result};
use crate::generator::SyntheticSource;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// Top every class up to the largest class size.
    Balance,
    /// Balance, then add `fraction` of the balanced class size to every class.
    BalancePlus { fraction: f64 },
    /// `total` synthetic images split by `weights` (equal when absent);
    /// rounding leftovers go to the lowest class ids.
    Fixed {
        total: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

impl FromStr for Strategy {
    type Err = Error;

    /// `balance`, `frac:<f>` or `fixed:<M>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown strategy `{s}` (expected balance, frac:<f> or fixed:<M>)"));
        if s == "balance" {
            return Ok(Strategy::Balance);
        }
        let (head, arg) = s.split_once(':').ok_or_else(bad)?;
        match head {
            "frac" => {
                let fraction: f64 = arg.parse().map_err(|_| bad())?;
                Ok(Strategy::BalancePlus { fraction })
            }
            "fixed" => Ok(Strategy::Fixed {
                total: arg.parse().map_err(|_| bad())?,
                weights: None,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Balance => write!(f, "balance"),
            Strategy::BalancePlus { fraction } => write!(f, "frac:{fraction}"),
            Strategy::Fixed { total, .. } => write!(f, "fixed:{total}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub strategy: Strategy,
    /// `n_k` of the real training set.
    pub source_counts: Vec<usize>,
    /// `m_k` synthetic images to add per class.
    pub synthetic_counts: Vec<usize>,
}

impl AugmentationPlan {
    pub fn total_synthetic(&self) -> usize {
        self.synthetic_counts.iter().sum()
    }

    /// `n_k + m_k`.
    pub fn targets(&self) -> Vec<usize> {
        self.source_counts
            .iter()
            .zip(&self.synthetic_counts)
            .map(|(n, m)| n + m)
            .collect()
    }
}

fn split_fixed(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| (total as f64 * w / sum).floor() as usize)
        .collect();
    let mut left = total - counts.iter().sum::<usize>();
    for c in counts.iter_mut() {
        if left == 0 {
            break;
        }
        *c += 1;
        left -= 1;
    }
    counts
}

/// Per-class synthetic counts for `strategy` given the class sizes in `d`.
pub fn plan_augmentation(d: &LabeledDataset, strategy: &Strategy) -> Result<AugmentationPlan> {
    if d.is_empty() {
        return Err(Error::config("cannot plan augmentation for an empty dataset"));
    }
    plan_from_counts(&d.class_counts(), strategy)
}

pub fn plan_from_counts(counts: &[usize], strategy: &Strategy) -> Result<AugmentationPlan> {
    let classes = counts.len();
    if classes == 0 {
        return Err(Error::config("cannot plan augmentation without classes"));
    }
    let n_max = *counts.iter().max().expect("nonempty");
    let synthetic_counts = match strategy {
        Strategy::Balance => counts.iter().map(|&n| n_max - n).collect(),
        Strategy::BalancePlus { fraction } => {
            if !(fraction.is_finite() && *fraction >= 0.0) {
                return Err(Error::config(format!("fraction must be finite and >= 0, got {fraction}")));
            }
            // round half up
            let target = ((1.0 + fraction) * n_max as f64 + 0.5).floor() as usize;
            counts.iter().map(|&n| target - n).collect()
        }
        Strategy::Fixed { total, weights } => {
            let w = match weights {
                Some(w) if w.len() != classes => {
                    return Err(Error::config(format!("{} weights for {classes} classes", w.len())));
                }
                Some(w) if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 => {
                    return Err(Error::config("fixed-split weights must be non-negative with a positive sum"));
                }
                Some(w) => w.clone(),
                None => vec![1.0; classes],
            };
            if *total < classes {
                log::warn!("fixed({total}) is smaller than the class count {classes}; classes {total}.. receive nothing");
            }
            split_fixed(*total, &w)
        }
    };
    Ok(AugmentationPlan {
        strategy: strategy.clone(),
        source_counts: counts.to_vec(),
        synthetic_counts,
    })
}

/// `D_gen`: exactly `m_k` synthetic samples from the source of each class.
pub fn materialize_plan(plan: &AugmentationPlan, sources: &[&dyn SyntheticSource], seed: u64) -> Result<LabeledDataset> {
    let classes = plan.synthetic_counts.len();
    let mut samples = Vec::with_capacity(plan.total_synthetic());
    for (k, &m) in plan.synthetic_counts.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let src = sources
            .iter()
            .find(|s| s.class_id() == k)
            .ok_or_else(|| Error::config(format!("no generator for class {k}, which needs {m} synthetic samples")))?;
        let made = src.synthesize(m, derive_seed(seed, k as u64))?;
        if made.len() != m || made.iter().any(|s| s.class_label != Some(k) || s.provenance != Provenance::Synthetic) {
            return Err(Error::contract(format!(
                "class {k} source returned {} samples, {m} synthetic samples of class {k} expected",
                made.len()
            )));
        }
        samples.extend(made);
    }
    LabeledDataset::new(samples, classes, Task::Classification)
}

/// Disjoint union; fails on id collisions or mismatched task/class count.
pub fn merge(a: &LabeledDataset, b: &LabeledDataset) -> Result<LabeledDataset> {
    if a.task() != b.task() || a.class_count() != b.class_count() {
        return Err(Error::contract(format!(
            "cannot merge {:?}/{} classes with {:?}/{} classes",
            a.task(),
            a.class_count(),
            b.task(),
            b.class_count()
        )));
    }
    let samples = a.samples().iter().chain(b.samples()).cloned().collect();
    LabeledDataset::new(samples, a.class_count(), a.task())
}
