//! Training objectives: binary cross-entropy, soft Dice, their sum, and the
//! t-vMF Dice loss with per-class adaptive sharpness.
//!
//! Every loss comes in two flavours: a value-only function and a `*_grad`
//! variant returning `(value, d value / d probabilities)`. The autodiff tape
//! consumes the latter through [`crate::nn::Graph::attach_loss`].

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp applied before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;
/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Guard added to the norm product in the t-vMF cosine.
pub const TVMF_EPS: f64 = 1e-7;

/// Predicted probabilities and binary targets, both laid out as
/// `batch × per_sample` (pixels or classes).
#[derive(Clone, Copy, Debug)]
pub struct PredictionBatch<'a, T> {
    probs: &'a [T],
    targets: &'a [T],
    batch: usize,
}

impl<'a, T: Float> PredictionBatch<'a, T> {
    pub fn new(probs: &'a [T], targets: &'a [T], batch: usize) -> Result<Self> {
        if probs.len() != targets.len() {
            return Err(Error::contract(format!(
                "prediction has {} elements but target has {}",
                probs.len(),
                targets.len()
            )));
        }
        if batch == 0 || probs.len() % batch != 0 {
            return Err(Error::contract(format!(
                "{} elements cannot be split into {batch} samples",
                probs.len()
            )));
        }
        Ok(PredictionBatch { probs, targets, batch })
    }

    pub fn probs(&self) -> &'a [T] {
        self.probs
    }

    pub fn targets(&self) -> &'a [T] {
        self.targets
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn per_sample(&self) -> usize {
        self.probs.len() / self.batch
    }

    fn samples(&self) -> impl Iterator<Item = (&'a [T], &'a [T])> {
        let per = self.per_sample();
        self.probs.chunks(per).zip(self.targets.chunks(per))
    }
}

fn lit<T: Float>(v: f64) -> T {
    T::from(v).expect("literal representable")
}

/// Mean binary cross-entropy over every element.
pub fn bce_loss<T: Float>(b: &PredictionBatch<'_, T>) -> T {
    bce_loss_grad(b).0
}

pub fn bce_loss_grad<T: Float>(b: &PredictionBatch<'_, T>) -> (T, Vec<T>) {
    let lo: T = lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let n: T = lit(b.probs.len() as f64);
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(b.probs.len());
    for (&p, &y) in b.probs.iter().zip(b.targets) {
        let pc = p.max(lo).min(hi);
        sum = sum - (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        // the clamp is flat outside [lo, hi]
        let g = if p > lo && p < hi {
            -(y / pc - (T::one() - y) / (T::one() - pc)) / n
        } else {
            T::zero()
        };
        grad.push(g);
    }
    (sum / n, grad)
}

/// `1 - mean_n (2 Σ ŷy + ε) / (Σ ŷ + Σ y + ε)`, ratio taken per sample.
pub fn dice_loss<T: Float>(b: &PredictionBatch<'_, T>, eps: f64) -> T {
    let eps: T = lit(eps);
    let mut acc = T::zero();
    for (p, y) in b.samples() {
        let (inter, sp, sy) = sums(p, y);
        acc = acc + (lit::<T>(2.0) * inter + eps) / (sp + sy + eps);
    }
    T::one() - acc / lit(b.batch as f64)
}

pub fn dice_loss_grad<T: Float>(b: &PredictionBatch<'_, T>, eps: f64) -> (T, Vec<T>) {
    let eps: T = lit(eps);
    let two: T = lit(2.0);
    let nb: T = lit(b.batch as f64);
    let mut acc = T::zero();
    let mut grad = Vec::with_capacity(b.probs.len());
    for (p, y) in b.samples() {
        let (inter, sp, sy) = sums(p, y);
        let num = two * inter + eps;
        let den = sp + sy + eps;
        acc = acc + num / den;
        let den2 = den * den;
        for &yi in y {
            grad.push(-(two * yi * den - num) / den2 / nb);
        }
    }
    (T::one() - acc / nb, grad)
}

fn sums<T: Float>(p: &[T], y: &[T]) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut sy = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        inter = inter + a * b;
        sp = sp + a;
        sy = sy + b;
    }
    (inter, sp, sy)
}

/// BCE plus Dice with the default smoothing term.
pub fn bce_dice_loss<T: Float>(b: &PredictionBatch<'_, T>) -> T {
    bce_loss(b) + dice_loss(b, DICE_EPS)
}

pub fn bce_dice_loss_grad<T: Float>(b: &PredictionBatch<'_, T>) -> (T, Vec<T>) {
    let (lb, mut gb) = bce_loss_grad(b);
    let (ld, gd) = dice_loss_grad(b, DICE_EPS);
    for (a, d) in gb.iter_mut().zip(gd) {
        *a = *a + d;
    }
    (lb + ld, gb)
}

/// t-vMF similarity `(1 + cos) / (1 + κ (1 - cos)) - 1`.
///
/// Equals `cos` at `κ = 0` and 1 at `cos = 1` for every `κ`; larger `κ`
/// sharpens the penalty on misaligned directions.
pub fn tvmf_similarity<T: Float>(cos: T, kappa: T) -> T {
    (T::one() + cos) / (T::one() + kappa * (T::one() - cos)) - T::one()
}

/// `d φ / d cos`.
fn tvmf_similarity_slope<T: Float>(cos: T, kappa: T) -> T {
    let d = T::one() + kappa * (T::one() - cos);
    (T::one() + lit::<T>(2.0) * kappa) / (d * d)
}

/// Per-class sharpness for the t-vMF Dice loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaState {
    pub kappa: Vec<f64>,
    pub lambda: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
}

impl KappaState {
    pub const DEFAULT_LAMBDA: f64 = 32.0;
    pub const DEFAULT_MAX: f64 = 128.0;

    /// Every class starts at `kappa_min`.
    pub fn new(classes: usize, lambda: f64, kappa_min: f64, kappa_max: f64) -> Result<Self> {
        if !(lambda > 0.0) || !(kappa_min >= 0.0) || kappa_max < kappa_min {
            return Err(Error::config(format!(
                "invalid kappa settings: lambda {lambda}, bounds [{kappa_min}, {kappa_max}]"
            )));
        }
        Ok(KappaState {
            kappa: vec![kappa_min; classes],
            lambda,
            kappa_min,
            kappa_max,
        })
    }

    pub fn with_defaults(classes: usize) -> Self {
        Self::new(classes, Self::DEFAULT_LAMBDA, 0.0, Self::DEFAULT_MAX).expect("defaults are valid")
    }
}

/// `κ_c ← clamp(λ · DSC_c, κ_min, κ_max)`.
pub fn update_kappa(state: &KappaState, per_class_dice: &[f64]) -> Result<KappaState> {
    if per_class_dice.len() != state.kappa.len() {
        return Err(Error::contract(format!(
            "{} dice scores for {} classes",
            per_class_dice.len(),
            state.kappa.len()
        )));
    }
    let kappa = per_class_dice
        .iter()
        .map(|&d| (state.lambda * d.clamp(0.0, 1.0)).clamp(state.kappa_min, state.kappa_max))
        .collect();
    Ok(KappaState {
        kappa,
        ..state.clone()
    })
}

/// One class's flattened prediction and target maps.
#[derive(Clone, Copy, Debug)]
pub struct ClassMap<'a, T> {
    pub pred: &'a [T],
    pub target: &'a [T],
}

/// Mean over classes of `(1 - φ_κc(cos θ_c))²`. Classes with an empty target
/// are skipped; an empty prediction gives `cos = 0`.
pub fn tvmf_dice_loss<T: Float>(classes: &[ClassMap<'_, T>], kappa: &KappaState) -> Result<T> {
    tvmf_dice_loss_grad(classes, kappa).map(|(v, _)| v)
}

/// Value plus per-class gradients w.r.t. each class's prediction map.
pub fn tvmf_dice_loss_grad<T: Float>(classes: &[ClassMap<'_, T>], kappa: &KappaState) -> Result<(T, Vec<Vec<T>>)> {
    if classes.len() != kappa.kappa.len() {
        return Err(Error::contract(format!(
            "{} class maps for {} kappa values",
            classes.len(),
            kappa.kappa.len()
        )));
    }
    let eps: T = lit(TVMF_EPS);
    let two: T = lit(2.0);
    let mut used = 0usize;
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(classes.len());
    for (c, map) in classes.iter().enumerate() {
        if map.pred.len() != map.target.len() {
            return Err(Error::contract(format!("class {c}: prediction/target length mismatch")));
        }
        let (mut dot, mut pp, mut yy) = (T::zero(), T::zero(), T::zero());
        for (&p, &y) in map.pred.iter().zip(map.target) {
            dot = dot + p * y;
            pp = pp + p * p;
            yy = yy + y * y;
        }
        if yy <= T::zero() {
            grads.push(vec![T::zero(); map.pred.len()]);
            continue;
        }
        used += 1;
        let (np, ny) = (pp.sqrt(), yy.sqrt());
        let den = np * ny + eps;
        let cos = dot / den;
        let k: T = lit(kappa.kappa[c]);
        let phi = tvmf_similarity(cos, k);
        total = total + (T::one() - phi) * (T::one() - phi);
        // d loss_c / d cos; the 1/used factor is applied below
        let outer = -two * (T::one() - phi) * tvmf_similarity_slope(cos, k);
        let g = map
            .pred
            .iter()
            .zip(map.target)
            .map(|(&p, &y)| {
                let radial = if np > T::zero() { dot * ny * p / (np * den * den) } else { T::zero() };
                outer * (y / den - radial)
            })
            .collect();
        grads.push(g);
    }
    if used == 0 {
        return Ok((T::zero(), grads));
    }
    let inv = T::one() / lit(used as f64);
    for g in &mut grads {
        for v in g.iter_mut() {
            *v = *v * inv;
        }
    }
    Ok((total * inv, grads))
}

/// Binary segmentation as two classes: background `(1-ŷ, 1-y)` and
/// foreground `(ŷ, y)`, each flattened over the whole batch. Returns the loss
/// and its gradient w.r.t. `ŷ`.
pub fn tvmf_dice_loss_binary_grad<T: Float>(b: &PredictionBatch<'_, T>, kappa: &KappaState) -> Result<(T, Vec<T>)> {
    let bg_p: Vec<T> = b.probs.iter().map(|&p| T::one() - p).collect();
    let bg_y: Vec<T> = b.targets.iter().map(|&y| T::one() - y).collect();
    let maps = [
        ClassMap { pred: &bg_p, target: &bg_y },
        ClassMap {
            pred: b.probs,
            target: b.targets,
        },
    ];
    let (v, g) = tvmf_dice_loss_grad(&maps, kappa)?;
    let grad = g[1].iter().zip(&g[0]).map(|(&f, &bk)| f - bk).collect();
    Ok((v, grad))
}

pub fn tvmf_dice_loss_binary<T: Float>(b: &PredictionBatch<'_, T>, kappa: &KappaState) -> Result<T> {
    tvmf_dice_loss_binary_grad(b, kappa).map(|(v, _)| v)
}
