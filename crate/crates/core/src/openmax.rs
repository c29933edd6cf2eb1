//! OpenMax calibration and scoring with multi-center classes.
//!
//! Calibration clusters each known class's embeddings into subtypes, measures
//! a composite distance of every embedding to its own subtypes and the other
//! classes' subtypes, fits a Weibull to the upper tail of those distances and
//! records a quantile threshold. Scoring revises the activation vector with
//! the Weibull CDF, moves the removed mass to an unknown class, and (when
//! the abnormality flag is set) discounts known classes whose distance
//! exceeds its threshold.
//!
//! Probability vectors produced here are in `[unknown, AD, CN]` order.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneOutput;
use crate::clustering::{composite_distance, minibatch_kmeans, unit_normalize, CenterSet, KMeansConfig};
use crate::error::{Error, Result};
use crate::evt::{default_tail_size, fit_high, WeibullTailModel};
use crate::nn::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxConfig {
    /// Subtype centers per class.
    pub centers_per_class: usize,
    /// Threshold quantile per class (a single value is broadcast).
    pub quantile: f64,
    /// `None` uses [`default_tail_size`] of each class's sample count.
    pub tail_size: Option<usize>,
    /// Number of top-ranked classes whose activations are revised.
    pub alpha: usize,
    /// Apply the threshold-based abnormality correction.
    pub flag: bool,
    /// Use the classic `(alpha - i + 1) / alpha` rank weight instead of
    /// `(alpha - i) / alpha`.
    pub classic_rank_weight: bool,
    /// Scale embeddings to unit norm before clustering and scoring.
    pub normalize: bool,
    pub kmeans_batch: usize,
    pub kmeans_epochs: usize,
    pub seed: u64,
}

impl Default for OpenMaxConfig {
    fn default() -> Self {
        OpenMaxConfig {
            centers_per_class: 3,
            quantile: 0.95,
            tail_size: None,
            alpha: 2,
            flag: true,
            classic_rank_weight: false,
            normalize: false,
            kmeans_batch: 256,
            kmeans_epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxCalibration {
    pub centers: Vec<CenterSet>,
    pub models: Vec<WeibullTailModel>,
    pub thresholds: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub alpha: usize,
    pub flag: bool,
    pub classic_rank_weight: bool,
    pub normalize: bool,
    /// Union of every other class's centers, per class.
    #[serde(skip)]
    others: Vec<CenterSet>,
}

/// Empirical quantile: the smallest sample with at least `q * n` samples at
/// or below it.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn others_for(centers: &[CenterSet]) -> Result<Vec<CenterSet>> {
    (0..centers.len())
        .map(|i| CenterSet::merged(centers.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| c)))
        .collect()
}

impl OpenMaxCalibration {
    /// Builds a calibration from explicit parts.
    pub fn from_parts(
        centers: Vec<CenterSet>,
        models: Vec<WeibullTailModel>,
        thresholds: Vec<f64>,
        quantiles: Vec<f64>,
        alpha: usize,
        flag: bool,
    ) -> Result<Self> {
        let l = centers.len();
        if l < 2 || models.len() != l || thresholds.len() != l || quantiles.len() != l {
            return Err(Error::Precondition("calibration needs one entry per known class (at least two)".into()));
        }
        if alpha == 0 || alpha > l {
            return Err(Error::Precondition(format!("alpha {alpha} must lie in [1, {l}]")));
        }
        let others = others_for(&centers)?;
        Ok(OpenMaxCalibration {
            centers,
            models,
            thresholds,
            quantiles,
            alpha,
            flag,
            classic_rank_weight: false,
            normalize: false,
            others,
        })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    fn prepare(&self, x: &[f64]) -> Vec<f64> {
        if self.normalize {
            unit_normalize(x)
        } else {
            x.to_vec()
        }
    }

    /// Composite distance of an embedding to every known class.
    pub fn distances(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let x = self.prepare(embedding);
        (0..self.classes())
            .map(|i| composite_distance(&x, &self.centers[i], &self.others[i]))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut cal: OpenMaxCalibration = serde_json::from_str(s)?;
        cal.others = others_for(&cal.centers)?;
        Ok(cal)
    }
}

/// Fits per-class centers, Weibull tail models and thresholds from the
/// embeddings of correctly classified training samples, grouped by class.
pub fn calibrate(per_class: &[Vec<Vec<f64>>], cfg: &OpenMaxConfig) -> Result<OpenMaxCalibration> {
    let l = per_class.len();
    if l < 2 {
        return Err(Error::Precondition("calibration needs at least two known classes".into()));
    }
    let prepared: Vec<Vec<Vec<f64>>> = per_class
        .iter()
        .map(|xs| xs.iter().map(|x| if cfg.normalize { unit_normalize(x) } else { x.clone() }).collect())
        .collect();
    let mut centers = Vec::with_capacity(l);
    for (i, xs) in prepared.iter().enumerate() {
        let tail = cfg.tail_size.unwrap_or_else(|| default_tail_size(xs.len()));
        let needed = cfg.centers_per_class.max(tail).max(2);
        if xs.len() < needed {
            return Err(Error::TooFewSamples { class: i, found: xs.len(), needed });
        }
        let km = KMeansConfig {
            k: cfg.centers_per_class,
            batch: cfg.kmeans_batch,
            epochs: cfg.kmeans_epochs,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        centers.push(minibatch_kmeans(xs, &km)?);
    }
    let others = others_for(&centers)?;
    let mut models = Vec::with_capacity(l);
    let mut thresholds = Vec::with_capacity(l);
    for (i, xs) in prepared.iter().enumerate() {
        let dists: Vec<f64> = xs
            .iter()
            .map(|x| composite_distance(x, &centers[i], &others[i]))
            .collect::<Result<_>>()?;
        let tail = cfg.tail_size.unwrap_or_else(|| default_tail_size(xs.len()));
        models.push(fit_high(&dists, tail)?);
        thresholds.push(empirical_quantile(&dists, cfg.quantile));
    }
    let alpha = cfg.alpha.clamp(1, l);
    Ok(OpenMaxCalibration {
        centers,
        models,
        thresholds,
        quantiles: vec![cfg.quantile; l],
        alpha,
        flag: cfg.flag,
        classic_rank_weight: cfg.classic_rank_weight,
        normalize: cfg.normalize,
        others,
    })
}

/// Inputs of the scoring step once distances and tail scores are known.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringInputs<'a> {
    pub activation: &'a [f64],
    pub distances: &'a [f64],
    pub w_scores: &'a [f64],
    pub thresholds: &'a [f64],
    pub alpha: usize,
    pub flag: bool,
    pub classic_rank_weight: bool,
}

/// Classes ordered by descending activation; ties keep index order.
pub fn rank_classes(activation: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..activation.len()).collect();
    idx.sort_by(|a, b| activation[*b].total_cmp(&activation[*a]).then(a.cmp(b)));
    idx
}

/// The revision and probability step, given per-class distances and tail
/// scores. Returns `[unknown, class_1, .., class_L]`.
pub fn score(inp: &ScoringInputs<'_>) -> Vec<f64> {
    let l = inp.activation.len();
    let alpha = inp.alpha.clamp(1, l);
    let mut omega = vec![1.0; l];
    for (r, &c) in rank_classes(inp.activation).iter().take(alpha).enumerate() {
        let rank = r + 1;
        let weight = if inp.classic_rank_weight {
            (alpha - rank + 1) as f64 / alpha as f64
        } else {
            (alpha - rank) as f64 / alpha as f64
        };
        omega[c] = 1.0 - weight * inp.w_scores[c];
    }
    let mut revised = Vec::with_capacity(l + 1);
    let unknown: f64 = inp.activation.iter().zip(&omega).map(|(v, w)| v * (1.0 - w)).sum();
    revised.push(unknown);
    revised.extend(inp.activation.iter().zip(&omega).map(|(v, w)| v * w));
    let mut p = softmax(&revised);
    if inp.flag {
        for j in 0..l {
            let thr = inp.thresholds[j];
            let diff = inp.distances[j] - thr;
            let abnormal = if diff <= 0.0 {
                0.0
            } else if thr > 0.0 {
                (diff / thr).min(1.0)
            } else {
                1.0
            };
            p[j + 1] *= 1.0 - abnormal;
        }
        let known: f64 = p[1..].iter().sum();
        p[0] = (1.0 - known).max(0.0);
    }
    p
}

/// Open-set probabilities for one backbone output, `[unknown, AD, CN]`.
pub fn predict(cal: &OpenMaxCalibration, out: &BackboneOutput) -> Result<Vec<f64>> {
    if out.activation.len() != cal.classes() {
        return Err(Error::DimensionMismatch { expected: cal.classes(), found: out.activation.len() });
    }
    let distances = cal.distances(&out.embedding)?;
    let w_scores: Vec<f64> = cal.models.iter().zip(&distances).map(|(m, d)| m.w_score(*d)).collect();
    Ok(score(&ScoringInputs {
        activation: &out.activation,
        distances: &distances,
        w_scores: &w_scores,
        thresholds: &cal.thresholds,
        alpha: cal.alpha,
        flag: cal.flag,
        classic_rank_weight: cal.classic_rank_weight,
    }))
}

/// Known-class entries of an open-set vector, renormalized to sum to one
/// (uniform when no known mass remains).
pub fn known_renormalized(openmax: &[f64]) -> Vec<f64> {
    let known = &openmax[1..];
    let s: f64 = known.iter().sum();
    if s > 0.0 {
        known.iter().map(|p| p / s).collect()
    } else {
        vec![1.0 / known.len() as f64; known.len()]
    }
}
