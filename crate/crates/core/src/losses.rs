//! Training losses over per-pixel class probabilities.
//!
//! Every loss sums over the evaluable pixels only (labels other than
//! [`OUTSIDE`]). A class absent from both prediction and target contributes a
//! perfect score: Tversky index 1, per-class loss term 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{NUM_CLASSES, OUTSIDE};

/// Log clamp for the weighted cross-entropy.
pub const CCE_EPSILON: f64 = 1e-7;

/// Per-pixel class probabilities of an (X, Y) image, `NUM_CLASSES` values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbImage {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
}

impl ClassProbImage {
    pub fn new(width: usize, height: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != width * height * NUM_CLASSES {
            return Err(Error::shape(format!(
                "{}x{} probability image needs {} values, got {}",
                width,
                height,
                width * height * NUM_CLASSES,
                probs.len()
            )));
        }
        Ok(ClassProbImage { width, height, probs })
    }

    /// Hard one-hot image of a label map (outside pixels get all zeros).
    pub fn one_hot(labels: &LabelImage) -> Self {
        let mut probs = vec![0.0; labels.labels.len() * NUM_CLASSES];
        for (i, &l) in labels.labels.iter().enumerate() {
            if l != OUTSIDE {
                probs[i * NUM_CLASSES + l as usize] = 1.0;
            }
        }
        ClassProbImage {
            width: labels.width,
            height: labels.height,
            probs,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Largest deviation of a pixel's probability sum from 1 over evaluable pixels.
    pub fn max_sum_error(&self, labels: &LabelImage) -> f64 {
        self.probs
            .chunks(NUM_CLASSES)
            .zip(&labels.labels)
            .filter(|(_, &l)| l != OUTSIDE)
            .map(|(p, _)| (p.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Ground-truth class index per pixel; [`OUTSIDE`] excludes a pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} label image needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES && l != OUTSIDE) {
            return Err(Error::shape(format!("invalid class label {bad}")));
        }
        Ok(LabelImage { width, height, labels })
    }

    pub fn evaluable(&self) -> usize {
        self.labels.iter().filter(|&&l| l != OUTSIDE).count()
    }

    #[inline]
    fn y(&self, i: usize, c: usize) -> Option<f64> {
        match self.labels[i] {
            OUTSIDE => None,
            l => Some(if l as usize == c { 1.0 } else { 0.0 }),
        }
    }
}

/// Nonnegative per-pixel, per-class weights `w_{i,c}`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub weights: Vec<f64>,
}

impl WeightMap {
    pub fn uniform(pixels: usize) -> Self {
        WeightMap {
            weights: vec![1.0; pixels * NUM_CLASSES],
        }
    }

    /// The same per-class weights at every pixel, scaled by `multiplier`.
    pub fn from_class_weights(pixels: usize, class_weights: [f64; NUM_CLASSES], multiplier: f64) -> Self {
        WeightMap {
            weights: (0..pixels)
                .flat_map(|_| class_weights.map(|w| w * multiplier))
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        WeightMap {
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    fn validate(&self, pixels: usize) -> Result<()> {
        if self.weights.len() != pixels * NUM_CLASSES {
            return Err(Error::shape(format!(
                "weight map has {} entries for {pixels} pixels",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    FocalTversky { alpha: f64, beta: f64, gamma: f64 },
    SoftDice,
    Dice,
    WeightedCce,
}

impl LossKind {
    pub fn focal_tversky_default() -> Self {
        LossKind::FocalTversky {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::FocalTversky { .. } => "ftl",
            LossKind::SoftDice => "sdcl",
            LossKind::Dice => "dcl",
            LossKind::WeightedCce => "wcc",
        }
    }
}

fn check(x: &ClassProbImage, y: &LabelImage) -> Result<()> {
    if x.width != y.width || x.height != y.height {
        return Err(Error::shape(format!(
            "prediction {}x{} vs target {}x{}",
            x.width, x.height, y.width, y.height
        )));
    }
    Ok(())
}

/// Sums over evaluable pixels of one class: (Σxy, Σx, Σy, Σx²).
fn class_sums(x: &ClassProbImage, y: &LabelImage, c: usize) -> (f64, f64, f64, f64) {
    let mut s = (0.0, 0.0, 0.0, 0.0);
    for i in 0..x.pixels() {
        if let Some(yi) = y.y(i, c) {
            let xi = x.probs[i * NUM_CLASSES + c];
            s.0 += xi * yi;
            s.1 += xi;
            s.2 += yi;
            s.3 += xi * xi;
        }
    }
    s
}

fn tversky_parts(x: &ClassProbImage, y: &LabelImage, c: usize, alpha: f64, beta: f64) -> (f64, f64) {
    let (xy, sx, sy, _) = class_sums(x, y, c);
    // Σ(1−x)y = Σy − Σxy ; Σx(1−y) = Σx − Σxy
    let denom = xy + alpha * (sy - xy) + beta * (sx - xy);
    (xy, denom)
}

/// Tversky index of class `c`.
pub fn tversky_index(x: &ClassProbImage, y: &LabelImage, c: usize, alpha: f64, beta: f64) -> Result<f64> {
    check(x, y)?;
    let (num, denom) = tversky_parts(x, y, c, alpha, beta);
    Ok(if denom == 0.0 { 1.0 } else { num / denom })
}

pub fn focal_tversky_loss(x: &ClassProbImage, y: &LabelImage, alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    loss_and_grad(&LossKind::FocalTversky { alpha, beta, gamma }, x, y, None).map(|(v, _)| v)
}

pub fn soft_dice_loss(x: &ClassProbImage, y: &LabelImage) -> Result<f64> {
    loss_and_grad(&LossKind::SoftDice, x, y, None).map(|(v, _)| v)
}

pub fn dice_loss(x: &ClassProbImage, y: &LabelImage) -> Result<f64> {
    loss_and_grad(&LossKind::Dice, x, y, None).map(|(v, _)| v)
}

/// Weighted categorical cross-entropy, `−Σ_c Σ_i y log x · w y` (nonnegative).
pub fn weighted_cce(x: &ClassProbImage, y: &LabelImage, w: &WeightMap) -> Result<f64> {
    loss_and_grad(&LossKind::WeightedCce, x, y, Some(w)).map(|(v, _)| v)
}

/// Loss value and its gradient with respect to every probability.
/// `weights` is required by the weighted cross-entropy and ignored otherwise.
pub fn loss_and_grad(
    kind: &LossKind,
    x: &ClassProbImage,
    y: &LabelImage,
    weights: Option<&WeightMap>,
) -> Result<(f64, Vec<f64>)> {
    check(x, y)?;
    let n = x.pixels();
    let mut grad = vec![0.0; x.probs.len()];
    if x.probs.iter().any(|v| !v.is_finite()) {
        return Ok((f64::NAN, grad));
    }
    let mut value = 0.0;
    match *kind {
        LossKind::FocalTversky { alpha, beta, gamma } => {
            if !(gamma >= 1.0) {
                return Err(Error::config(format!("focal Tversky gamma {gamma} < 1")));
            }
            if alpha < 0.0 || beta < 0.0 {
                return Err(Error::config("Tversky alpha and beta must be nonnegative"));
            }
            let p = 1.0 / gamma;
            for c in 0..NUM_CLASSES {
                let (num, denom) = tversky_parts(x, y, c, alpha, beta);
                if denom == 0.0 {
                    continue;
                }
                let ti = num / denom;
                let miss = (1.0 - ti).max(0.0);
                value += miss.powf(p);
                if miss <= 0.0 {
                    continue;
                }
                let dloss_dti = -p * miss.powf(p - 1.0);
                for i in 0..n {
                    if let Some(yi) = y.y(i, c) {
                        let dden = yi - alpha * yi + beta * (1.0 - yi);
                        let dti = (yi * denom - num * dden) / (denom * denom);
                        grad[i * NUM_CLASSES + c] = dloss_dti * dti;
                    }
                }
            }
        }
        LossKind::SoftDice | LossKind::Dice => {
            let squared = matches!(kind, LossKind::SoftDice);
            for c in 0..NUM_CLASSES {
                let (xy, sx, sy, sxx) = class_sums(x, y, c);
                // y is binary, so Σy² = Σy.
                let s = if squared { sxx + sy } else { sx + sy };
                if s == 0.0 {
                    continue;
                }
                value += 1.0 - 2.0 * xy / s;
                for i in 0..n {
                    if let Some(yi) = y.y(i, c) {
                        let ds = if squared {
                            2.0 * x.probs[i * NUM_CLASSES + c]
                        } else {
                            1.0
                        };
                        grad[i * NUM_CLASSES + c] = -2.0 * (yi * s - xy * ds) / (s * s);
                    }
                }
            }
        }
        LossKind::WeightedCce => {
            let w = weights.ok_or_else(|| Error::config("weighted cross-entropy needs a weight map"))?;
            w.validate(n)?;
            for i in 0..n {
                let l = y.labels[i];
                if l == OUTSIDE {
                    continue;
                }
                let k = i * NUM_CLASSES + l as usize;
                let xi = x.probs[k];
                let wi = w.weights[k];
                value -= wi * xi.max(CCE_EPSILON).ln();
                if xi > CCE_EPSILON {
                    grad[k] = -wi / xi;
                }
            }
        }
    }
    Ok((value, grad))
}
