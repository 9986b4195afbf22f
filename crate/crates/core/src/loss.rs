//! Dice-family overlap scores and losses.
//!
//! `p` tensors hold per-voxel class probabilities and `g` tensors hold
//! one-hot ground truth, both channels-last. The smoothed variants add
//! [`SMOOTH`] to the numerator and the denominator of the overlap ratio so
//! that empty classes give a finite value.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SMOOTH: f64 = 1e-7;

/// Largest tolerated deviation of a per-voxel channel sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Fixed per-class weights of the categorical Dice loss, ordered
/// background, necrosis, edema, enhancing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights(pub [f64; 4]);

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights([0.1, 1.0, 1.0, 1.0])
    }
}

impl ClassWeights {
    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "class weights must be finite and non-negative, got {weights:?}"
            )));
        }
        Ok(ClassWeights(weights))
    }
}

/// Soft Dice coefficient `2Σpg / (Σp² + Σg²)`, smoothed.
pub fn soft_dice(p: &Tensor, g: &Tensor) -> Result<f64> {
    soft_dice_smoothed(p, g, SMOOTH)
}

pub fn soft_dice_smoothed(p: &Tensor, g: &Tensor, smooth: f64) -> Result<f64> {
    let (inter, denom) = dice_sums(p, g)?;
    Ok((2.0 * inter + smooth) / (denom + smooth))
}

fn dice_sums(p: &Tensor, g: &Tensor) -> Result<(f64, f64)> {
    p.expect_same_shape(g)?;
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (&a, &b) in p.data().iter().zip(g.data()) {
        inter += a * b;
        denom += a * a + b * b;
    }
    Ok((inter, denom))
}

/// Analytic partial derivative of the unsmoothed soft Dice with respect to
/// voxel `j` of `p`:
/// `2 [g_j (Σp² + Σg²) − 2 p_j Σpg] / (Σp² + Σg²)²`.
pub fn dice_grad(p: &Tensor, g: &Tensor, j: usize) -> Result<f64> {
    let (inter, denom) = dice_sums(p, g)?;
    if j >= p.len() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: p.len(),
        });
    }
    let (pj, gj) = (p.data()[j], g.data()[j]);
    Ok(2.0 * (gj * denom - 2.0 * pj * inter) / (denom * denom))
}

/// Gradient of [`soft_dice_smoothed`] with respect to every voxel of `p`.
/// With `smooth == 0` each entry equals [`dice_grad`].
pub fn soft_dice_grad(p: &Tensor, g: &Tensor, smooth: f64) -> Result<Tensor> {
    let (inter, denom) = dice_sums(p, g)?;
    let num = 2.0 * inter + smooth;
    let den = denom + smooth;
    p.zip_map(g, |pj, gj| (2.0 * gj * den - 2.0 * pj * num) / (den * den))
}

fn check_normalized(p: &Tensor) -> Result<()> {
    let c = p.channels();
    let worst = p
        .data()
        .chunks(c)
        .map(|v| (v.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    if worst > NORMALIZATION_TOLERANCE || worst.is_nan() {
        return Err(Error::NotNormalized(worst));
    }
    Ok(())
}

/// Weighted intersection `Σ_l w_l Σ_n p g` and weighted total
/// `Σ_l w_l Σ_n (p + g)`.
fn weighted_sums(p: &Tensor, g: &Tensor, weights: &[f64]) -> (f64, f64) {
    let c = weights.len();
    let mut inter = 0.0;
    let mut total = 0.0;
    for (pv, gv) in p.data().chunks(c).zip(g.data().chunks(c)) {
        for l in 0..c {
            inter += weights[l] * pv[l] * gv[l];
            total += weights[l] * (pv[l] + gv[l]);
        }
    }
    (inter, total)
}

fn check_classes(p: &Tensor, g: &Tensor, classes: usize) -> Result<()> {
    p.expect_same_shape(g)?;
    if p.channels() != classes {
        return Err(Error::shape(format!(
            "expected {classes} class channels, got {}",
            p.channels()
        )));
    }
    Ok(())
}

/// Categorical Dice loss
/// `−2 Σ_l w_l Σ_n p g / Σ_l w_l Σ_n (p + g)`, smoothed; in `[−1, 0]`.
pub fn categorical_dice_loss(p: &Tensor, g: &Tensor, weights: &ClassWeights) -> Result<f64> {
    categorical_dice_loss_smoothed(p, g, weights, SMOOTH)
}

pub fn categorical_dice_loss_smoothed(
    p: &Tensor,
    g: &Tensor,
    weights: &ClassWeights,
    smooth: f64,
) -> Result<f64> {
    check_classes(p, g, 4)?;
    check_normalized(p)?;
    let (inter, total) = weighted_sums(p, g, &weights.0);
    Ok(-(2.0 * inter + smooth) / (total + smooth))
}

/// Gradient of [`categorical_dice_loss_smoothed`] with respect to `p`.
pub fn categorical_dice_grad(
    p: &Tensor,
    g: &Tensor,
    weights: &ClassWeights,
    smooth: f64,
) -> Result<Tensor> {
    check_classes(p, g, 4)?;
    let (inter, total) = weighted_sums(p, g, &weights.0);
    let num = 2.0 * inter + smooth;
    let den = total + smooth;
    let mut grad = g.clone();
    for gv in grad.data_mut().chunks_mut(4) {
        for l in 0..4 {
            let w = weights.0[l];
            gv[l] = -(2.0 * w * gv[l] * den - num * w) / (den * den);
        }
    }
    Ok(grad)
}

/// Per-class weights `1 / (Σ_n g_ln)²`; classes absent from `g` get 0.
pub fn generalized_dice_weights(g: &Tensor) -> Vec<f64> {
    let c = g.channels();
    let mut volumes = vec![0.0; c];
    for gv in g.data().chunks(c) {
        volumes.iter_mut().zip(gv).for_each(|(v, x)| *v += x);
    }
    volumes
        .into_iter()
        .map(|v| if v > 0.0 { 1.0 / (v * v) } else { 0.0 })
        .collect()
}

/// Generalized Dice loss with inverse squared volume weights; in `[0, 1]`.
pub fn generalized_dice_loss(p: &Tensor, g: &Tensor) -> Result<f64> {
    p.expect_same_shape(g)?;
    let weights = generalized_dice_weights(g);
    let (inter, total) = weighted_sums(p, g, &weights);
    Ok(1.0 - (2.0 * inter + SMOOTH) / (total + SMOOTH))
}
