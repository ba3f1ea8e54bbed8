//! Evaluation: similarity-threshold calibration, attack success rate,
//! imperceptibility metrics (MSE / SSIM), attribute prediction difference,
//! and grayscale visual exports (PGM).
//!
//! All metrics are pure functions with ascending-index reductions, so every
//! reported number is bitwise reproducible.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::Branch;
use crate::models::{FrModel, ModelError, SurrogateModel, TargetModel};
use crate::synthface::Dataset;
use crate::synthface::PairSet;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("score list is empty")]
    EmptyScores,
    #[error("pair list is empty")]
    EmptyPairs,
    #[error("target FPR {0} outside (0, 1)")]
    BadTargetFpr(f64),
    #[error("images have different shapes: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("image must be 2-D, got shape {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("attribute index {index} out of range for {n_attrs} attributes")]
    AttributeOutOfRange { index: usize, n_attrs: usize },
    #[error("malformed PGM: {0}")]
    BadPgm(String),
}

// --- threshold calibration --------------------------------------------------

/// A calibrated decision threshold for one FR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub model_id: String,
    pub tau: f64,
    pub target_fpr: f64,
    #[serde(rename = "n")]
    pub n_impostor_pairs: usize,
    /// Fraction of calibration impostor scores `>= tau`; at most
    /// `target_fpr + 1/n`.
    pub realized_fpr: f64,
}

/// Picks the smallest observed score `s` whose impostor pass fraction
/// (scores `>= s`, the success rule) is at most `target_fpr`. Ties are
/// resolved by descending sort and counting, so the result is deterministic.
/// If even the maximum score passes too often, returns the next float above
/// the maximum (no calibration impostor passes).
pub fn calibrate_scores(scores: &[f64], target_fpr: f64) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(EvalError::BadTargetFpr(target_fpr));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("scores must not be NaN"));
    let n = sorted.len() as f64;
    // Walking the descending order, `i + 1` scores are >= sorted[i] whenever
    // sorted[i] is the last of its tie group. The best (smallest) threshold
    // is the deepest such score still within the FPR budget.
    let mut tau = None;
    for i in 0..sorted.len() {
        let last_of_group = i + 1 == sorted.len() || sorted[i + 1] != sorted[i];
        if last_of_group && (i + 1) as f64 / n <= target_fpr {
            tau = Some(sorted[i]);
        }
    }
    Ok(tau.unwrap_or_else(|| sorted[0].next_up()))
}

/// Fraction of scores `>= tau` (the impersonation success rule).
pub fn asr(scores: &[f64], tau: f64) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let hits = scores.iter().filter(|&&s| s >= tau).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Cosine similarity of a model's embeddings for each pair in the set.
pub fn pair_scores(
    model: &dyn FrModel,
    dataset: &Dataset,
    pairs: &PairSet,
) -> Result<Vec<f64>, EvalError> {
    let tape = Tape::new();
    let mut out = Vec::with_capacity(pairs.pairs.len());
    for p in &pairs.pairs {
        let a = flat_image(&dataset.samples[p.attacker].image)?;
        let v = flat_image(&dataset.samples[p.victim].image)?;
        let ea = model.embed(&tape, &a)?;
        let ev = model.embed(&tape, &v)?;
        out.push(tape.cosine_similarity(&ea, &ev)?.item());
    }
    Ok(out)
}

/// Calibrates `tau` for a model from impostor pairs so the false-positive
/// rate on that set is at most `target_fpr` (within `1/n`).
pub fn calibrate_threshold(
    model: &dyn FrModel,
    dataset: &Dataset,
    impostor_pairs: &PairSet,
    target_fpr: f64,
) -> Result<ThresholdCalibration, EvalError> {
    let scores = pair_scores(model, dataset, impostor_pairs)?;
    let tau = calibrate_scores(&scores, target_fpr)?;
    let realized_fpr = asr(&scores, tau)?;
    Ok(ThresholdCalibration {
        model_id: model.model_id().to_string(),
        tau,
        target_fpr,
        n_impostor_pairs: scores.len(),
        realized_fpr,
    })
}

// --- image metrics ----------------------------------------------------------

fn same_shape(x: &Tensor, y: &Tensor) -> Result<(), EvalError> {
    if x.shape() != y.shape() {
        return Err(EvalError::ShapeMismatch {
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

fn flat_image(t: &Tensor) -> Result<Tensor, EvalError> {
    Ok(t.with_shape(vec![t.len()])?)
}

/// Mean squared error on the 0–255 gray scale:
/// `mean((255 x - 255 y)^2)`.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64, EvalError> {
    same_shape(x, y)?;
    let n = x.len();
    let mut acc = 0.0;
    for (xv, yv) in x.data().iter().zip(y.data().iter()) {
        let d = 255.0 * xv - 255.0 * yv;
        acc += d * d;
    }
    Ok(acc / n as f64)
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 1e-4; // (0.01)^2 on the [0,1] dynamic range
const SSIM_C2: f64 = 9e-4; // (0.03)^2

/// Mean structural similarity over uniform 8x8 windows at stride 1.
/// Symmetric, at most 1, and exactly 1 for identical images.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64, EvalError> {
    same_shape(x, y)?;
    if x.rank() != 2 {
        return Err(EvalError::NotAnImage(x.shape().to_vec()));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::ImageTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let xd = x.data();
    let yd = y.data();
    let npix = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for i0 in 0..=h - SSIM_WINDOW {
        for j0 in 0..=w - SSIM_WINDOW {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for i in i0..i0 + SSIM_WINDOW {
                for j in j0..j0 + SSIM_WINDOW {
                    sx += xd[i * w + j];
                    sy += yd[i * w + j];
                }
            }
            let mx = sx / npix;
            let my = sy / npix;
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut cov = 0.0;
            for i in i0..i0 + SSIM_WINDOW {
                for j in j0..j0 + SSIM_WINDOW {
                    let dx = xd[i * w + j] - mx;
                    let dy = yd[i * w + j] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
            }
            vx /= npix;
            vy /= npix;
            cov /= npix;
            // identical windows make numerator and denominator bitwise
            // equal, so ssim(x, x) is exactly 1
            let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

// --- attribute prediction difference ----------------------------------------

/// L1 change of attribute scores over a group of attribute indices, summed
/// over score pairs: `sum_s sum_{j in group} |after[j] - before[j]|`.
pub fn pred_diff_scores(
    score_pairs: &[(Vec<f64>, Vec<f64>)],
    group: &[usize],
) -> Result<f64, EvalError> {
    if score_pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let mut total = 0.0;
    for (after, before) in score_pairs {
        debug_assert_eq!(after.len(), before.len());
        for &j in group {
            if j >= after.len() {
                return Err(EvalError::AttributeOutOfRange {
                    index: j,
                    n_attrs: after.len(),
                });
            }
            total += (after[j] - before[j]).abs();
        }
    }
    Ok(total)
}

/// [`pred_diff_scores`] with scores produced by an attribute model: for each
/// `(x_adv, x)` pair, the L1 change of the model's predicted attribute
/// probabilities, restricted to `group`.
pub fn pred_diff(
    ar_target: &TargetModel,
    pairs: &[(Tensor, Tensor)],
    group: &[usize],
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let tape = Tape::new();
    let mut scored = Vec::with_capacity(pairs.len());
    for (x_adv, x) in pairs {
        let after = ar_target.ar_predict(&tape, &flat_image(x_adv)?)?.to_vec();
        let before = ar_target.ar_predict(&tape, &flat_image(x)?)?.to_vec();
        scored.push((after, before));
    }
    pred_diff_scores(&scored, group)
}

// --- visual exports ---------------------------------------------------------

/// Maps a perturbation to a visibility image: values are scaled by 5,
/// magnitudes below `xi / 3` are truncated to black, and the rest map to
/// `round(255 * min(|5 eps|, 1))`.
pub fn render_perturbation(eps: &Tensor, xi: f64) -> Result<Vec<u8>, EvalError> {
    if eps.rank() != 2 {
        return Err(EvalError::NotAnImage(eps.shape().to_vec()));
    }
    let cutoff = xi / 3.0;
    Ok(eps
        .data()
        .iter()
        .map(|&e| {
            let v = (5.0 * e).abs();
            if v < cutoff {
                0u8
            } else {
                let scaled = 255.0 * if v > 1.0 { 1.0 } else { v };
                scaled.round() as u8
            }
        })
        .collect())
}

/// Absolute input gradient of the branch adversarial loss at `x_adv`,
/// max-normalised to `[0,1]` (all zeros if the gradient vanishes).
pub fn saliency_map(
    model: &SurrogateModel,
    x_adv: &Tensor,
    x_v: &Tensor,
    branch: Branch,
) -> Result<Tensor, EvalError> {
    let tape = Tape::new();
    let leaf = tape.leaf(&flat_image(x_adv)?);
    let loss = crate::attack::adv_loss(model, &tape, branch, &leaf, &flat_image(x_v)?)?;
    let grads = tape.backward(&loss)?;
    let g = grads.wrt(&leaf).expect("input is on the tape");
    let mut mags: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
    let mut max = 0.0f64;
    for &m in &mags {
        if m > max {
            max = m;
        }
    }
    if max > 0.0 {
        for m in &mut mags {
            *m /= max;
        }
    }
    Ok(Tensor::from_vec(x_adv.shape().to_vec(), mags)?)
}

/// Quantises a `[0,1]` float map to bytes for PGM export.
pub fn to_gray_bytes(map: &Tensor) -> Vec<u8> {
    map.data()
        .iter()
        .map(|&v| {
            let c = if v < 0.0 {
                0.0
            } else if v > 1.0 {
                1.0
            } else {
                v
            };
            (255.0 * c).round() as u8
        })
        .collect()
}

/// Serialises a binary (P5) PGM image.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, EvalError> {
    if pixels.len() != width * height {
        return Err(EvalError::BadPgm(format!(
            "{} pixels for {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(20 + pixels.len());
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), EvalError> {
    std::fs::write(path, pgm_bytes(width, height, pixels)?)?;
    Ok(())
}

/// Parses a binary (P5) PGM produced by [`pgm_bytes`] (single whitespace
/// separators, maxval 255). Returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), EvalError> {
    let bad = |m: &str| EvalError::BadPgm(m.to_string());
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<Vec<u8>, EvalError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let tok = bytes[start..pos].to_vec();
        // exactly one whitespace byte separates header fields from the raster
        pos += 1;
        Ok(tok)
    };
    if token(bytes)? != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let parse_num = |tok: Vec<u8>| -> Result<usize, EvalError> {
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad("non-numeric header field"))
    };
    let width = parse_num(token(bytes)?)?;
    let height = parse_num(token(bytes)?)?;
    let maxval = parse_num(token(bytes)?)?;
    if maxval != 255 {
        return Err(bad("unsupported maxval"));
    }
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| bad("dimension overflow"))?;
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(EvalError::BadPgm(format!(
            "raster has {} bytes, expected {expected}",
            raster.len()
        )));
    }
    Ok((width, height, raster.to_vec()))
}
