//! The class-balanced similarity loss and its analytic gradient.
//!
//! ```text
//! L = -1/4 avg_{fg-fg} log S - 1/4 avg_{bg-bg} log S - 1/2 avg_{fg-bg} log(1 - S)
//! ```
//!
//! An empty pair set contributes zero. Log arguments are clamped below at
//! [`LOG_FLOOR`]; a clamped term has zero gradient.
//!
//! Each unordered pair is counted once. Because every term is an average,
//! listing each pair in both directions leaves the loss and gradient unchanged.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labeling::FeatureMap;
use crate::simhead::params::features_f64;
use crate::simhead::{Pair, PairSet, SimHeadParams, SimilarityField};

pub const LOG_FLOOR: f64 = 1e-12;

const W_FG_FG: f64 = 0.25;
const W_BG_BG: f64 = 0.25;
const W_FG_BG: f64 = 0.5;

/// `-log(max(s, floor))`.
#[inline]
fn neg_log(s: f64) -> f64 {
    -s.max(LOG_FLOOR).ln()
}

/// Loss evaluated on precomputed similarities.
pub fn similarity_loss(s: &SimilarityField, pairs: &PairSet) -> Result<f64> {
    let lookup = |p: &Pair| -> Result<f64> {
        s.get(p.i as usize, p.offset as usize)
            .map(|v| v as f64)
            .ok_or_else(|| Error::InvalidTensor(format!("pair ({}, {}) references an absent similarity", p.i, p.j)))
    };
    let avg = |set: &[Pair], f: &dyn Fn(f64) -> f64| -> Result<f64> {
        if set.is_empty() {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for p in set {
            acc += f(lookup(p)?);
        }
        Ok(acc / set.len() as f64)
    };
    Ok(W_FG_FG * avg(&pairs.fg_fg, &neg_log)?
        + W_BG_BG * avg(&pairs.bg_bg, &neg_log)?
        + W_FG_BG * avg(&pairs.fg_bg, &|s| neg_log(1.0 - s))?)
}

/// Per-term loss values, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub fg_fg: f64,
    pub bg_bg: f64,
    pub fg_bg: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        W_FG_FG * self.fg_fg + W_BG_BG * self.bg_bg + W_FG_BG * self.fg_bg
    }
}

#[inline]
fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scatters `coef * sign(a_i - a_j)` into the projected-feature gradient.
#[inline]
fn push_sign(grad_a: &mut [f64], a: &[f64], d: usize, p: &Pair, coef: f64) {
    let (i, j) = (p.i as usize * d, p.j as usize * d);
    for k in 0..d {
        let s = coef * sign(a[i + k] - a[j + k]);
        grad_a[i + k] += s;
        grad_a[j + k] -= s;
    }
}

/// Loss terms and gradient with respect to the projected features `a`
/// (`[pixels, d_sim]`).
pub(crate) fn loss_wrt_projection(a: &[f64], d_sim: usize, pairs: &PairSet) -> (LossTerms, Vec<f64>) {
    let mut grad = vec![0.0; a.len()];
    let mut terms = LossTerms::default();
    let pixel = |idx: u32| &a[idx as usize * d_sim..(idx as usize + 1) * d_sim];

    // Same-label pairs: -log S = |a_i - a_j|_1 until S falls under the floor.
    let same_cap = -LOG_FLOOR.ln();
    for (set, weight, slot) in [
        (&pairs.fg_fg, W_FG_FG, &mut terms.fg_fg),
        (&pairs.bg_bg, W_BG_BG, &mut terms.bg_bg),
    ] {
        if set.is_empty() {
            continue;
        }
        let n = set.len() as f64;
        let mut acc = 0.0;
        for p in set {
            let dist = l1(pixel(p.i), pixel(p.j));
            if (-dist).exp() < LOG_FLOOR {
                acc += same_cap;
            } else {
                acc += dist;
                push_sign(&mut grad, a, d_sim, p, weight / n);
            }
        }
        *slot = acc / n;
    }

    // Cross-label pairs: -log(1 - S), d/d|.|_1 = -S / (1 - S).
    if !pairs.fg_bg.is_empty() {
        let n = pairs.fg_bg.len() as f64;
        let mut acc = 0.0;
        for p in &pairs.fg_bg {
            let dist = l1(pixel(p.i), pixel(p.j));
            let one_minus = -(-dist).exp_m1();
            if one_minus < LOG_FLOOR {
                acc += -LOG_FLOOR.ln();
            } else {
                acc -= one_minus.ln();
                let s = 1.0 - one_minus;
                push_sign(&mut grad, a, d_sim, p, -W_FG_BG / n * s / one_minus);
            }
        }
        terms.fg_bg = acc / n;
    }
    (terms, grad)
}

/// Loss of class `class` and its gradient with respect to that class's
/// parameters (flattened as weights then bias), from `f64` features
/// `[pixels, d_in]`.
pub(crate) fn class_loss_grad(
    feats: &[f64],
    params: &SimHeadParams,
    class: usize,
    pairs: &PairSet,
) -> (LossTerms, Vec<f64>) {
    let (d_in, d_sim) = (params.d_in, params.d_sim);
    let mut grad = vec![0.0; params.class_len()];
    if pairs.is_empty() {
        return (LossTerms::default(), grad);
    }
    let a = params.project_f64(class, feats);
    let (terms, grad_a) = loss_wrt_projection(&a, d_sim, pairs);

    let (gw, gb) = grad.split_at_mut(d_in * d_sim);
    // Pixels are visited in index order, fixing the reduction order.
    for (f, ga) in feats.chunks_exact(d_in).zip(grad_a.chunks_exact(d_sim)) {
        if ga.iter().all(|&x| x == 0.0) {
            continue;
        }
        for (&fk, row) in f.iter().zip(gw.chunks_exact_mut(d_sim)) {
            for (w, &g) in row.iter_mut().zip(ga) {
                *w += fk * g;
            }
        }
        if params.use_bias {
            for (b, &g) in gb.iter_mut().zip(ga) {
                *b += g;
            }
        }
    }
    (terms, grad)
}

/// Loss and exact gradient of class `class` with respect to its projection.
///
/// Returns `(loss, grad)` where `grad` is laid out as `weight` (`[d_in, d_sim]`
/// row-major) followed by `bias`. The L1 subgradient uses `sign(0) = 0`.
pub fn loss_gradient(
    feat: &FeatureMap,
    params: &SimHeadParams,
    class: usize,
    pairs: &PairSet,
) -> Result<(f64, Vec<f64>)> {
    if feat.depth() != params.d_in {
        return Err(Error::shape("loss_gradient depth", &[params.d_in], &[feat.depth()]));
    }
    let pixels = feat.grid().pixels() as u32;
    let out_of_range = [&pairs.fg_fg, &pairs.bg_bg, &pairs.fg_bg]
        .iter()
        .flat_map(|s| s.iter())
        .any(|p| p.i >= pixels || p.j >= pixels);
    if out_of_range {
        return Err(Error::InvalidTensor("pair index beyond feature map".into()));
    }
    let (terms, grad) = class_loss_grad(&features_f64(feat), params, class, pairs);
    Ok((terms.total(), grad))
}
