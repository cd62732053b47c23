//! Similarity-weighted revision of probability maps, then per-image calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::ProbMap;
use crate::simhead::SimilarityField;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Exponent applied to similarities; `>= 1` sharpens the weights.
    pub beta: f64,
    /// Number of revision rounds.
    pub rounds: usize,
    /// Whether pixel `i` takes part in its own average with similarity 1.
    pub include_self: bool,
    /// Channels whose maximum is below this are left uncalibrated.
    pub epsilon_max: f64,
    /// Divide by the per-image maximum after revision.
    pub calibrate: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            rounds: 4,
            include_self: true,
            epsilon_max: 1e-8,
            calibrate: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 1.0) {
            return Err(Error::Config(format!("refine.beta = {} must be >= 1", self.beta)));
        }
        if !(self.epsilon_max >= 0.0) {
            return Err(Error::Config("refine.epsilon_max must be >= 0".into()));
        }
        Ok(())
    }
}

/// Convex weights of one pixel's neighborhood: `(pixel, weight)` pairs summing to 1.
pub fn revision_weights(s: &SimilarityField, beta: f64, include_self: bool, pixel: usize) -> Result<Vec<(usize, f64)>> {
    let (h, w) = (s.height(), s.width());
    let spec = s.spec();
    let mut out = Vec::with_capacity(spec.len() + 1);
    if include_self {
        out.push((pixel, 1.0));
    }
    for k in 0..spec.len() {
        if let (Some(j), Some(sim)) = (spec.neighbor(h, w, pixel, k), s.get(pixel, k)) {
            out.push((j, (sim as f64).powf(beta)));
        }
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    if out.is_empty() || total <= 0.0 {
        return Err(Error::InvalidTensor(format!("pixel {pixel} has an empty neighborhood")));
    }
    for (_, w) in &mut out {
        *w /= total;
    }
    Ok(out)
}

/// Revises channel `class` of `p` for `cfg.rounds` rounds with fixed similarities.
///
/// Each round reads only the previous round's output. Other channels are
/// copied through unchanged.
pub fn revise(p: &ProbMap, s: &SimilarityField, cfg: &RefineConfig, class: usize) -> Result<ProbMap> {
    cfg.validate()?;
    let g = p.grid();
    if (s.height(), s.width()) != (g.height, g.width) {
        return Err(Error::shape("revise", &[g.height, g.width], &[s.height(), s.width()]));
    }
    if class >= g.channels {
        return Err(Error::Config(format!("class {class} out of range ({} channels)", g.channels)));
    }
    let weights = (0..g.pixels())
        .map(|v| revision_weights(s, cfg.beta, cfg.include_self, v))
        .collect::<Result<Vec<_>>>()?;

    let mut cur: Vec<f64> = p.channel(class).into_iter().map(f64::from).collect();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..cfg.rounds {
        for (out, ws) in next.iter_mut().zip(&weights) {
            *out = ws.iter().map(|&(j, w)| w * cur[j]).sum();
        }
        std::mem::swap(&mut cur, &mut next);
    }

    let mut data = p.data().to_vec();
    for (v, &x) in cur.iter().enumerate() {
        // Convex weights keep values in [0, 1] up to rounding.
        data[g.at(v, class)] = (x as f32).clamp(0.0, 1.0);
    }
    ProbMap::new(Tensor::new(g.shape(), data)?)
}

/// Divides channel `class` by its maximum; returns whether the channel was scaled.
///
/// A channel whose maximum is below `cfg.epsilon_max` is returned unchanged
/// with a warning.
pub fn calibrate(p_re: &ProbMap, cfg: &RefineConfig, class: usize) -> Result<(ProbMap, bool)> {
    let g = p_re.grid();
    if class >= g.channels {
        return Err(Error::Config(format!("class {class} out of range ({} channels)", g.channels)));
    }
    let max = p_re.channel(class).into_iter().fold(0f32, f32::max);
    if (max as f64) < cfg.epsilon_max {
        log::warn!("calibration skipped: class {class} maximum {max} is degenerate");
        return Ok((p_re.clone(), false));
    }
    let mut data = p_re.data().to_vec();
    for v in 0..g.pixels() {
        let idx = g.at(v, class);
        // The maximum maps to exactly 1.0.
        data[idx] = if data[idx] == max { 1.0 } else { data[idx] / max };
    }
    Ok((ProbMap::new(Tensor::new(g.shape(), data)?)?, true))
}
