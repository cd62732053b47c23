//! Seeded desk-scale scenarios: nested cup/disc ellipses with clustered
//! features and noisy multi-pass probability stacks.
//!
//! Features follow the ground truth: every region (background, disc rim, cup)
//! draws from its own Gaussian cluster. Probabilities follow a smoothed copy of
//! the ground truth, then boundary-anchored blobs bulge or dent the mask. Each
//! pass adds Gaussian jitter that is amplified inside those blobs, so the pass
//! spread flags the corrupted regions. Channel order is `(cup, disc)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{FeatureMap, LabelMask, ProbStack};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const CUP: usize = 0;
const DISC: usize = 1;
const REGION_BG: usize = 0;
const REGION_RIM: usize = 1;
const REGION_CUP: usize = 2;
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub height: usize,
    pub width: usize,
    /// Feature depth.
    pub depth: usize,
    /// Per-coordinate RMS distance between region means.
    pub separation: f64,
    /// Per-coordinate standard deviation of feature noise.
    pub feature_noise: f64,
    /// Disc semi-axes as fractions of `min(height, width)`.
    pub disc_radius: [f64; 2],
    /// Cup semi-axes as fractions of the disc's.
    pub cup_ratio: [f64; 2],
    /// Width (pixels) of the logistic ramp across region boundaries.
    pub softness: f64,
    /// Probability at the true boundary before scaling by `peak`.
    pub anchor: f64,
    /// Maximum probability per channel `(cup, disc)`.
    pub peak: [f64; 2],
    /// Corrupting blobs per channel `(cup, disc)`.
    pub protuberances: [usize; 2],
    /// Blob radius range in pixels.
    pub protuberance_radius: [f64; 2],
    /// Probability inside an outward bulge.
    pub bulge_level: f64,
    /// Probability inside an inward dent.
    pub dent_level: f64,
    /// Fraction of blobs that bulge outwards.
    pub bulge_fraction: f64,
    /// Number of stochastic passes.
    pub passes: usize,
    /// Per-pass jitter standard deviation.
    pub pass_jitter: f64,
    /// Jitter multiplier added inside corrupted blobs.
    pub jitter_boost: f64,
    /// Images per generated corpus.
    pub images: usize,
    /// Set from the pipeline's root seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    /// The paper-like preset.
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            depth: 8,
            separation: 4.0,
            feature_noise: 0.5,
            disc_radius: [0.30, 0.38],
            cup_ratio: [0.45, 0.6],
            softness: 1.5,
            anchor: 0.75,
            peak: [0.79, 0.94],
            protuberances: [3, 3],
            protuberance_radius: [3.0, 5.0],
            bulge_level: 0.92,
            dent_level: 0.15,
            bulge_fraction: 0.5,
            passes: 10,
            pass_jitter: 0.02,
            jitter_boost: 4.0,
            images: 8,
            seed: 0,
        }
    }
}

/// Named scenario presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Noiseless,
    PaperLike,
    Separable,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noiseless" => Ok(Preset::Noiseless),
            "paper-like" => Ok(Preset::PaperLike),
            "separable" => Ok(Preset::Separable),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl ScenarioConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let base = Self { seed, ..Self::default() };
        match preset {
            Preset::PaperLike => base,
            // Thresholding the probabilities at `anchor` recovers the truth.
            Preset::Noiseless => Self {
                feature_noise: 0.0,
                peak: [1.0, 1.0],
                protuberances: [0, 0],
                pass_jitter: 0.0,
                ..base
            },
            Preset::Separable => Self {
                feature_noise: 0.25,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return fail(format!("synth grid {}x{} is smaller than 8x8", self.height, self.width));
        }
        if self.depth < 3 {
            return fail("synth.depth must be >= 3 (three orthogonal region means)".into());
        }
        if !(self.separation > 0.0) {
            return fail("synth.separation must be > 0".into());
        }
        if !(self.feature_noise >= 0.0 && self.pass_jitter >= 0.0 && self.jitter_boost >= 0.0) {
            return fail("synth noise levels must be >= 0".into());
        }
        if !(self.softness > 0.0) {
            return fail("synth.softness must be > 0".into());
        }
        if !(self.anchor > 0.0 && self.anchor < 1.0) {
            return fail("synth.anchor must lie in (0, 1)".into());
        }
        if self.peak.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return fail("synth.peak entries must lie in (0, 1]".into());
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ordered(self.disc_radius) || self.disc_radius[1] >= 0.5 {
            return fail("synth.disc_radius must satisfy 0 < lo <= hi < 0.5".into());
        }
        if !ordered(self.cup_ratio) || self.cup_ratio[1] >= 1.0 {
            return fail("synth.cup_ratio must satisfy 0 < lo <= hi < 1".into());
        }
        if !ordered(self.protuberance_radius) {
            return fail("synth.protuberance_radius must satisfy 0 < lo <= hi".into());
        }
        if self.passes == 0 {
            return fail("synth.passes must be >= 1".into());
        }
        if self.images == 0 {
            return fail("synth.images must be >= 1".into());
        }
        Ok(())
    }
}

/// Shared feature clusters of a corpus: one mean per region.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    /// Indexed by region: background, disc rim, cup.
    pub means: [Vec<f64>; 3],
}

impl Domain {
    /// Orthogonal region means with pairwise distance `separation * sqrt(depth)`.
    pub fn sample(cfg: &ScenarioConfig, rng: &mut Rng) -> Self {
        let d = cfg.depth;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 3 {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let scale = cfg.separation * (d as f64 / 2.0).sqrt();
        let mean = |k: usize| basis[k].iter().map(|x| x * scale).collect::<Vec<f64>>();
        Self {
            means: [mean(0), mean(1), mean(2)],
        }
    }
}

/// One generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub features: FeatureMap,
    pub probs: ProbStack,
    pub truth: LabelMask,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Normalized radius: `<= 1` inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (u, v) = self.local(y, x);
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Signed distance along the ray from the center, positive inside.
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        let (u, v) = self.local(y, x);
        let r = (u * u + v * v).sqrt();
        if r < 1e-12 {
            return self.a.min(self.b);
        }
        let (cos, sin) = (u / r, v / r);
        let edge = self.a * self.b / ((self.b * cos).powi(2) + (self.a * sin).powi(2)).sqrt();
        edge - r
    }

    fn point(&self, t: f64) -> (f64, f64) {
        let (u, v) = (self.a * t.cos(), self.b * t.sin());
        let (s, c) = self.theta.sin_cos();
        (self.cy + u * s + v * c, self.cx + u * c - v * s)
    }
}

fn sample_geometry(cfg: &ScenarioConfig, rng: &mut Rng) -> Result<(Ellipse, Ellipse)> {
    let size = cfg.height.min(cfg.width) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let disc = Ellipse {
            cy: cfg.height as f64 / 2.0 + rng.uniform(-3.0, 3.0),
            cx: cfg.width as f64 / 2.0 + rng.uniform(-3.0, 3.0),
            a: size * rng.uniform(cfg.disc_radius[0], cfg.disc_radius[1]),
            b: size * rng.uniform(cfg.disc_radius[0], cfg.disc_radius[1]),
            theta: rng.uniform(0.0, std::f64::consts::PI),
        };
        let cup = Ellipse {
            cy: disc.cy + rng.uniform(-2.0, 2.0),
            cx: disc.cx + rng.uniform(-2.0, 2.0),
            a: disc.a * rng.uniform(cfg.cup_ratio[0], cfg.cup_ratio[1]),
            b: disc.b * rng.uniform(cfg.cup_ratio[0], cfg.cup_ratio[1]),
            theta: rng.uniform(0.0, std::f64::consts::PI),
        };
        // Keep at least two pixels of rim everywhere.
        let inside = (0..128).all(|k| {
            let (y, x) = cup.point(k as f64 * std::f64::consts::TAU / 128.0);
            disc.signed_distance(y, x) >= 2.0
        });
        if inside {
            return Ok((disc, cup));
        }
    }
    Err(Error::DegenerateGeometry(MAX_ATTEMPTS))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generates one image from `domain` with its own geometry stream `rng`.
pub fn generate_image(cfg: &ScenarioConfig, domain: &Domain, rng: &mut Rng) -> Result<Scenario> {
    cfg.validate()?;
    let (h, w, d) = (cfg.height, cfg.width, cfg.depth);
    let (disc, cup) = sample_geometry(cfg, rng)?;
    let shapes = [cup, disc];
    let pixels = h * w;

    let mut truth = vec![0f32; pixels * 2];
    let mut clean = vec![0f64; pixels * 2];
    let mut corruption = vec![0f64; pixels * 2];
    let anchor_logit = logit(cfg.anchor);
    let below_anchor = (cfg.anchor as f32).next_down() as f64;
    for v in 0..pixels {
        let (y, x) = ((v / w) as f64, (v % w) as f64);
        for (c, shape) in shapes.iter().enumerate() {
            let inside = shape.rho(y, x) <= 1.0;
            truth[v * 2 + c] = inside as u8 as f32;
            let mut q = sigmoid(anchor_logit + shape.signed_distance(y, x) / cfg.softness);
            // Knife-edge pixels: the anchor level set is exactly the boundary.
            q = if inside { q.max(cfg.anchor) } else { q.min(below_anchor) };
            clean[v * 2 + c] = q;
        }
    }

    // Boundary-anchored bulges and dents.
    for (c, shape) in shapes.iter().enumerate() {
        for _ in 0..cfg.protuberances[c] {
            let (by, bx) = shape.point(rng.uniform(0.0, std::f64::consts::TAU));
            let radius = rng.uniform(cfg.protuberance_radius[0], cfg.protuberance_radius[1]);
            let level = if rng.unit() < cfg.bulge_fraction { cfg.bulge_level } else { cfg.dent_level };
            for v in 0..pixels {
                let (y, x) = ((v / w) as f64, (v % w) as f64);
                let dist = ((y - by).powi(2) + (x - bx).powi(2)).sqrt();
                let weight = ((radius - dist) / (0.4 * radius)).clamp(0.0, 1.0);
                if weight > 0.0 {
                    let idx = v * 2 + c;
                    clean[idx] = (1.0 - weight) * clean[idx] + weight * level;
                    corruption[idx] = corruption[idx].max(weight);
                }
            }
        }
    }

    let mut passes = vec![0f32; cfg.passes * pixels * 2];
    for k in 0..cfg.passes {
        for idx in 0..pixels * 2 {
            let c = idx % 2;
            let sigma = cfg.pass_jitter * (1.0 + cfg.jitter_boost * corruption[idx]);
            let noise = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
            let p = cfg.peak[c] * clean[idx] + noise;
            passes[k * pixels * 2 + idx] = p.clamp(0.0, 1.0) as f32;
        }
    }

    let mut feats = vec![0f32; pixels * d];
    for v in 0..pixels {
        let region = if truth[v * 2 + CUP] == 1.0 {
            REGION_CUP
        } else if truth[v * 2 + DISC] == 1.0 {
            REGION_RIM
        } else {
            REGION_BG
        };
        for (k, slot) in feats[v * d..(v + 1) * d].iter_mut().enumerate() {
            let noise = if cfg.feature_noise > 0.0 { cfg.feature_noise * rng.normal() } else { 0.0 };
            *slot = (domain.means[region][k] + noise) as f32;
        }
    }

    Ok(Scenario {
        features: FeatureMap::new(Tensor::new(vec![h, w, d], feats)?)?,
        probs: ProbStack::new(Tensor::new(vec![cfg.passes, h, w, 2], passes)?)?,
        truth: LabelMask::new(Tensor::new(vec![h, w, 2], truth)?)?,
    })
}

/// A single image whose domain and geometry both derive from `cfg.seed`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    let mut rng = Rng::substream(cfg.seed, "domain");
    let domain = Domain::sample(cfg, &mut rng);
    generate_image(cfg, &domain, &mut Rng::substream(cfg.seed, "image-0"))
}

/// `cfg.images` images sharing one feature domain.
pub fn generate_corpus(cfg: &ScenarioConfig) -> Result<Vec<Scenario>> {
    cfg.validate()?;
    let domain = Domain::sample(cfg, &mut Rng::substream(cfg.seed, "domain"));
    (0..cfg.images)
        .map(|i| generate_image(cfg, &domain, &mut Rng::new(derive_seed(cfg.seed, &format!("image-{i}")))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{aggregate_passes, LabelConfig};
    use crate::metrics::{boundary, dice, squared_distance_transform};

    #[test]
    fn noiseless_threshold_recovers_truth() {
        for seed in 0..5 {
            let s = generate(&ScenarioConfig::preset(Preset::Noiseless, seed)).unwrap();
            let (_, u, y) = aggregate_passes(&s.probs, &LabelConfig::default()).unwrap();
            assert_eq!(y, s.truth);
            assert!(u.data().iter().all(|&x| x == 0.0));
            assert_eq!(dice(&y, &s.truth, 0).unwrap(), 100.0);
            assert_eq!(dice(&y, &s.truth, 1).unwrap(), 100.0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = ScenarioConfig::preset(Preset::PaperLike, 12);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert!(a.features.tensor().bitwise_eq(b.features.tensor()));
        assert!(a.probs.tensor().bitwise_eq(b.probs.tensor()));
        assert_eq!(a.truth, b.truth);
        let c = generate(&ScenarioConfig { seed: 13, ..cfg }).unwrap();
        assert!(!a.probs.tensor().bitwise_eq(c.probs.tensor()));
    }

    #[test]
    fn cup_nested_in_disc() {
        for seed in 0..10 {
            let s = generate(&ScenarioConfig::preset(Preset::PaperLike, seed)).unwrap();
            let (cup, disc) = (s.truth.channel(0), s.truth.channel(1));
            assert!(cup.iter().zip(&disc).all(|(c, d)| c <= d));
            assert!(cup.iter().any(|&c| c == 1.0));
        }
    }

    #[test]
    fn impossible_geometry_is_reported() {
        let cfg = ScenarioConfig {
            height: 8,
            width: 8,
            disc_radius: [0.05, 0.05],
            cup_ratio: [0.99, 0.99],
            ..ScenarioConfig::preset(Preset::Noiseless, 0)
        };
        assert!(matches!(generate(&cfg), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn separable_features_match_nearest_mean() {
        let cfg = ScenarioConfig { feature_noise: 1.0, separation: 4.0, ..Default::default() };
        let domain = Domain::sample(&cfg, &mut Rng::substream(cfg.seed, "domain"));
        let s = generate(&cfg).unwrap();
        let mut correct = 0;
        let g = s.truth.grid();
        for v in 0..g.pixels() {
            let f = s.features.pixel(v);
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = f.iter().zip(&domain.means[a]).map(|(&x, m)| (x as f64 - m).powi(2)).sum();
                    let db: f64 = f.iter().zip(&domain.means[b]).map(|(&x, m)| (x as f64 - m).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            let truth = if s.truth.data()[v * 2] == 1.0 { 2 } else if s.truth.data()[v * 2 + 1] == 1.0 { 1 } else { 0 };
            correct += (nearest == truth) as usize;
        }
        assert!(correct as f64 / g.pixels() as f64 >= 0.99);
    }

    #[test]
    fn corruption_touches_the_true_boundary() {
        let cfg = ScenarioConfig {
            protuberances: [3, 3],
            bulge_level: 0.95,
            dent_level: 0.05,
            ..ScenarioConfig::preset(Preset::Noiseless, 0)
        };
        for seed in 0..5 {
            let s = generate(&ScenarioConfig { seed, ..cfg.clone() }).unwrap();
            let (_, _, y) = aggregate_passes(&s.probs, &LabelConfig::default()).unwrap();
            let g = y.grid();
            for c in 0..2 {
                let edge = boundary(&s.truth, c);
                let dt = squared_distance_transform(g.height, g.width, &edge);
                for v in 0..g.pixels() {
                    if y.data()[g.at(v, c)] != s.truth.data()[g.at(v, c)] {
                        assert!(dt[v].sqrt() <= cfg.protuberance_radius[1] + 1.0);
                    }
                }
            }
        }
    }
}
