//! Initial pseudo-labels, uncertainty, class prototypes and the reliability mask.
//!
//! Every class channel is an independent binary problem: the optic cup and
//! optic disc overlap, so "background" for one channel is simply `1 - p` of
//! that channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_any, check_binary, check_nonneg, check_unit, hwc_newtype, Grid, Tensor};

hwc_newtype!(
    /// Per-pixel class probabilities, `[H, W, C]` in `[0, 1]`.
    ProbMap,
    check_unit
);
hwc_newtype!(
    /// Per-pixel standard deviation across passes, `[H, W, C]`.
    UncertaintyMap,
    check_nonneg
);
hwc_newtype!(
    /// Binary pseudo-labels, `[H, W, C]`.
    LabelMask,
    check_binary
);
hwc_newtype!(
    /// Pixels whose pseudo-label is trusted, `[H, W, C]`.
    ReliabilityMask,
    check_binary
);
hwc_newtype!(
    /// Dense per-pixel feature vectors, `[H, W, D]`.
    FeatureMap,
    check_any
);

impl FeatureMap {
    pub fn depth(&self) -> usize {
        self.grid().channels
    }

    /// Feature vector of pixel `v` (flat row-major index).
    #[inline]
    pub fn pixel(&self, v: usize) -> &[f32] {
        let d = self.depth();
        &self.data()[v * d..(v + 1) * d]
    }
}

/// Probabilities of `K` stochastic forward passes, `[K, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbStack(Tensor);

impl ProbStack {
    pub fn new(t: Tensor) -> Result<Self> {
        t.expect_ndim(4, "ProbStack")?;
        if t.shape()[0] == 0 {
            return Err(Error::InvalidTensor("ProbStack: pass count K = 0".into()));
        }
        t.expect_range(0.0, 1.0, "ProbStack")?;
        Ok(Self(t))
    }

    pub fn passes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn grid(&self) -> Grid {
        let s = self.0.shape();
        Grid::new(s[1], s[2], s[3])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Pseudo-label threshold on the mean probability.
    pub gamma: f64,
    /// Pixels with uncertainty at or above this are never reliable.
    pub eta: f64,
    /// Number of stochastic passes expected in the input stacks.
    pub passes: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            gamma: 0.75,
            eta: 0.05,
            passes: 10,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("label.gamma = {} not in (0, 1)", self.gamma)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("label.eta = {} must be > 0", self.eta)));
        }
        if self.passes == 0 {
            return Err(Error::Config("label.passes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Foreground and background prototypes per class channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `fg[c]` is the foreground prototype of class `c`.
    pub fg: Vec<Vec<f64>>,
    pub bg: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn classes(&self) -> usize {
        self.fg.len()
    }

    pub fn depth(&self) -> usize {
        self.fg.first().map_or(0, Vec::len)
    }

    /// Packs into a `[2, C, D]` tensor (index 0 = foreground).
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .fg
            .iter()
            .chain(&self.bg)
            .flat_map(|z| z.iter().copied())
            .collect();
        Tensor::from_f64(vec![2, self.classes(), self.depth()], &data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        t.expect_ndim(3, "prototypes")?;
        if t.shape()[0] != 2 {
            return Err(Error::shape("prototypes", &[2, t.shape()[1], t.shape()[2]], t.shape()));
        }
        let (c, d) = (t.shape()[1], t.shape()[2]);
        let rows: Vec<Vec<f64>> = t
            .data()
            .chunks(d.max(1))
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect();
        Ok(Self {
            fg: rows[..c].to_vec(),
            bg: rows[c..2 * c].to_vec(),
        })
    }
}

/// Distances from each pixel's feature to the fg/bg prototypes of each class.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMaps {
    pub d_fg: Tensor,
    pub d_bg: Tensor,
}

impl DistanceMaps {
    pub fn new(d_fg: Tensor, d_bg: Tensor) -> Result<Self> {
        if d_fg.shape() != d_bg.shape() {
            return Err(Error::shape("DistanceMaps", d_fg.shape(), d_bg.shape()));
        }
        d_fg.expect_ndim(3, "DistanceMaps.d_fg")?;
        check_nonneg(&d_fg, "DistanceMaps.d_fg")?;
        check_nonneg(&d_bg, "DistanceMaps.d_bg")?;
        Ok(Self { d_fg, d_bg })
    }

    pub fn grid(&self) -> Grid {
        let s = self.d_fg.shape();
        Grid::new(s[0], s[1], s[2])
    }

    /// Class-level agreement: the label points at the nearer prototype.
    /// Ties never agree.
    #[inline]
    pub fn agrees(&self, idx: usize, label: f32) -> bool {
        let (fg, bg) = (self.d_fg.data()[idx], self.d_bg.data()[idx]);
        if label == 1.0 {
            fg < bg
        } else {
            fg > bg
        }
    }
}

/// Mean, population standard deviation and thresholded labels over the passes.
pub fn aggregate_passes(
    stack: &ProbStack,
    cfg: &LabelConfig,
) -> Result<(ProbMap, UncertaintyMap, LabelMask)> {
    cfg.validate()?;
    let k = stack.passes();
    if k != cfg.passes {
        log::debug!("probability stack holds {k} passes, config expects {}", cfg.passes);
    }
    let g = stack.grid();
    let n = g.pixels() * g.channels;
    let data = stack.tensor().data();

    let mut mean = vec![0f32; n];
    let mut std = vec![0f32; n];
    let mut label = vec![0f32; n];
    for idx in 0..n {
        let m = (0..k).map(|pass| data[pass * n + idx] as f64).sum::<f64>() / k as f64;
        let var = (0..k)
            .map(|pass| {
                let d = data[pass * n + idx] as f64 - m;
                d * d
            })
            .sum::<f64>()
            / k as f64;
        mean[idx] = m as f32;
        std[idx] = var.sqrt() as f32;
        label[idx] = if mean[idx] as f64 >= cfg.gamma { 1.0 } else { 0.0 };
    }
    let shape = g.shape();
    Ok((
        ProbMap::new(Tensor::new(shape.clone(), mean)?)?,
        UncertaintyMap::new(Tensor::new(shape.clone(), std)?)?,
        LabelMask::new(Tensor::new(shape, label)?)?,
    ))
}

fn check_grids(context: &str, reference: Grid, others: &[Grid]) -> Result<()> {
    for g in others {
        if g.height != reference.height || g.width != reference.width {
            return Err(Error::shape(
                context,
                &[reference.height, reference.width],
                &[g.height, g.width],
            ));
        }
    }
    Ok(())
}

/// Probability-weighted mean feature of the confident fg and bg pixels of each class.
pub fn compute_prototypes(
    feat: &FeatureMap,
    p: &ProbMap,
    u: &UncertaintyMap,
    y: &LabelMask,
    cfg: &LabelConfig,
) -> Result<PrototypeSet> {
    let g = p.grid();
    check_grids("compute_prototypes", g, &[feat.grid(), u.grid(), y.grid()])?;
    if u.grid() != g || y.grid() != g {
        return Err(Error::shape("compute_prototypes", &g.shape(), &y.grid().shape()));
    }
    let depth = feat.depth();
    let mut fg = Vec::with_capacity(g.channels);
    let mut bg = Vec::with_capacity(g.channels);
    for c in 0..g.channels {
        let mut sums = [vec![0f64; depth], vec![0f64; depth]];
        let mut weights = [0f64; 2];
        for v in 0..g.pixels() {
            let idx = g.at(v, c);
            if (u.data()[idx] as f64) >= cfg.eta {
                continue;
            }
            let prob = p.data()[idx] as f64;
            let (slot, w) = if y.data()[idx] == 1.0 {
                (0, prob)
            } else {
                (1, 1.0 - prob)
            };
            weights[slot] += w;
            for (s, &f) in sums[slot].iter_mut().zip(feat.pixel(v)) {
                *s += w * f as f64;
            }
        }
        for (slot, region) in [(0, "foreground"), (1, "background")] {
            if weights[slot] <= 0.0 {
                return Err(Error::DegeneratePrototype { class: c, region });
            }
        }
        let [s_fg, s_bg] = sums;
        fg.push(s_fg.into_iter().map(|s| s / weights[0]).collect());
        bg.push(s_bg.into_iter().map(|s| s / weights[1]).collect());
    }
    Ok(PrototypeSet { fg, bg })
}

/// Euclidean distances from every pixel feature to each class's prototypes.
///
/// Distances are accumulated in `f64` and stored as `f32`; all later
/// comparisons read the stored values.
pub fn prototype_distances(feat: &FeatureMap, protos: &PrototypeSet) -> Result<DistanceMaps> {
    if protos.depth() != feat.depth() {
        return Err(Error::shape("prototype depth", &[feat.depth()], &[protos.depth()]));
    }
    let fg_grid = feat.grid();
    let g = Grid::new(fg_grid.height, fg_grid.width, protos.classes());
    let mut d_fg = vec![0f64; g.pixels() * g.channels];
    let mut d_bg = d_fg.clone();
    for v in 0..g.pixels() {
        let f = feat.pixel(v);
        for c in 0..g.channels {
            d_fg[g.at(v, c)] = l2(f, &protos.fg[c]);
            d_bg[g.at(v, c)] = l2(f, &protos.bg[c]);
        }
    }
    DistanceMaps::new(
        Tensor::from_f64(g.shape(), &d_fg)?,
        Tensor::from_f64(g.shape(), &d_bg)?,
    )
}

fn l2(f: &[f32], z: &[f64]) -> f64 {
    f.iter()
        .zip(z)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Low-uncertainty pixels whose label agrees with the nearer prototype.
pub fn reliability_mask(
    feat: &FeatureMap,
    protos: &PrototypeSet,
    u: &UncertaintyMap,
    y: &LabelMask,
    cfg: &LabelConfig,
) -> Result<(ReliabilityMask, DistanceMaps)> {
    let g = y.grid();
    if u.grid() != g || protos.classes() != g.channels {
        return Err(Error::shape("reliability_mask", &g.shape(), &u.grid().shape()));
    }
    check_grids("reliability_mask", g, &[feat.grid()])?;
    let dist = prototype_distances(feat, protos)?;
    let mask: Vec<f32> = (0..g.pixels() * g.channels)
        .map(|idx| {
            let certain = (u.data()[idx] as f64) < cfg.eta;
            if certain && dist.agrees(idx, y.data()[idx]) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok((ReliabilityMask::new(Tensor::new(g.shape(), mask)?)?, dist))
}
