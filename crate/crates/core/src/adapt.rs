//! Denoising of refined pseudo-labels and masked training of a per-pixel segmentor.
//!
//! The segmentor here is a per-class logistic model over frozen features. It
//! stands in for the full segmentation network so the masked objective can be
//! trained and checked end to end at desk scale.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{DistanceMaps, FeatureMap, LabelMask, ProbMap};
use crate::npy::{load_tensor, save_tensor};
use crate::rng::Rng;
use crate::simhead::AdamState;
use crate::tensor::{check_binary, hwc_newtype, Tensor};

/// Predictions are clamped into `[PRED_CLAMP, 1 - PRED_CLAMP]` inside the loss.
pub const PRED_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub gamma_low: f64,
    pub gamma_high: f64,
    /// Threshold for the refined labels.
    pub gamma: f64,
    /// Recompute prototypes from the refined labels before measuring distances;
    /// when false the stage-one distances are reused.
    pub refresh_prototypes: bool,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            gamma_low: 0.4,
            gamma_high: 0.85,
            gamma: 0.75,
            refresh_prototypes: true,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma_low && self.gamma_low < self.gamma_high && self.gamma_high < 1.0) {
            return Err(Error::Config(format!(
                "denoise thresholds must satisfy 0 < gamma_low ({}) < gamma_high ({}) < 1",
                self.gamma_low, self.gamma_high
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("denoise.gamma = {} not in (0, 1)", self.gamma)));
        }
        Ok(())
    }
}

hwc_newtype!(
    /// Pixels whose refined label supervises adaptation, `[H, W, C]`.
    SelectionMask,
    check_binary
);

/// Refined labels: `p' >= gamma` (inclusive).
pub fn refined_labels(p_prime: &ProbMap, cfg: &DenoiseConfig) -> Result<LabelMask> {
    cfg.validate()?;
    let data = p_prime
        .data()
        .iter()
        .map(|&p| if p as f64 >= cfg.gamma { 1.0 } else { 0.0 })
        .collect();
    LabelMask::new(Tensor::new(p_prime.grid().shape(), data)?)
}

/// The two factors of the selection mask and their product.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionFactors {
    /// Confident probability: outside `[gamma_low, gamma_high]`.
    pub pixel: SelectionMask,
    /// Label agrees with the nearer prototype.
    pub class: SelectionMask,
    pub combined: SelectionMask,
}

/// Pixel-level and class-level selection of refined labels.
pub fn selection_factors(
    p_prime: &ProbMap,
    y_prime: &LabelMask,
    d: &DistanceMaps,
    cfg: &DenoiseConfig,
) -> Result<SelectionFactors> {
    cfg.validate()?;
    let g = p_prime.grid();
    if y_prime.grid() != g || d.grid() != g {
        return Err(Error::shape("selection_mask", &g.shape(), &d.grid().shape()));
    }
    let n = g.pixels() * g.channels;
    let mut pixel = vec![0f32; n];
    let mut class = vec![0f32; n];
    let mut combined = vec![0f32; n];
    for idx in 0..n {
        let p = p_prime.data()[idx] as f64;
        let mp = p < cfg.gamma_low || p > cfg.gamma_high;
        let mc = d.agrees(idx, y_prime.data()[idx]);
        pixel[idx] = mp as u8 as f32;
        class[idx] = mc as u8 as f32;
        combined[idx] = pixel[idx] * class[idx];
    }
    let shape = g.shape();
    Ok(SelectionFactors {
        pixel: SelectionMask::new(Tensor::new(shape.clone(), pixel)?)?,
        class: SelectionMask::new(Tensor::new(shape.clone(), class)?)?,
        combined: SelectionMask::new(Tensor::new(shape, combined)?)?,
    })
}

/// The product of the pixel-level and class-level selection factors.
pub fn selection_mask(
    p_prime: &ProbMap,
    y_prime: &LabelMask,
    d: &DistanceMaps,
    cfg: &DenoiseConfig,
) -> Result<SelectionMask> {
    Ok(selection_factors(p_prime, y_prime, d, cfg)?.combined)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceLoss {
    /// Sum over selected pixels.
    pub sum: f64,
    /// Sum divided by the number of selected pixels (0 when none).
    pub mean: f64,
    pub selected: usize,
}

#[inline]
fn bce_term(pred: f64, label: f64) -> f64 {
    let p = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Cross-entropy over the selected pixels.
pub fn masked_bce(pred: &ProbMap, y_prime: &LabelMask, m_prime: &SelectionMask) -> Result<BceLoss> {
    let g = pred.grid();
    if y_prime.grid() != g || m_prime.grid() != g {
        return Err(Error::shape("masked_bce", &g.shape(), &m_prime.grid().shape()));
    }
    let mut sum = 0.0;
    let mut selected = 0;
    for idx in 0..g.pixels() * g.channels {
        if m_prime.data()[idx] == 1.0 {
            sum += bce_term(pred.data()[idx] as f64, y_prime.data()[idx] as f64);
            selected += 1;
        }
    }
    let mean = if selected == 0 { 0.0 } else { sum / selected as f64 };
    Ok(BceLoss { sum, mean, selected })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability threshold for the segmentor's predicted labels.
    pub threshold: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-4,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            threshold: 0.5,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("adapt.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("adapt.lr = {} must be > 0", self.lr)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("adapt.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-class logistic model `sigmoid(w_c . f + b_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySegmentor {
    pub depth: usize,
    /// `weights[c]` has `depth` entries.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ToySegmentor {
    pub fn init(depth: usize, classes: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (depth as f64).sqrt();
        Self {
            depth,
            weights: (0..classes)
                .map(|_| (0..depth).map(|_| rng.uniform(-bound, bound)).collect())
                .collect(),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, &b)| w.iter().copied().chain(std::iter::once(b)))
            .collect()
    }

    fn unflatten(&mut self, flat: &[f64]) {
        for (c, chunk) in flat.chunks(self.depth + 1).enumerate() {
            self.weights[c].copy_from_slice(&chunk[..self.depth]);
            self.bias[c] = chunk[self.depth];
        }
    }

    fn round_to_f32(&mut self) {
        for x in self.weights.iter_mut().flatten().chain(self.bias.iter_mut()) {
            *x = *x as f32 as f64;
        }
    }

    fn logit(&self, class: usize, f: &[f32]) -> f64 {
        self.bias[class]
            + self.weights[class]
                .iter()
                .zip(f)
                .map(|(w, &x)| w * x as f64)
                .sum::<f64>()
    }

    /// Per-pixel probabilities, clamped into the open unit interval.
    pub fn predict(&self, feat: &FeatureMap) -> Result<ProbMap> {
        if feat.depth() != self.depth {
            return Err(Error::shape("toy segmentor depth", &[self.depth], &[feat.depth()]));
        }
        let g = feat.grid();
        let c = self.classes();
        let mut out = vec![0f32; g.pixels() * c];
        for v in 0..g.pixels() {
            let f = feat.pixel(v);
            for class in 0..c {
                let p = sigmoid(self.logit(class, f)).clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
                out[v * c + class] = p as f32;
            }
        }
        ProbMap::new(Tensor::new(vec![g.height, g.width, c], out)?)
    }

    /// Thresholded predictions.
    pub fn predict_labels(&self, feat: &FeatureMap, threshold: f64) -> Result<LabelMask> {
        let p = self.predict(feat)?;
        let data = p.data().iter().map(|&x| ((x as f64) >= threshold) as u8 as f32).collect();
        LabelMask::new(Tensor::new(p.grid().shape(), data)?)
    }

    /// Summed masked cross-entropy of one image and its gradient (weights then
    /// bias, class by class).
    pub fn loss_grad(&self, feat: &FeatureMap, y: &LabelMask, m: &SelectionMask) -> Result<(f64, Vec<f64>)> {
        if feat.depth() != self.depth {
            return Err(Error::shape("toy segmentor depth", &[self.depth], &[feat.depth()]));
        }
        let g = y.grid();
        if m.grid() != g || (feat.grid().height, feat.grid().width) != (g.height, g.width) || g.channels != self.classes() {
            return Err(Error::shape("toy segmentor inputs", &g.shape(), &m.grid().shape()));
        }
        let stride = self.depth + 1;
        let mut grad = vec![0.0; stride * g.channels];
        let mut loss = 0.0;
        for v in 0..g.pixels() {
            let f = feat.pixel(v);
            for c in 0..g.channels {
                let idx = g.at(v, c);
                if m.data()[idx] != 1.0 {
                    continue;
                }
                let label = y.data()[idx] as f64;
                let pred = sigmoid(self.logit(c, f));
                loss += bce_term(pred, label);
                if pred <= PRED_CLAMP || pred >= 1.0 - PRED_CLAMP {
                    continue;
                }
                let dz = pred - label;
                let gc = &mut grad[c * stride..(c + 1) * stride];
                for (gw, &x) in gc.iter_mut().zip(f) {
                    *gw += dz * x as f64;
                }
                gc[self.depth] += dz;
            }
        }
        Ok((loss, grad))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let w: Vec<f64> = self.weights.iter().flatten().copied().collect();
        save_tensor(&Tensor::from_f64(vec![self.classes(), self.depth], &w)?, dir.join("weight.npy"))?;
        save_tensor(&Tensor::from_f64(vec![self.classes()], &self.bias)?, dir.join("bias.npy"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let w = load_tensor(dir.join("weight.npy"))?;
        let b = load_tensor(dir.join("bias.npy"))?;
        w.expect_ndim(2, "toy weight")?;
        let (classes, depth) = (w.shape()[0], w.shape()[1]);
        if b.shape() != [classes] {
            return Err(Error::shape("toy bias", &[classes], b.shape()));
        }
        Ok(Self {
            depth,
            weights: w.data().chunks(depth.max(1)).map(|r| r.iter().map(|&x| x as f64).collect()).collect(),
            bias: b.data().iter().map(|&x| x as f64).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptSample<'a> {
    pub feat: &'a FeatureMap,
    pub labels: &'a LabelMask,
    pub mask: &'a SelectionMask,
}

/// Trains the toy segmentor with Adam on the masked cross-entropy.
///
/// Each step minimises the batch's summed loss divided by its selected-pixel
/// count. Returns the segmentor (rounded to `f32`) and the epoch-mean losses.
pub fn adapt_toy(samples: &[AdaptSample<'_>], cfg: &AdaptConfig, rng: &mut Rng) -> Result<(ToySegmentor, Vec<f64>)> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyTrainingSet("adapt needs at least one image".into()))?;
    let selected: Vec<usize> = samples
        .iter()
        .map(|s| s.mask.data().iter().filter(|&&x| x == 1.0).count())
        .collect();
    if selected.iter().sum::<usize>() == 0 {
        return Err(Error::EmptyTrainingSet("no pixels selected across the corpus".into()));
    }
    let mut model = ToySegmentor::init(first.feat.depth(), first.labels.grid().channels, rng);
    let mut flat = model.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let count: usize = batch.iter().map(|&i| selected[i]).sum();
            if count == 0 {
                continue;
            }
            let results = batch
                .par_iter()
                .map(|&i| model.loss_grad(samples[i].feat, samples[i].labels, samples[i].mask))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / count as f64;
            let mut grad = vec![0.0; flat.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l * scale;
                for (dst, &src) in grad.iter_mut().zip(g) {
                    *dst += src * scale;
                }
            }
            adam.step(&mut flat, &grad)?;
            model.unflatten(&flat);
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("adapt epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
        epoch_loss.push(mean);
    }
    model.round_to_f32();
    Ok((model, epoch_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn t3(h: usize, w: usize, c: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = ProbMap::new(t3(1, 3, 1, vec![1.0, 0.75, 0.7499])).unwrap();
        let y = refined_labels(&p, &DenoiseConfig::default()).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn default_bands() {
        let cfg = DenoiseConfig::default();
        assert_eq!((cfg.gamma_low, cfg.gamma_high), (0.4, 0.85));
    }

    #[test]
    fn confident_agreeing_pixel_selected_and_ambiguous_band_excluded() {
        let p = ProbMap::new(t3(1, 2, 1, vec![0.9, 0.5])).unwrap();
        let y = LabelMask::new(t3(1, 2, 1, vec![1.0, 0.0])).unwrap();
        let d = DistanceMaps::new(t3(1, 2, 1, vec![0.1, 5.0]), t3(1, 2, 1, vec![2.0, 0.1])).unwrap();
        let f = selection_factors(&p, &y, &d, &DenoiseConfig::default()).unwrap();
        assert_eq!(f.combined.data(), &[1.0, 0.0]);
        assert_eq!(f.class.data(), &[1.0, 1.0]);
        assert_eq!(f.pixel.data(), &[1.0, 0.0]);
    }

    #[test]
    fn bce_examples() {
        let pred = ProbMap::new(t3(1, 2, 1, vec![(-1.0f64).exp() as f32, 0.3])).unwrap();
        let y = LabelMask::new(t3(1, 2, 1, vec![1.0, 0.0])).unwrap();
        let none = SelectionMask::new(t3(1, 2, 1, vec![0.0, 0.0])).unwrap();
        assert_eq!(masked_bce(&pred, &y, &none).unwrap().sum, 0.0);
        let first = SelectionMask::new(t3(1, 2, 1, vec![1.0, 0.0])).unwrap();
        let l = masked_bce(&pred, &y, &first).unwrap();
        assert!((l.sum - 1.0).abs() < 1e-6);
        assert_eq!(l.selected, 1);
    }

    #[test]
    fn perfect_prediction_is_at_clamp_floor() {
        let pred = ProbMap::new(t3(2, 2, 1, vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        let y = LabelMask::new(t3(2, 2, 1, vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        let m = SelectionMask::new(t3(2, 2, 1, vec![1.0; 4])).unwrap();
        let l = masked_bce(&pred, &y, &m).unwrap();
        assert!(l.sum <= 4.0 * -(1.0 - PRED_CLAMP).ln() + 1e-15);
    }

    #[test]
    fn nothing_selected_is_an_error() {
        let f = FeatureMap::new(t3(1, 2, 1, vec![0.0, 1.0])).unwrap();
        let y = LabelMask::new(t3(1, 2, 1, vec![0.0, 1.0])).unwrap();
        let m = SelectionMask::new(t3(1, 2, 1, vec![0.0, 0.0])).unwrap();
        let s = [AdaptSample { feat: &f, labels: &y, mask: &m }];
        assert!(matches!(adapt_toy(&s, &AdaptConfig::default(), &mut Rng::new(0)), Err(Error::EmptyTrainingSet(_))));
    }

    #[test]
    fn predictions_stay_open() {
        let f = FeatureMap::new(t3(1, 2, 1, vec![-1e4, 1e4])).unwrap();
        let model = ToySegmentor { depth: 1, weights: vec![vec![1.0]], bias: vec![0.0] };
        let p = model.predict(&f).unwrap();
        assert!(p.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ToySegmentor::init(3, 2, &mut Rng::new(4));
        model.round_to_f32();
        model.save(dir.path()).unwrap();
        assert_eq!(ToySegmentor::load(dir.path()).unwrap(), model);
    }

    proptest! {
        #[test]
        fn mask_is_product_of_factors(
            probs in prop::collection::vec(0f32..=1.0, 20),
            dfg in prop::collection::vec(0f32..3.0, 20),
            dbg in prop::collection::vec(0f32..3.0, 20),
        ) {
            let cfg = DenoiseConfig::default();
            let p = ProbMap::new(t3(2, 5, 2, probs)).unwrap();
            let y = refined_labels(&p, &cfg).unwrap();
            let d = DistanceMaps::new(t3(2, 5, 2, dfg), t3(2, 5, 2, dbg)).unwrap();
            let f = selection_factors(&p, &y, &d, &cfg).unwrap();
            for i in 0..20 {
                let (c, a, b) = (f.combined.data()[i], f.pixel.data()[i], f.class.data()[i]);
                prop_assert_eq!(c, a * b);
                prop_assert!(c <= a && c <= b);
            }
        }

        #[test]
        fn band_interior_changes_do_not_matter(
            a in 0.4001f32..0.8499, b in 0.4001f32..0.8499,
            dfg in 0f32..2.0, dbg in 0f32..2.0, label: bool,
        ) {
            let cfg = DenoiseConfig::default();
            let y = LabelMask::new(t3(1, 1, 1, vec![label as u8 as f32])).unwrap();
            let d = DistanceMaps::new(t3(1, 1, 1, vec![dfg]), t3(1, 1, 1, vec![dbg])).unwrap();
            let ma = selection_mask(&ProbMap::new(t3(1, 1, 1, vec![a])).unwrap(), &y, &d, &cfg).unwrap();
            let mb = selection_mask(&ProbMap::new(t3(1, 1, 1, vec![b])).unwrap(), &y, &d, &cfg).unwrap();
            prop_assert_eq!(ma, mb);
        }

        #[test]
        fn bce_is_nonnegative(probs in prop::collection::vec(0f32..=1.0, 8), labels in prop::collection::vec(any::<bool>(), 8), sel in prop::collection::vec(any::<bool>(), 8)) {
            let pred = ProbMap::new(t3(2, 4, 1, probs)).unwrap();
            let y = LabelMask::new(t3(2, 4, 1, labels.iter().map(|&b| b as u8 as f32).collect())).unwrap();
            let m = SelectionMask::new(t3(2, 4, 1, sel.iter().map(|&b| b as u8 as f32).collect())).unwrap();
            prop_assert!(masked_bce(&pred, &y, &m).unwrap().sum >= 0.0);
        }
    }
}
