use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{FeatureMap, LabelMask, ReliabilityMask};
use crate::rng::Rng;
use crate::simhead::loss::{class_loss_grad, LossTerms};
use crate::simhead::params::features_f64;
use crate::simhead::{pair_labels, AdamState, NeighborhoodSpec, PairSet, SimHeadParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of the projected similarity features.
    pub d_sim: usize,
    pub bias: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d_sim: 16,
            bias: true,
            epochs: 16,
            batch_size: 8,
            lr: 3e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_sim == 0 {
            return Err(Error::Config("head.d_sim must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("head.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("head.lr = {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("head betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One training image: head-input features plus the stage-one labels and reliability mask.
#[derive(Clone, Copy, Debug)]
pub struct HeadSample<'a> {
    pub feat: &'a FeatureMap,
    pub labels: &'a LabelMask,
    pub mask: &'a ReliabilityMask,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss (summed over classes) of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean per-class loss terms of the final epoch.
    pub final_terms: Vec<LossTerms>,
}

struct Prepared {
    feats: Vec<f64>,
    pairs: Vec<PairSet>,
}

/// Trains per-class projections with Adam on the balanced similarity loss.
///
/// Each epoch shuffles the images with `rng`, then steps once per batch on
/// the batch-mean loss. Per-image gradients are computed in parallel and
/// summed in image order, so results do not depend on the thread count.
/// The returned parameters are rounded to `f32`.
pub fn train_head(
    samples: &[HeadSample<'_>],
    spec: &NeighborhoodSpec,
    cfg: &HeadConfig,
    rng: &mut Rng,
) -> Result<(SimHeadParams, TrainLog)> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyTrainingSet("train_head needs at least one image".into()))?;
    let d_in = first.feat.depth();
    let classes = first.labels.grid().channels;

    let prepared: Vec<Prepared> = samples
        .iter()
        .map(|s| {
            if s.feat.depth() != d_in {
                return Err(Error::shape("head input depth", &[d_in], &[s.feat.depth()]));
            }
            let g = s.labels.grid();
            if g.channels != classes || (s.feat.grid().height, s.feat.grid().width) != (g.height, g.width) {
                return Err(Error::shape("head sample", &g.shape(), &s.feat.grid().shape()));
            }
            let pairs = (0..classes)
                .map(|c| pair_labels(s.labels, s.mask, spec, c))
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                feats: features_f64(s.feat),
                pairs,
            })
        })
        .collect::<Result<_>>()?;

    let mut params = SimHeadParams::init(d_in, cfg.d_sim, classes, cfg.bias, rng);
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let class_len = params.class_len();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        let mut terms_acc = vec![LossTerms::default(); classes];
        for batch in order.chunks(cfg.batch_size) {
            let per_image: Vec<Vec<(LossTerms, Vec<f64>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let img = &prepared[idx];
                    (0..classes)
                        .map(|c| class_loss_grad(&img.feats, &params, c, &img.pairs[c]))
                        .collect()
                })
                .collect();

            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; flat.len()];
            let mut batch_loss = 0.0;
            for results in &per_image {
                for (c, (terms, g)) in results.iter().enumerate() {
                    batch_loss += terms.total() * scale;
                    let acc = &mut terms_acc[c];
                    acc.fg_fg += terms.fg_fg * scale;
                    acc.bg_bg += terms.bg_bg * scale;
                    acc.fg_bg += terms.fg_bg * scale;
                    for (dst, &src) in grad[c * class_len..(c + 1) * class_len].iter_mut().zip(g) {
                        *dst += src * scale;
                    }
                }
            }
            adam.step(&mut flat, &grad)?;
            params.unflatten(&flat);
            epoch_total += batch_loss;
            batches += 1;
        }
        let mean = epoch_total / batches as f64;
        log::info!("train-head epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
        log.epoch_loss.push(mean);
        log.final_terms = terms_acc
            .into_iter()
            .map(|t| LossTerms {
                fg_fg: t.fg_fg / batches as f64,
                bg_bg: t.bg_bg / batches as f64,
                fg_bg: t.fg_bg / batches as f64,
            })
            .collect();
    }
    params.round_to_f32();
    Ok((params, log))
}
