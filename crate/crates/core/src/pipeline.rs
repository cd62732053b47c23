//! The two-stage pipeline over in-memory images.
//!
//! Stage one turns multi-pass probabilities into pseudo-labels and reliability
//! masks, then trains the similarity head on them. Stage two revises and
//! calibrates the probabilities, selects reliable refined labels and adapts a
//! toy segmentor on them. Images are processed in parallel; results are
//! collected in image order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapt_toy, refined_labels, selection_factors, AdaptConfig, AdaptSample, DenoiseConfig, SelectionFactors,
    SelectionMask,
    ToySegmentor,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::labeling::{
    aggregate_passes, compute_prototypes, prototype_distances, reliability_mask, DistanceMaps, FeatureMap,
    LabelConfig, LabelMask, ProbMap, ProbStack, PrototypeSet, ReliabilityMask, UncertaintyMap,
};
use crate::metrics::MetricReport;
use crate::refine::{calibrate, revise, RefineConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::simhead::{
    project_features, similarity_field, train_head, HeadConfig, HeadSample, NeighborhoodSpec, SimHeadParams,
    SimilarityField, TrainLog,
};

/// Stage label for the head-training random stream.
pub const HEAD_STREAM: &str = "train-head";
/// Stage label for the adaptation random stream.
pub const ADAPT_STREAM: &str = "adapt";
/// Stage label for the synthetic-corpus random stream.
pub const SYNTH_STREAM: &str = "synth";

/// One image's model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub id: String,
    pub probs: ProbStack,
    /// Features used for prototypes and by the toy segmentor.
    pub feat_l: FeatureMap,
    /// Input of the similarity head.
    pub feat_in: FeatureMap,
    pub truth: Option<LabelMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub p: ProbMap,
    pub u: UncertaintyMap,
    pub y: LabelMask,
    pub m: ReliabilityMask,
    pub protos: PrototypeSet,
    pub dist: DistanceMaps,
}

pub fn pseudo_label(probs: &ProbStack, feat_l: &FeatureMap, cfg: &LabelConfig) -> Result<PseudoLabels> {
    let (p, u, y) = aggregate_passes(probs, cfg)?;
    let protos = compute_prototypes(feat_l, &p, &u, &y, cfg)?;
    let (m, dist) = reliability_mask(feat_l, &protos, &u, &y, cfg)?;
    Ok(PseudoLabels { p, u, y, m, protos, dist })
}

/// Trains the similarity head on every image's labels and reliability mask.
pub fn fit_head(
    feats: &[&FeatureMap],
    pseudo: &[&PseudoLabels],
    spec: &NeighborhoodSpec,
    cfg: &HeadConfig,
    root_seed: u64,
) -> Result<(SimHeadParams, TrainLog)> {
    if feats.len() != pseudo.len() {
        return Err(Error::shape("head inputs", &[feats.len()], &[pseudo.len()]));
    }
    let samples: Vec<HeadSample<'_>> = feats
        .iter()
        .zip(pseudo)
        .map(|(feat, pl)| HeadSample { feat, labels: &pl.y, mask: &pl.m })
        .collect();
    train_head(&samples, spec, cfg, &mut Rng::substream(root_seed, HEAD_STREAM))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    /// One field per class, from that class's projection.
    pub sim: Vec<SimilarityField>,
    /// Revised, uncalibrated probabilities.
    pub p_re: ProbMap,
    /// Calibrated probabilities (equal to `p_re` when calibration is off).
    pub p_prime: ProbMap,
}

pub fn refine_image(
    feat_in: &FeatureMap,
    p: &ProbMap,
    params: &SimHeadParams,
    spec: &NeighborhoodSpec,
    cfg: &RefineConfig,
) -> Result<Refined> {
    let classes = p.grid().channels;
    if params.num_classes() != classes {
        return Err(Error::shape("head classes", &[classes], &[params.num_classes()]));
    }
    let mut sim = Vec::with_capacity(classes);
    let mut p_re = p.clone();
    for c in 0..classes {
        let s = similarity_field(&project_features(feat_in, params, c)?, spec);
        p_re = revise(&p_re, &s, cfg, c)?;
        sim.push(s);
    }
    let mut p_prime = p_re.clone();
    if cfg.calibrate {
        for c in 0..classes {
            p_prime = calibrate(&p_prime, cfg, c)?.0;
        }
    }
    Ok(Refined { sim, p_re, p_prime })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoised {
    pub y_prime: LabelMask,
    pub selection: SelectionFactors,
    /// Prototypes behind the class-level factor.
    pub protos: PrototypeSet,
}

/// Refined labels plus their selection mask.
///
/// With `refresh_prototypes`, prototypes are recomputed from the refined
/// probabilities and labels under the stage-one uncertainty gate; a class
/// left without confident foreground or background falls back to the
/// stage-one prototypes.
pub fn denoise_image(
    feat_l: &FeatureMap,
    p_prime: &ProbMap,
    stage_one: &PseudoLabels,
    label_cfg: &LabelConfig,
    cfg: &DenoiseConfig,
) -> Result<Denoised> {
    let y_prime = refined_labels(p_prime, cfg)?;
    let protos = if cfg.refresh_prototypes {
        match compute_prototypes(feat_l, p_prime, &stage_one.u, &y_prime, label_cfg) {
            Ok(p) => p,
            Err(Error::DegeneratePrototype { class, region }) => {
                log::warn!("refreshed {region} prototype of class {class} is empty; reusing stage-one prototypes");
                stage_one.protos.clone()
            }
            Err(e) => return Err(e),
        }
    } else {
        stage_one.protos.clone()
    };
    let dist = prototype_distances(feat_l, &protos)?;
    let selection = selection_factors(p_prime, &y_prime, &dist, cfg)?;
    Ok(Denoised { y_prime, selection, protos })
}

/// Everything up to and including label selection.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub pseudo: Vec<PseudoLabels>,
    pub head: SimHeadParams,
    pub head_log: TrainLog,
    pub refined: Vec<Refined>,
    pub denoised: Vec<Denoised>,
}

pub fn run_refinement(images: &[ImageInput], cfg: &PipelineConfig) -> Result<Refinement> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let pseudo = images
        .par_iter()
        .map(|img| pseudo_label(&img.probs, &img.feat_l, &cfg.label).map_err(|e| in_image(e, &img.id)))
        .collect::<Result<Vec<_>>>()?;
    let feats: Vec<&FeatureMap> = images.iter().map(|i| &i.feat_in).collect();
    let (head, head_log) = fit_head(&feats, &pseudo.iter().collect::<Vec<_>>(), &spec, &cfg.head, cfg.seed)?;
    let refined = images
        .par_iter()
        .zip(&pseudo)
        .map(|(img, pl)| refine_image(&img.feat_in, &pl.p, &head, &spec, &cfg.refine).map_err(|e| in_image(e, &img.id)))
        .collect::<Result<Vec<_>>>()?;
    let denoised = images
        .par_iter()
        .zip(&pseudo)
        .zip(&refined)
        .map(|((img, pl), r)| {
            denoise_image(&img.feat_l, &r.p_prime, pl, &cfg.label, &cfg.denoise).map_err(|e| in_image(e, &img.id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Refinement { pseudo, head, head_log, refined, denoised })
}

/// Adapts the toy segmentor on the selected refined labels.
pub fn fit_toy(
    feats: &[&FeatureMap],
    labels: &[&LabelMask],
    masks: &[&SelectionMask],
    cfg: &AdaptConfig,
    root_seed: u64,
) -> Result<(ToySegmentor, Vec<f64>)> {
    if feats.len() != labels.len() || feats.len() != masks.len() {
        return Err(Error::shape("adapt inputs", &[feats.len(); 2], &[labels.len(), masks.len()]));
    }
    let samples: Vec<AdaptSample<'_>> = feats
        .iter()
        .zip(labels)
        .zip(masks)
        .map(|((feat, labels), mask)| AdaptSample { feat, labels, mask })
        .collect();
    adapt_toy(&samples, cfg, &mut Rng::substream(root_seed, ADAPT_STREAM))
}

/// Ground-truth metrics of each label set the pipeline produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub images: usize,
    /// Thresholded multi-pass mean.
    pub initial: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refined: Option<MetricReport>,
    /// Thresholded toy-segmentor predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapted: Option<MetricReport>,
    /// Fraction of pixels (over all classes) selected to supervise adaptation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_fraction: Option<f64>,
}

impl Report {
    pub fn new(
        truth: &[&LabelMask],
        initial: &[&LabelMask],
        refined: Option<&[&LabelMask]>,
        adapted: Option<&[&LabelMask]>,
        selection: Option<&[&Tensor]>,
    ) -> Result<Self> {
        let over = |preds: &[&LabelMask]| -> Result<MetricReport> {
            if preds.len() != truth.len() {
                return Err(Error::shape("evaluated images", &[truth.len()], &[preds.len()]));
            }
            let pairs: Vec<_> = preds.iter().copied().zip(truth.iter().copied()).collect();
            MetricReport::over_images(&pairs)
        };
        let selected_fraction = selection.map(|masks| {
            let (on, total) = masks.iter().fold((0usize, 0usize), |(on, total), m| {
                (on + m.data().iter().filter(|&&x| x == 1.0).count(), total + m.data().len())
            });
            on as f64 / total.max(1) as f64
        });
        Ok(Self {
            images: truth.len(),
            initial: over(initial)?,
            refined: refined.map(over).transpose()?,
            adapted: adapted.map(over).transpose()?,
            selected_fraction,
        })
    }
}

pub(crate) fn in_image(e: Error, id: &str) -> Error {
    match e {
        Error::File { .. } => e,
        other => Error::File {
            path: format!("images/{id}").into(),
            source: Box::new(other),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_corpus, Preset, ScenarioConfig};

    fn corpus(preset: Preset, images: usize, seed: u64) -> Vec<ImageInput> {
        let cfg = ScenarioConfig { images, ..ScenarioConfig::preset(preset, seed) };
        generate_corpus(&cfg)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| ImageInput {
                id: format!("img{i:03}"),
                feat_in: s.features.clone(),
                feat_l: s.features,
                probs: s.probs,
                truth: Some(s.truth),
            })
            .collect()
    }

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.head.epochs = 2;
        cfg.neighborhood.radius = 2.0;
        cfg
    }

    #[test]
    fn noiseless_corpus_is_left_intact() {
        let images = corpus(Preset::Noiseless, 2, 4);
        let run = run_refinement(&images, &small_config()).unwrap();
        for (img, d) in images.iter().zip(&run.denoised) {
            assert_eq!(&run.pseudo[0].y.grid(), &d.y_prime.grid());
            let truth = img.truth.as_ref().unwrap();
            assert!(crate::metrics::dice(&d.y_prime, truth, 1).unwrap() > 95.0);
        }
    }

    #[test]
    fn refinement_is_deterministic() {
        let images = corpus(Preset::PaperLike, 3, 8);
        let a = run_refinement(&images, &small_config()).unwrap();
        let b = run_refinement(&images, &small_config()).unwrap();
        assert_eq!(a.head, b.head);
        for (x, y) in a.refined.iter().zip(&b.refined) {
            assert!(x.p_prime.tensor().bitwise_eq(y.p_prime.tensor()));
        }
    }

    #[test]
    fn calibration_off_keeps_revised_map() {
        let images = corpus(Preset::PaperLike, 1, 2);
        let mut cfg = small_config();
        cfg.refine.calibrate = false;
        let run = run_refinement(&images, &cfg).unwrap();
        assert_eq!(run.refined[0].p_re, run.refined[0].p_prime);
    }

    #[test]
    fn calibrated_channels_peak_at_one() {
        let images = corpus(Preset::PaperLike, 1, 3);
        let run = run_refinement(&images, &small_config()).unwrap();
        for c in 0..2 {
            let max = run.refined[0].p_prime.channel(c).into_iter().fold(0f32, f32::max);
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn report_counts_selection() {
        let images = corpus(Preset::Noiseless, 1, 1);
        let truth = images[0].truth.as_ref().unwrap();
        let r = Report::new(&[truth], &[truth], Some(&[truth]), None, Some(&[truth.tensor()])).unwrap();
        assert_eq!(r.initial.avg.dice, 100.0);
        assert_eq!(r.refined.unwrap().avg.asd, Some(0.0));
        let frac = truth.data().iter().filter(|&&x| x == 1.0).count() as f64 / truth.data().len() as f64;
        assert_eq!(r.selected_fraction, Some(frac));
        assert!(r.adapted.is_none());
    }
}
