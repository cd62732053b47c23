//! File-backed pipeline stages.
//!
//! A corpus directory holds one bundle per image:
//!
//! ```text
//! <corpus>/images/<id>/probs.npy     [K, H, W, C]
//! <corpus>/images/<id>/feat_l.npy    [H, W, D]
//! <corpus>/images/<id>/feat_in.npy   [H, W, D_in]
//! <corpus>/images/<id>/gt.npy        [H, W, C]   (optional; needed by `evaluate`)
//! <corpus>/images/<id>/meta.json
//! ```
//!
//! Every stage reads from the corpus and the work directory, writes its
//! outputs under the work directory and records `manifests/<stage>.json`
//! with the SHA-256 of every file read and written. Manifests carry no
//! timestamps or absolute paths, so equal inputs give byte-equal outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{SelectionMask, ToySegmentor};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::labeling::{
    DistanceMaps, FeatureMap, LabelMask, ProbMap, ProbStack, PrototypeSet, ReliabilityMask, UncertaintyMap,
};
use crate::metrics::FUNDUS_CLASSES;
use crate::npy;
use crate::pipeline::{
    denoise_image, fit_head, fit_toy, in_image, pseudo_label, refine_image, PseudoLabels, Report,
    ADAPT_STREAM, HEAD_STREAM, SYNTH_STREAM,
};
use crate::rng::derive_seed;
use crate::simhead::{SimHeadParams, SimilarityField};
use crate::synthgen::generate_corpus;
use crate::tensor::Tensor;

pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_DIR: &str = "manifests";
pub const HEAD_DIR: &str = "head";
pub const TOY_DIR: &str = "toy";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Root {
    /// The corpus directory.
    In,
    /// The work directory.
    Out,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub root: Root,
    /// Relative to `root`, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    /// Seed of the stage's own random stream, if it draws any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null", default)]
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn load(work: &Path, stage: &str) -> Result<Self> {
        let path = work.join(MANIFEST_DIR).join(format!("{stage}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::MissingInput {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Json(e).in_file(path))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads and writes stage files while recording their hashes.
struct StageIo<'a> {
    corpus: &'a Path,
    work: &'a Path,
    inputs: BTreeMap<(Root, String), String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> StageIo<'a> {
    fn new(corpus: &'a Path, work: &'a Path) -> Self {
        Self {
            corpus,
            work,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn resolve(&self, root: Root, rel: &str) -> PathBuf {
        match root {
            Root::In => self.corpus.join(rel),
            Root::Out => self.work.join(rel),
        }
    }

    fn read_bytes(&mut self, root: Root, rel: &str) -> Result<Vec<u8>> {
        let path = self.resolve(root, rel);
        let bytes = fs::read(&path).map_err(|e| Error::MissingInput {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        self.inputs.insert((root, rel.to_string()), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn tensor(&mut self, root: Root, rel: &str) -> Result<Tensor> {
        let bytes = self.read_bytes(root, rel)?;
        npy::decode(&bytes).map_err(|e| e.in_file(self.resolve(root, rel)))
    }

    /// Loads and validates a tensor through `wrap`.
    fn typed<T>(&mut self, root: Root, rel: &str, wrap: impl FnOnce(Tensor) -> Result<T>) -> Result<T> {
        let t = self.tensor(root, rel)?;
        wrap(t).map_err(|e| e.in_file(self.resolve(root, rel)))
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.work.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).map_err(|e| Error::Io(e).in_file(&path))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write(&mut self, rel: &str, t: &Tensor) -> Result<()> {
        self.write_bytes(rel, &npy::encode(t))
    }

    /// Records files written by other code under the work directory.
    fn record_output(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.work.join(rel))?;
        self.outputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(
        self,
        stage: &str,
        cfg: &PipelineConfig,
        stage_seed: Option<u64>,
        summary: serde_json::Value,
    ) -> Result<Manifest> {
        let manifest = Manifest {
            stage: stage.to_string(),
            seed: cfg.seed,
            stage_seed,
            config: cfg.echo(),
            inputs: self
                .inputs
                .into_iter()
                .map(|((root, path), sha256)| FileRecord { root, path, sha256 })
                .collect(),
            outputs: self
                .outputs
                .into_iter()
                .map(|(path, sha256)| FileRecord { root: Root::Out, path, sha256 })
                .collect(),
            summary,
        };
        let dir = self.work.join(MANIFEST_DIR);
        fs::create_dir_all(&dir)?;
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(dir.join(format!("{stage}.json")), text)?;
        Ok(manifest)
    }
}

fn refs(v: &[LabelMask]) -> Vec<&LabelMask> {
    v.iter().collect()
}

fn image_file(id: &str, name: &str) -> String {
    format!("{IMAGES_DIR}/{id}/{name}.npy")
}

/// Image ids of a corpus, sorted.
pub fn list_images(corpus: &Path) -> Result<Vec<String>> {
    let dir = corpus.join(IMAGES_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| Error::MissingInput {
        path: dir.clone(),
        reason: e.to_string(),
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::MissingInput {
            path: dir,
            reason: "no image directories".into(),
        });
    }
    Ok(ids)
}

/// `meta.json` of one image bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: String,
    pub passes: usize,
    /// Channel names in order.
    pub classes: Vec<String>,
    /// Source of each feature file.
    #[serde(default)]
    pub layers: BTreeMap<String, String>,
}

/// Writes a synthetic corpus under `corpus`. Image `i` is named `img{i:03}`.
pub fn synth(corpus: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let stage_seed = derive_seed(cfg.seed, SYNTH_STREAM);
    let scen = crate::synthgen::ScenarioConfig { seed: stage_seed, ..cfg.synth.clone() };
    let scenarios = generate_corpus(&scen)?;
    let mut io = StageIo::new(corpus, corpus);
    for (i, s) in scenarios.iter().enumerate() {
        let id = format!("img{i:03}");
        io.write(&image_file(&id, "probs"), s.probs.tensor())?;
        io.write(&image_file(&id, "feat_l"), s.features.tensor())?;
        io.write(&image_file(&id, "feat_in"), s.features.tensor())?;
        io.write(&image_file(&id, "gt"), s.truth.tensor())?;
        let meta = ImageMeta {
            id: id.clone(),
            passes: scen.passes,
            classes: FUNDUS_CLASSES.iter().map(|s| s.to_string()).collect(),
            layers: [("feat_l", "synthetic"), ("feat_in", "synthetic")]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        let text = serde_json::to_string_pretty(&meta)? + "\n";
        io.write_bytes(&format!("{IMAGES_DIR}/{id}/meta.json"), text.as_bytes())?;
    }
    let summary = serde_json::json!({ "images": scenarios.len() });
    io.finish("synth", cfg, Some(stage_seed), summary)
}

fn check_meta(io: &mut StageIo<'_>, id: &str, probs: &ProbStack) -> Result<()> {
    let rel = format!("{IMAGES_DIR}/{id}/meta.json");
    if !io.resolve(Root::In, &rel).exists() {
        log::debug!("image {id} has no meta.json");
        return Ok(());
    }
    let bytes = io.read_bytes(Root::In, &rel)?;
    let meta: ImageMeta = serde_json::from_slice(&bytes).map_err(|e| Error::Json(e).in_file(io.resolve(Root::In, &rel)))?;
    if meta.passes != probs.passes() || meta.classes.len() != probs.grid().channels {
        return Err(Error::shape(
            "meta.json passes/classes",
            &[meta.passes, meta.classes.len()],
            &[probs.passes(), probs.grid().channels],
        )
        .in_file(io.resolve(Root::In, &rel)));
    }
    Ok(())
}

fn save_pseudo(io: &mut StageIo<'_>, id: &str, pl: &PseudoLabels) -> Result<()> {
    io.write(&image_file(id, "p"), pl.p.tensor())?;
    io.write(&image_file(id, "u"), pl.u.tensor())?;
    io.write(&image_file(id, "y"), pl.y.tensor())?;
    io.write(&image_file(id, "m"), pl.m.tensor())?;
    io.write(&image_file(id, "d_fg"), &pl.dist.d_fg)?;
    io.write(&image_file(id, "d_bg"), &pl.dist.d_bg)?;
    io.write(&image_file(id, "protos"), &pl.protos.to_tensor()?)
}

fn load_pseudo(io: &mut StageIo<'_>, id: &str) -> Result<PseudoLabels> {
    Ok(PseudoLabels {
        p: io.typed(Root::Out, &image_file(id, "p"), ProbMap::new)?,
        u: io.typed(Root::Out, &image_file(id, "u"), UncertaintyMap::new)?,
        y: io.typed(Root::Out, &image_file(id, "y"), LabelMask::new)?,
        m: io.typed(Root::Out, &image_file(id, "m"), ReliabilityMask::new)?,
        protos: io.typed(Root::Out, &image_file(id, "protos"), |t| PrototypeSet::from_tensor(&t))?,
        dist: DistanceMaps::new(
            io.tensor(Root::Out, &image_file(id, "d_fg"))?,
            io.tensor(Root::Out, &image_file(id, "d_bg"))?,
        )?,
    })
}

/// Aggregates passes, computes prototypes and reliability masks.
pub fn pseudo_label_stage(corpus: &Path, work: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let ids = list_images(corpus)?;
    let mut io = StageIo::new(corpus, work);
    let mut inputs = Vec::with_capacity(ids.len());
    for id in &ids {
        let probs = io.typed(Root::In, &image_file(id, "probs"), ProbStack::new)?;
        check_meta(&mut io, id, &probs)?;
        let feat = io.typed(Root::In, &image_file(id, "feat_l"), FeatureMap::new)?;
        inputs.push((probs, feat));
    }
    let results = ids
        .par_iter()
        .zip(&inputs)
        .map(|(id, (probs, feat))| pseudo_label(probs, feat, &cfg.label).map_err(|e| in_image(e, id)))
        .collect::<Result<Vec<_>>>()?;
    let mut reliable = 0usize;
    for (id, pl) in ids.iter().zip(&results) {
        save_pseudo(&mut io, id, pl)?;
        reliable += pl.m.data().iter().filter(|&&x| x == 1.0).count();
    }
    let total: usize = results.iter().map(|pl| pl.m.data().len()).sum();
    let summary = serde_json::json!({
        "images": ids.len(),
        "reliable_fraction": reliable as f64 / total.max(1) as f64,
    });
    io.finish("pseudo-label", cfg, None, summary)
}

/// Trains the similarity head on the stage-one labels.
pub fn train_head_stage(corpus: &Path, work: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let ids = list_images(corpus)?;
    let mut io = StageIo::new(corpus, work);
    let mut feats = Vec::with_capacity(ids.len());
    let mut pseudo = Vec::with_capacity(ids.len());
    for id in &ids {
        feats.push(io.typed(Root::In, &image_file(id, "feat_in"), FeatureMap::new)?);
        pseudo.push(load_pseudo(&mut io, id)?);
    }
    let (params, log) = fit_head(
        &feats.iter().collect::<Vec<_>>(),
        &pseudo.iter().collect::<Vec<_>>(),
        &spec,
        &cfg.head,
        cfg.seed,
    )?;
    let stage_seed = derive_seed(cfg.seed, HEAD_STREAM);
    let head_dir = work.join(HEAD_DIR);
    params.save(&head_dir, spec.radius(), stage_seed, cfg.head.epochs)?;
    for c in 0..params.num_classes() {
        io.record_output(&format!("{HEAD_DIR}/class{c}_weight.npy"))?;
        io.record_output(&format!("{HEAD_DIR}/class{c}_bias.npy"))?;
    }
    io.record_output(&format!("{HEAD_DIR}/head.json"))?;
    let summary = serde_json::json!({
        "epoch_loss": log.epoch_loss,
        "final_terms": log.final_terms,
    });
    io.finish("train-head", cfg, Some(stage_seed), summary)
}

fn load_head(io: &mut StageIo<'_>) -> Result<SimHeadParams> {
    let (params, _) = SimHeadParams::load(&io.work.join(HEAD_DIR))?;
    io.read_bytes(Root::Out, &format!("{HEAD_DIR}/head.json"))?;
    for c in 0..params.num_classes() {
        io.read_bytes(Root::Out, &format!("{HEAD_DIR}/class{c}_weight.npy"))?;
        io.read_bytes(Root::Out, &format!("{HEAD_DIR}/class{c}_bias.npy"))?;
    }
    Ok(params)
}

/// Revises and calibrates the stage-one probabilities.
pub fn refine_stage(corpus: &Path, work: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let ids = list_images(corpus)?;
    let mut io = StageIo::new(corpus, work);
    let params = load_head(&mut io)?;
    let mut inputs = Vec::with_capacity(ids.len());
    for id in &ids {
        let feat = io.typed(Root::In, &image_file(id, "feat_in"), FeatureMap::new)?;
        let p = io.typed(Root::Out, &image_file(id, "p"), ProbMap::new)?;
        inputs.push((feat, p));
    }
    let results = ids
        .par_iter()
        .zip(&inputs)
        .map(|(id, (feat, p))| refine_image(feat, p, &params, &spec, &cfg.refine).map_err(|e| in_image(e, id)))
        .collect::<Result<Vec<_>>>()?;
    for (id, r) in ids.iter().zip(&results) {
        io.write(&image_file(id, "sim"), &SimilarityField::stack(&r.sim)?)?;
        io.write(&image_file(id, "p_re"), r.p_re.tensor())?;
        io.write(&image_file(id, "p_prime"), r.p_prime.tensor())?;
    }
    let summary = serde_json::json!({ "images": ids.len(), "calibrated": cfg.refine.calibrate });
    io.finish("refine", cfg, None, summary)
}

/// Thresholds the refined probabilities and selects reliable labels.
pub fn denoise_stage(corpus: &Path, work: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let ids = list_images(corpus)?;
    let mut io = StageIo::new(corpus, work);
    let mut inputs = Vec::with_capacity(ids.len());
    for id in &ids {
        let feat = io.typed(Root::In, &image_file(id, "feat_l"), FeatureMap::new)?;
        let p_prime = io.typed(Root::Out, &image_file(id, "p_prime"), ProbMap::new)?;
        let pl = load_pseudo(&mut io, id)?;
        inputs.push((feat, p_prime, pl));
    }
    let results = ids
        .par_iter()
        .zip(&inputs)
        .map(|(id, (feat, p_prime, pl))| {
            denoise_image(feat, p_prime, pl, &cfg.label, &cfg.denoise).map_err(|e| in_image(e, id))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut selected = 0usize;
    let mut total = 0usize;
    for (id, d) in ids.iter().zip(&results) {
        io.write(&image_file(id, "y_prime"), d.y_prime.tensor())?;
        io.write(&image_file(id, "m_prime"), d.selection.combined.tensor())?;
        io.write(&image_file(id, "m_prime_pixel"), d.selection.pixel.tensor())?;
        io.write(&image_file(id, "m_prime_class"), d.selection.class.tensor())?;
        io.write(&image_file(id, "protos_prime"), &d.protos.to_tensor()?)?;
        selected += d.selection.combined.data().iter().filter(|&&x| x == 1.0).count();
        total += d.selection.combined.data().len();
    }
    let summary = serde_json::json!({
        "images": ids.len(),
        "selected_fraction": selected as f64 / total.max(1) as f64,
    });
    io.finish("denoise", cfg, None, summary)
}

/// Adapts the toy segmentor and writes its predictions.
pub fn adapt_stage(corpus: &Path, work: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let ids = list_images(corpus)?;
    let mut io = StageIo::new(corpus, work);
    let mut feats = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    let mut masks = Vec::with_capacity(ids.len());
    for id in &ids {
        feats.push(io.typed(Root::In, &image_file(id, "feat_l"), FeatureMap::new)?);
        labels.push(io.typed(Root::Out, &image_file(id, "y_prime"), LabelMask::new)?);
        masks.push(io.typed(Root::Out, &image_file(id, "m_prime"), SelectionMask::new)?);
    }
    let (model, losses) = fit_toy(
        &feats.iter().collect::<Vec<_>>(),
        &labels.iter().collect::<Vec<_>>(),
        &masks.iter().collect::<Vec<_>>(),
        &cfg.adapt,
        cfg.seed,
    )?;
    model.save(&work.join(TOY_DIR))?;
    io.record_output(&format!("{TOY_DIR}/weight.npy"))?;
    io.record_output(&format!("{TOY_DIR}/bias.npy"))?;
    let preds = feats
        .par_iter()
        .map(|f| Ok((model.predict(f)?, model.predict_labels(f, cfg.adapt.threshold)?)))
        .collect::<Result<Vec<_>>>()?;
    for (id, (prob, labels)) in ids.iter().zip(&preds) {
        io.write(&image_file(id, "pred"), prob.tensor())?;
        io.write(&image_file(id, "y_toy"), labels.tensor())?;
    }
    let summary = serde_json::json!({ "epoch_loss": losses });
    io.finish("adapt", cfg, Some(derive_seed(cfg.seed, ADAPT_STREAM)), summary)
}

/// Scores every label set present in the work directory against `gt.npy`.
///
/// Stage-one labels are required; refined and adapted labels are scored
/// when their stages have run.
pub fn evaluate_stage(corpus: &Path, work: &Path, cfg: &PipelineConfig) -> Result<Report> {
    let ids = list_images(corpus)?;
    let mut io = StageIo::new(corpus, work);
    let load_all = |io: &mut StageIo<'_>, name: &str, root: Root| -> Result<Vec<LabelMask>> {
        ids.iter().map(|id| io.typed(root, &image_file(id, name), LabelMask::new)).collect()
    };
    let optional = |io: &mut StageIo<'_>, name: &str| -> Result<Option<Vec<LabelMask>>> {
        let present = ids.iter().all(|id| work.join(image_file(id, name)).exists());
        present.then(|| load_all(io, name, Root::Out)).transpose()
    };
    let truth = load_all(&mut io, "gt", Root::In)?;
    let initial = load_all(&mut io, "y", Root::Out)?;
    let refined = optional(&mut io, "y_prime")?;
    let adapted = optional(&mut io, "y_toy")?;
    let selection = if refined.is_some() {
        let masks: Vec<Tensor> = ids
            .iter()
            .map(|id| io.typed(Root::Out, &image_file(id, "m_prime"), |t| SelectionMask::new(t).map(SelectionMask::into_tensor)))
            .collect::<Result<_>>()?;
        Some(masks)
    } else {
        None
    };
    let report = Report::new(
        &refs(&truth),
        &refs(&initial),
        refined.as_deref().map(refs).as_deref(),
        adapted.as_deref().map(refs).as_deref(),
        selection.as_ref().map(|m| m.iter().collect::<Vec<_>>()).as_deref(),
    )?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    io.write_bytes(REPORT_FILE, text.as_bytes())?;
    io.finish("evaluate", cfg, None, serde_json::Value::Null)?;
    Ok(report)
}

/// All stages in order. Without a corpus, one is synthesized under `work/corpus`.
pub fn run_all(corpus: Option<&Path>, work: &Path, cfg: &PipelineConfig) -> Result<Report> {
    cfg.validate()?;
    let synthesized;
    let corpus = match corpus {
        Some(c) => c,
        None => {
            synthesized = work.join("corpus");
            synth(&synthesized, cfg)?;
            &synthesized
        }
    };
    pseudo_label_stage(corpus, work, cfg)?;
    train_head_stage(corpus, work, cfg)?;
    refine_stage(corpus, work, cfg)?;
    denoise_stage(corpus, work, cfg)?;
    adapt_stage(corpus, work, cfg)?;
    evaluate_stage(corpus, work, cfg)
}

/// Stage names accepted by [`run_stage`], in pipeline order.
pub const STAGES: [&str; 6] = ["pseudo-label", "train-head", "refine", "denoise", "adapt", "evaluate"];

pub fn run_stage(stage: &str, corpus: &Path, work: &Path, cfg: &PipelineConfig) -> Result<()> {
    match stage {
        "pseudo-label" => pseudo_label_stage(corpus, work, cfg).map(drop),
        "train-head" => train_head_stage(corpus, work, cfg).map(drop),
        "refine" => refine_stage(corpus, work, cfg).map(drop),
        "denoise" => denoise_stage(corpus, work, cfg).map(drop),
        "adapt" => adapt_stage(corpus, work, cfg).map(drop),
        "evaluate" => evaluate_stage(corpus, work, cfg).map(drop),
        other => Err(Error::Config(format!("unknown stage {other:?}"))),
    }
}

/// Loads a toy-segmentor bundle written by the adapt stage.
pub fn load_toy(work: &Path) -> Result<ToySegmentor> {
    ToySegmentor::load(&work.join(TOY_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.synth.images = 2;
        cfg.synth.height = 24;
        cfg.synth.width = 24;
        cfg.neighborhood.radius = 2.0;
        cfg.head.epochs = 2;
        cfg.adapt.epochs = 2;
        cfg
    }

    #[test]
    fn synth_corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth(dir.path(), &tiny()).unwrap();
        assert_eq!(list_images(dir.path()).unwrap(), vec!["img000", "img001"]);
        assert_eq!(m.outputs.len(), 10);
        let probs = npy::load_tensor(dir.path().join("images/img000/probs.npy")).unwrap();
        assert_eq!(probs.shape(), &[10, 24, 24, 2]);
        let meta: ImageMeta =
            serde_json::from_str(&fs::read_to_string(dir.path().join("images/img001/meta.json")).unwrap()).unwrap();
        assert_eq!(meta.classes, vec!["cup", "disc"]);
    }

    #[test]
    fn missing_corpus_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = pseudo_label_stage(&dir.path().join("nope"), dir.path(), &tiny()).unwrap_err();
        assert!(matches!(err, Error::MissingInput { .. }), "{err}");
    }

    #[test]
    fn missing_stage_input_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c");
        synth(&corpus, &tiny()).unwrap();
        let err = refine_stage(&corpus, &dir.path().join("w"), &tiny()).unwrap_err().to_string();
        assert!(err.contains("head.json"), "{err}");
    }

    #[test]
    fn meta_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c");
        synth(&corpus, &tiny()).unwrap();
        let meta = corpus.join("images/img000/meta.json");
        let text = fs::read_to_string(&meta).unwrap().replace("\"passes\": 10", "\"passes\": 3");
        fs::write(&meta, text).unwrap();
        let err = pseudo_label_stage(&corpus, &dir.path().join("w"), &tiny()).unwrap_err().to_string();
        assert!(err.contains("meta.json"), "{err}");
    }

    #[test]
    fn manifests_link_every_stage() {
        let dir = tempfile::tempdir().unwrap();
        let work = dir.path().join("w");
        let report = run_all(None, &work, &tiny()).unwrap();
        assert_eq!(report.images, 2);
        assert!(report.refined.is_some() && report.adapted.is_some());

        let corpus_manifest = Manifest::load(&work.join("corpus"), "synth").unwrap();
        let mut produced: BTreeMap<(Root, String), String> = corpus_manifest
            .outputs
            .iter()
            .map(|r| ((Root::In, r.path.clone()), r.sha256.clone()))
            .collect();
        for stage in STAGES {
            let m = Manifest::load(&work, stage).unwrap();
            for input in &m.inputs {
                let key = (input.root, input.path.clone());
                assert_eq!(produced.get(&key), Some(&input.sha256), "{stage}: {key:?}");
            }
            for out in &m.outputs {
                let bytes = fs::read(work.join(&out.path)).unwrap();
                assert_eq!(sha256_hex(&bytes), out.sha256);
                produced.insert((Root::Out, out.path.clone()), out.sha256.clone());
            }
        }
        assert!(produced.contains_key(&(Root::Out, REPORT_FILE.to_string())));

        // Every file in the work directory, manifests aside, is some stage's output.
        let mut stack = vec![work.clone()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let path = e.unwrap().path();
                let rel = path.strip_prefix(&work).unwrap().to_string_lossy().replace('\\', "/");
                if rel.starts_with("corpus") || rel.starts_with(MANIFEST_DIR) {
                    continue;
                }
                if path.is_dir() {
                    stack.push(path);
                } else {
                    assert!(produced.contains_key(&(Root::Out, rel.clone())), "{rel} missing from manifests");
                }
            }
        }
    }
}
