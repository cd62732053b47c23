use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::FeatureMap;
use crate::npy::{load_tensor, save_tensor};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-class 1x1 projection `f_sim = W^T f + b`.
///
/// `weight` is row-major `[d_in, d_sim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProjection {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimHeadParams {
    pub d_in: usize,
    pub d_sim: usize,
    pub use_bias: bool,
    pub classes: Vec<ClassProjection>,
}

/// Sidecar written next to the parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub d_in: usize,
    pub d_sim: usize,
    pub classes: usize,
    pub bias: bool,
    pub radius: f64,
    pub seed: u64,
    pub epochs: usize,
}

impl SimHeadParams {
    /// Weights uniform in `±1/sqrt(d_in)`, zero bias.
    pub fn init(d_in: usize, d_sim: usize, classes: usize, use_bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let classes = (0..classes)
            .map(|_| ClassProjection {
                weight: (0..d_in * d_sim).map(|_| rng.uniform(-bound, bound)).collect(),
                bias: vec![0.0; d_sim],
            })
            .collect();
        Self {
            d_in,
            d_sim,
            use_bias,
            classes,
        }
    }

    /// `W = I`, `b = 0` for every class (requires `d_in == d_sim`).
    pub fn identity(dim: usize, classes: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for k in 0..dim {
            weight[k * dim + k] = 1.0;
        }
        Self {
            d_in: dim,
            d_sim: dim,
            use_bias: true,
            classes: vec![
                ClassProjection {
                    weight,
                    bias: vec![0.0; dim],
                };
                classes
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Parameters per class when flattened: weights then bias.
    pub fn class_len(&self) -> usize {
        self.d_in * self.d_sim + self.d_sim
    }

    /// All parameters, class by class.
    pub fn flatten(&self) -> Vec<f64> {
        self.classes
            .iter()
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let n = self.class_len();
        let w = self.d_in * self.d_sim;
        for (c, chunk) in self.classes.iter_mut().zip(flat.chunks(n)) {
            c.weight.copy_from_slice(&chunk[..w]);
            c.bias.copy_from_slice(&chunk[w..]);
        }
    }

    /// Rounds every parameter to the nearest `f32`, the precision parameters are stored at.
    pub fn round_to_f32(&mut self) {
        for c in &mut self.classes {
            for x in c.weight.iter_mut().chain(c.bias.iter_mut()) {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Projects `f64` features `[pixels, d_in]` into `[pixels, d_sim]`.
    pub(crate) fn project_f64(&self, class: usize, feats: &[f64]) -> Vec<f64> {
        let head = &self.classes[class];
        let pixels = feats.len() / self.d_in;
        let mut out = vec![0.0; pixels * self.d_sim];
        for (f, a) in feats.chunks_exact(self.d_in).zip(out.chunks_exact_mut(self.d_sim)) {
            if self.use_bias {
                a.copy_from_slice(&head.bias);
            }
            for (&fk, row) in f.iter().zip(head.weight.chunks_exact(self.d_sim)) {
                for (ai, &w) in a.iter_mut().zip(row) {
                    *ai += fk * w;
                }
            }
        }
        out
    }

    pub fn save(&self, dir: &Path, meta_radius: f64, seed: u64, epochs: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (c, head) in self.classes.iter().enumerate() {
            save_tensor(
                &Tensor::from_f64(vec![self.d_in, self.d_sim], &head.weight)?,
                dir.join(format!("class{c}_weight.npy")),
            )?;
            save_tensor(
                &Tensor::from_f64(vec![self.d_sim], &head.bias)?,
                dir.join(format!("class{c}_bias.npy")),
            )?;
        }
        let meta = HeadMeta {
            d_in: self.d_in,
            d_sim: self.d_sim,
            classes: self.classes.len(),
            bias: self.use_bias,
            radius: meta_radius,
            seed,
            epochs,
        };
        fs::write(dir.join("head.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, HeadMeta)> {
        let meta_path = dir.join("head.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::MissingInput {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;
        let meta: HeadMeta =
            serde_json::from_str(&text).map_err(|e| Error::Json(e).in_file(&meta_path))?;
        let mut classes = Vec::with_capacity(meta.classes);
        for c in 0..meta.classes {
            let wp = dir.join(format!("class{c}_weight.npy"));
            let bp = dir.join(format!("class{c}_bias.npy"));
            let w = load_tensor(&wp)?;
            let b = load_tensor(&bp)?;
            if w.shape() != [meta.d_in, meta.d_sim] {
                return Err(Error::shape("head weight", &[meta.d_in, meta.d_sim], w.shape()).in_file(wp));
            }
            if b.shape() != [meta.d_sim] {
                return Err(Error::shape("head bias", &[meta.d_sim], b.shape()).in_file(bp));
            }
            classes.push(ClassProjection {
                weight: w.data().iter().map(|&x| x as f64).collect(),
                bias: b.data().iter().map(|&x| x as f64).collect(),
            });
        }
        Ok((
            Self {
                d_in: meta.d_in,
                d_sim: meta.d_sim,
                use_bias: meta.bias,
                classes,
            },
            meta,
        ))
    }
}

pub(crate) fn features_f64(feat: &FeatureMap) -> Vec<f64> {
    feat.data().iter().map(|&x| x as f64).collect()
}

/// Applies class `class`'s projection to every pixel.
pub fn project_features(feat: &FeatureMap, params: &SimHeadParams, class: usize) -> Result<FeatureMap> {
    if feat.depth() != params.d_in {
        return Err(Error::shape("project_features depth", &[params.d_in], &[feat.depth()]));
    }
    if class >= params.num_classes() {
        return Err(Error::Config(format!(
            "class {class} out of range for a head with {} classes",
            params.num_classes()
        )));
    }
    let g = feat.grid();
    let out = params.project_f64(class, &features_f64(feat));
    FeatureMap::new(Tensor::from_f64(vec![g.height, g.width, params.d_sim], &out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(h: usize, w: usize, d: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(Tensor::new(vec![h, w, d], data).unwrap()).unwrap()
    }

    #[test]
    fn identity_projection() {
        let f = feat(2, 2, 3, (0..12).map(|x| x as f32 * 0.5 - 2.0).collect());
        let out = project_features(&f, &SimHeadParams::identity(3, 1), 0).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn zero_projection() {
        let f = feat(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut p = SimHeadParams::identity(2, 1);
        p.unflatten(&vec![0.0; p.class_len()]);
        let out = project_features(&f, &p, 0).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_dense_matmul() {
        let mut rng = Rng::new(11);
        let (h, w, d_in, d_sim) = (3, 4, 5, 2);
        let data: Vec<f32> = (0..h * w * d_in).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let f = feat(h, w, d_in, data.clone());
        let mut params = SimHeadParams::init(d_in, d_sim, 2, true, &mut rng);
        params.classes[1].bias = vec![0.25, -1.0];
        let out = project_features(&f, &params, 1).unwrap();
        let head = &params.classes[1];
        for v in 0..h * w {
            for s in 0..d_sim {
                let mut acc = head.bias[s];
                for k in 0..d_in {
                    acc += data[v * d_in + k] as f64 * head.weight[k * d_sim + s];
                }
                assert!((out.pixel(v)[s] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn depth_mismatch() {
        let f = feat(1, 1, 2, vec![0.0, 0.0]);
        let p = SimHeadParams::identity(3, 1);
        assert!(matches!(project_features(&f, &p, 0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = SimHeadParams::init(4, 3, 2, true, &mut Rng::new(5));
        p.round_to_f32();
        p.save(dir.path(), 4.0, 5, 16).unwrap();
        let (back, meta) = SimHeadParams::load(dir.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(meta.d_sim, 3);
        assert_eq!(meta.epochs, 16);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = SimHeadParams::init(9, 4, 2, true, &mut Rng::new(1));
        let b = SimHeadParams::init(9, 4, 2, true, &mut Rng::new(1));
        assert_eq!(a, b);
        assert!(a.flatten().iter().all(|x| x.abs() <= 1.0 / 3.0));
    }
}
