use crate::error::{Error, Result};
use crate::labeling::FeatureMap;
use crate::simhead::NeighborhoodSpec;
use crate::tensor::Tensor;

/// Pairwise similarities `exp(-|f_i - f_j|_1)` from every pixel to its
/// neighbors, for one class channel.
///
/// Stored as `[H, W, O]`; out-of-bounds neighbors hold `0.0`, which no
/// in-bounds similarity can take (those are clamped to at least
/// `f32::MIN_POSITIVE`).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityField {
    height: usize,
    width: usize,
    spec: NeighborhoodSpec,
    values: Vec<f32>,
}

impl SimilarityField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spec(&self) -> &NeighborhoodSpec {
        &self.spec
    }

    /// Similarity between pixel `i` and its `k`-th neighbor; `None` when out of bounds.
    #[inline]
    pub fn get(&self, pixel: usize, k: usize) -> Option<f32> {
        let s = self.values[pixel * self.spec.len() + k];
        (s > 0.0).then_some(s)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Stacks per-class fields into an `[H, W, O, C]` tensor.
    pub fn stack(fields: &[SimilarityField]) -> Result<Tensor> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidTensor("no similarity fields to stack".into()))?;
        let (h, w, o, c) = (first.height, first.width, first.spec.len(), fields.len());
        let mut data = vec![0f32; h * w * o * c];
        for (ci, f) in fields.iter().enumerate() {
            if (f.height, f.width, f.spec.len()) != (h, w, o) {
                return Err(Error::shape("similarity stack", &[h, w, o], &[f.height, f.width, f.spec.len()]));
            }
            for (idx, &s) in f.values.iter().enumerate() {
                data[idx * c + ci] = s;
            }
        }
        Tensor::new(vec![h, w, o, c], data)
    }

    /// Splits an `[H, W, O, C]` tensor back into per-class fields.
    pub fn unstack(t: &Tensor, spec: &NeighborhoodSpec) -> Result<Vec<SimilarityField>> {
        t.expect_ndim(4, "similarity field")?;
        let s = t.shape();
        let (h, w, o, c) = (s[0], s[1], s[2], s[3]);
        if o != spec.len() {
            return Err(Error::shape("similarity offsets", &[spec.len()], &[o]));
        }
        t.expect_range(0.0, 1.0, "similarity field")?;
        let mut fields = Vec::with_capacity(c);
        for ci in 0..c {
            let values: Vec<f32> = t.data().iter().skip(ci).step_by(c).copied().collect();
            for pixel in 0..h * w {
                for k in 0..o {
                    let present = spec.neighbor(h, w, pixel, k).is_some();
                    let v = values[pixel * o + k];
                    if present != (v > 0.0) {
                        return Err(Error::InvalidTensor(format!(
                            "similarity field class {ci}: pixel {pixel} offset {k} has value {v} \
                             but the neighbor is {}",
                            if present { "in bounds" } else { "out of bounds" }
                        )));
                    }
                }
            }
            fields.push(SimilarityField {
                height: h,
                width: w,
                spec: spec.clone(),
                values,
            });
        }
        Ok(fields)
    }
}

/// Similarities of every in-bounds neighbor pair of `fsim`.
pub fn similarity_field(fsim: &FeatureMap, spec: &NeighborhoodSpec) -> SimilarityField {
    let g = fsim.grid();
    let o = spec.len();
    let mut values = vec![0f32; g.pixels() * o];
    for i in 0..g.pixels() {
        let fi = fsim.pixel(i);
        for k in 0..o {
            let Some(j) = spec.neighbor(g.height, g.width, i, k) else {
                continue;
            };
            // Computed in the same order for (i, j) and (j, i), so S is exactly symmetric.
            let (a, b) = if i < j { (fi, fsim.pixel(j)) } else { (fsim.pixel(j), fi) };
            let l1: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
            values[i * o + k] = ((-l1).exp() as f32).max(f32::MIN_POSITIVE);
        }
    }
    SimilarityField {
        height: g.height,
        width: g.width,
        spec: spec.clone(),
        values,
    }
}
