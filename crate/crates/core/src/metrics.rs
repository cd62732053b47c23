//! Dice coefficient and average surface distance.
//!
//! The boundary of a mask is the set of foreground pixels with at least one
//! background 4-neighbor; pixels outside the image count as background. The
//! average surface distance is the mean over both boundary sets of each
//! boundary pixel's Euclidean distance to the nearest boundary pixel of the
//! other mask:
//!
//! ```text
//! ASD(A, B) = (sum_{a in dA} d(a, dB) + sum_{b in dB} d(b, dA)) / (|dA| + |dB|)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelMask;
use crate::tensor::Grid;

/// Display names for the channels of a two-class fundus corpus.
pub const FUNDUS_CLASSES: [&str; 2] = ["cup", "disc"];

fn check_pair(a: &LabelMask, b: &LabelMask, class: usize) -> Result<Grid> {
    let g = a.grid();
    if b.grid() != g {
        return Err(Error::shape("metric", &g.shape(), &b.grid().shape()));
    }
    if class >= g.channels {
        return Err(Error::Config(format!("class {class} out of range ({} channels)", g.channels)));
    }
    Ok(g)
}

/// Dice overlap in percent; two empty masks score 100.
pub fn dice(a: &LabelMask, b: &LabelMask, class: usize) -> Result<f64> {
    let g = check_pair(a, b, class)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for v in 0..g.pixels() {
        let idx = g.at(v, class);
        let (x, y) = (a.data()[idx] == 1.0, b.data()[idx] == 1.0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (na + nb) as f64)
}

/// Boundary pixels (flat indices) of channel `class`.
pub fn boundary(mask: &LabelMask, class: usize) -> Vec<usize> {
    let g = mask.grid();
    let fg = |y: i64, x: i64| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < g.height
            && (x as usize) < g.width
            && mask.data()[g.at(y as usize * g.width + x as usize, class)] == 1.0
    };
    (0..g.pixels())
        .filter(|&v| {
            let (y, x) = ((v / g.width) as i64, (v % g.width) as i64);
            fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))
        })
        .collect()
}

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let Some(start) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = start;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k == 0 cannot occur: z[0] is -inf.
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_distance_transform(height: usize, width: usize, seeds: &[usize]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; height * width];
    for &s in seeds {
        grid[s] = 0.0;
    }
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut col = vec![0f64; height];
    let mut col_out = vec![0f64; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; width];
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

/// Symmetric average surface distance in pixels.
pub fn asd(a: &LabelMask, b: &LabelMask, class: usize) -> Result<f64> {
    let g = check_pair(a, b, class)?;
    let (ba, bb) = (boundary(a, class), boundary(b, class));
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "average surface distance of class {class} needs two nonempty masks"
        )));
    }
    let dt_a = squared_distance_transform(g.height, g.width, &ba);
    let dt_b = squared_distance_transform(g.height, g.width, &bb);
    let total: f64 = ba.iter().map(|&v| dt_b[v].sqrt()).sum::<f64>() + bb.iter().map(|&v| dt_a[v].sqrt()).sum::<f64>();
    Ok(total / (ba.len() + bb.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    /// `None` when either mask is empty.
    pub asd: Option<f64>,
}

/// Per-class and averaged metrics, serialized as
/// `{"cup": {..}, "disc": {..}, "avg": {..}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub classes: BTreeMap<String, ClassMetrics>,
    pub avg: ClassMetrics,
}

pub fn class_name(class: usize, channels: usize) -> String {
    if channels == FUNDUS_CLASSES.len() {
        FUNDUS_CLASSES[class].to_string()
    } else {
        format!("class{class}")
    }
}

impl MetricReport {
    /// Averages per-class metrics over a set of images.
    pub fn over_images(pairs: &[(&LabelMask, &LabelMask)]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::UndefinedMetric("no images to evaluate".into()))?;
        let channels = first.0.grid().channels;
        let mut classes = BTreeMap::new();
        let mut dice_avg = 0.0;
        let mut asd_vals = Vec::new();
        for c in 0..channels {
            let mut d_sum = 0.0;
            let mut a_vals = Vec::new();
            for (pred, truth) in pairs {
                d_sum += dice(pred, truth, c)?;
                match asd(pred, truth, c) {
                    Ok(v) => a_vals.push(v),
                    Err(Error::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            let d = d_sum / pairs.len() as f64;
            let a = (!a_vals.is_empty()).then(|| a_vals.iter().sum::<f64>() / a_vals.len() as f64);
            dice_avg += d / channels as f64;
            asd_vals.extend(a);
            classes.insert(class_name(c, channels), ClassMetrics { dice: d, asd: a });
        }
        let asd_avg = (asd_vals.len() == channels).then(|| asd_vals.iter().sum::<f64>() / channels as f64);
        Ok(Self {
            classes,
            avg: ClassMetrics { dice: dice_avg, asd: asd_avg },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> LabelMask {
        let mut data = vec![0f32; h * w];
        for &v in on {
            data[v] = 1.0;
        }
        LabelMask::new(Tensor::new(vec![h, w, 1], data).unwrap()).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, 4, &[0, 1, 2, 3]);
        assert_eq!(dice(&a, &a, 0).unwrap(), 100.0);
        assert_eq!(dice(&a, &mask(4, 4, &[8, 9]), 0).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(4, 4, &[2, 3, 4, 5]), 0).unwrap(), 50.0);
        assert_eq!(dice(&mask(4, 4, &[]), &mask(4, 4, &[]), 0).unwrap(), 100.0);
    }

    #[test]
    fn dice_shape_mismatch() {
        assert!(matches!(dice(&mask(2, 2, &[]), &mask(2, 3, &[]), 0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn asd_cases() {
        let a = mask(5, 5, &[6, 7, 8, 11, 12, 13]);
        assert_eq!(asd(&a, &a, 0).unwrap(), 0.0);
        assert_eq!(asd(&mask(3, 7, &[8]), &mask(3, 7, &[11]), 0).unwrap(), 3.0);
        assert!(matches!(asd(&a, &mask(5, 5, &[]), 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let all: Vec<usize> = (0..25).collect();
        let b = boundary(&mask(5, 5, &all), 0);
        assert_eq!(b.len(), 16);
        assert!(!b.contains(&12));
    }

    fn brute_asd(a: &LabelMask, b: &LabelMask) -> f64 {
        let w = a.grid().width;
        let (ba, bb) = (boundary(a, 0), boundary(b, 0));
        let near = |p: usize, set: &[usize]| {
            set.iter()
                .map(|&q| {
                    let dy = (p / w) as f64 - (q / w) as f64;
                    let dx = (p % w) as f64 - (q % w) as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let total: f64 = ba.iter().map(|&p| near(p, &bb)).sum::<f64>() + bb.iter().map(|&p| near(p, &ba)).sum::<f64>();
        total / (ba.len() + bb.len()) as f64
    }

    fn blob(rng: &mut Rng, h: usize, w: usize) -> LabelMask {
        let (cy, cx) = (rng.uniform(3.0, h as f64 - 3.0), rng.uniform(3.0, w as f64 - 3.0));
        let (ry, rx) = (rng.uniform(1.5, 7.0), rng.uniform(1.5, 7.0));
        let on: Vec<usize> = (0..h * w)
            .filter(|&v| {
                let (y, x) = ((v / w) as f64, (v % w) as f64);
                ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0 || rng.unit() < 0.02
            })
            .collect();
        mask(h, w, &on)
    }

    #[test]
    fn asd_matches_brute_force_on_random_blobs() {
        let mut rng = Rng::new(99);
        for _ in 0..30 {
            let (a, b) = (blob(&mut rng, 20, 23), blob(&mut rng, 20, 23));
            let fast = asd(&a, &b, 0).unwrap();
            assert!((fast - brute_asd(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn report_json_layout() {
        let data = vec![1.0, 1.0, 0.0, 1.0];
        let m = LabelMask::new(Tensor::new(vec![1, 2, 2], data).unwrap()).unwrap();
        let r = MetricReport::over_images(&[(&m, &m)]).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["cup"]["dice"], 100.0);
        assert_eq!(json["disc"]["asd"], 0.0);
        assert_eq!(json["avg"]["dice"], 100.0);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_translation_invariant(
            a in prop::collection::vec(any::<bool>(), 64),
            b in prop::collection::vec(any::<bool>(), 64),
        ) {
            let on = |bits: &[bool]| bits.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect::<Vec<_>>();
            let (ma, mb) = (mask(8, 8, &on(&a)), mask(8, 8, &on(&b)));
            prop_assert_eq!(dice(&ma, &mb, 0).unwrap(), dice(&mb, &ma, 0).unwrap());
            prop_assert_eq!(dice(&ma, &ma, 0).unwrap(), 100.0);
            // Shift both into the interior of a larger canvas, away from the border.
            let shift = |idx: &[usize], dy: usize, dx: usize| idx.iter().map(|&v| (v / 8 + dy) * 16 + v % 8 + dx).collect::<Vec<_>>();
            let (sa, sb) = (mask(16, 16, &shift(&on(&a), 2, 3)), mask(16, 16, &shift(&on(&b), 2, 3)));
            let (ta, tb) = (mask(16, 16, &shift(&on(&a), 5, 6)), mask(16, 16, &shift(&on(&b), 5, 6)));
            prop_assert_eq!(dice(&sa, &sb, 0).unwrap(), dice(&ta, &tb, 0).unwrap());
            if let (Ok(x), Ok(y)) = (asd(&sa, &sb, 0), asd(&sb, &sa, 0)) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((x - asd(&ta, &tb, 0).unwrap()).abs() < 1e-12);
                prop_assert_eq!(asd(&sa, &sa, 0).unwrap(), 0.0);
            }
        }
    }
}
