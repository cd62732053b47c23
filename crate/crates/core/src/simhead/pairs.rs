use crate::error::{Error, Result};
use crate::labeling::{LabelMask, ReliabilityMask};
use crate::simhead::NeighborhoodSpec;

/// An unordered pixel pair: `j` is the `offset`-th neighbor of `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub i: u32,
    pub j: u32,
    pub offset: u16,
}

/// Reliable neighbor pairs of one class channel, split by label agreement.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub fg_fg: Vec<Pair>,
    pub bg_bg: Vec<Pair>,
    pub fg_bg: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.fg_fg.len() + self.bg_bg.len() + self.fg_bg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds the reversed copy of every pair.
    pub fn with_reversed(&self, spec: &NeighborhoodSpec) -> Self {
        let both = |v: &[Pair]| -> Vec<Pair> {
            v.iter()
                .flat_map(|p| {
                    [
                        *p,
                        Pair {
                            i: p.j,
                            j: p.i,
                            offset: spec.opposite(p.offset as usize) as u16,
                        },
                    ]
                })
                .collect()
        };
        Self {
            fg_fg: both(&self.fg_fg),
            bg_bg: both(&self.bg_bg),
            fg_bg: both(&self.fg_bg),
        }
    }
}

/// Partitions the in-bounds pairs of reliable pixels of class `class`.
///
/// Each unordered pair appears once, enumerated through the forward half of
/// the offsets (`dy > 0`, or `dy == 0 && dx > 0`).
pub fn pair_labels(
    y: &LabelMask,
    m: &ReliabilityMask,
    spec: &NeighborhoodSpec,
    class: usize,
) -> Result<PairSet> {
    let g = y.grid();
    if m.grid() != g {
        return Err(Error::shape("pair_labels", &g.shape(), &m.grid().shape()));
    }
    if class >= g.channels {
        return Err(Error::Config(format!("class {class} out of range ({} channels)", g.channels)));
    }
    let forward: Vec<usize> = spec.forward().collect();
    let mut pairs = PairSet::default();
    for i in 0..g.pixels() {
        if m.data()[g.at(i, class)] != 1.0 {
            continue;
        }
        let yi = y.data()[g.at(i, class)];
        for &k in &forward {
            let Some(j) = spec.neighbor(g.height, g.width, i, k) else {
                continue;
            };
            if m.data()[g.at(j, class)] != 1.0 {
                continue;
            }
            let yj = y.data()[g.at(j, class)];
            let pair = Pair {
                i: i as u32,
                j: j as u32,
                offset: k as u16,
            };
            match (yi == 1.0, yj == 1.0) {
                (true, true) => pairs.fg_fg.push(pair),
                (false, false) => pairs.bg_bg.push(pair),
                _ => pairs.fg_bg.push(pair),
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn mask<T>(h: usize, w: usize, data: Vec<f32>, f: fn(Tensor) -> Result<T>) -> T {
        f(Tensor::new(vec![h, w, 1], data).unwrap()).unwrap()
    }

    #[test]
    fn uniform_foreground() {
        let spec = NeighborhoodSpec::new(2.0).unwrap();
        let y = mask(4, 4, vec![1.0; 16], LabelMask::new);
        let m = mask(4, 4, vec![1.0; 16], ReliabilityMask::new);
        let p = pair_labels(&y, &m, &spec, 0).unwrap();
        assert!(!p.fg_fg.is_empty());
        assert!(p.bg_bg.is_empty() && p.fg_bg.is_empty());
    }

    #[test]
    fn checkerboard_horizontal_pairs_are_mixed() {
        let spec = NeighborhoodSpec::new(1.0).unwrap();
        let labels: Vec<f32> = (0..25).map(|v| ((v / 5 + v % 5) % 2) as f32).collect();
        let y = mask(5, 5, labels, LabelMask::new);
        let m = mask(5, 5, vec![1.0; 25], ReliabilityMask::new);
        let p = pair_labels(&y, &m, &spec, 0).unwrap();
        let right = spec.offsets().iter().position(|o| (o.dy, o.dx) == (0, 1)).unwrap() as u16;
        let horizontal: Vec<_> = p.fg_bg.iter().filter(|q| q.offset == right).collect();
        assert_eq!(horizontal.len(), 20);
        assert!(p.fg_fg.iter().chain(&p.bg_bg).all(|q| q.offset != right));
    }

    #[test]
    fn unreliable_pixels_excluded() {
        let spec = NeighborhoodSpec::new(1.0).unwrap();
        let y = mask(1, 3, vec![1.0; 3], LabelMask::new);
        let m = mask(1, 3, vec![1.0, 0.0, 1.0], ReliabilityMask::new);
        assert!(pair_labels(&y, &m, &spec, 0).unwrap().is_empty());
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = Rng::new(17);
        let spec = NeighborhoodSpec::new(2.3).unwrap();
        for _ in 0..10 {
            let (h, w) = (6, 6);
            let yv: Vec<f32> = (0..36).map(|_| (rng.unit() < 0.5) as u8 as f32).collect();
            let mv: Vec<f32> = (0..36).map(|_| (rng.unit() < 0.7) as u8 as f32).collect();
            let p = pair_labels(
                &mask(h, w, yv.clone(), LabelMask::new),
                &mask(h, w, mv.clone(), ReliabilityMask::new),
                &spec,
                0,
            )
            .unwrap();
            // All unordered pixel pairs within the radius.
            let (mut ff, mut bb, mut fb) = (0, 0, 0);
            for a in 0..36usize {
                for b in a + 1..36 {
                    let (ay, ax, by, bx) = ((a / w) as f64, (a % w) as f64, (b / w) as f64, (b % w) as f64);
                    let d2 = (ay - by).powi(2) + (ax - bx).powi(2);
                    if d2 > 2.3 * 2.3 || mv[a] != 1.0 || mv[b] != 1.0 {
                        continue;
                    }
                    match (yv[a] == 1.0, yv[b] == 1.0) {
                        (true, true) => ff += 1,
                        (false, false) => bb += 1,
                        _ => fb += 1,
                    }
                }
            }
            assert_eq!((p.fg_fg.len(), p.bg_bg.len(), p.fg_bg.len()), (ff, bb, fb));
        }
    }
}
