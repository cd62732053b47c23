use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel offset `(dy, dx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Offset {
    pub dy: i32,
    pub dx: i32,
}

impl Offset {
    pub fn neg(self) -> Self {
        Offset {
            dy: -self.dy,
            dx: -self.dx,
        }
    }

    /// True for the canonical half of each `±o` pair: `dy > 0`, or `dy == 0 && dx > 0`.
    pub fn is_forward(self) -> bool {
        self.dy > 0 || (self.dy == 0 && self.dx > 0)
    }
}

/// The disc of offsets within `radius` of a pixel, excluding the pixel itself.
///
/// Offsets are ordered by `(dy, dx)`, so offset `k` and offset
/// `len - 1 - k` are negatives of each other.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodSpec {
    radius: f64,
    offsets: Vec<Offset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborhoodConfig {
    pub radius: f64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self { radius: 4.0 }
    }
}

impl NeighborhoodSpec {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Config(format!("neighborhood.radius = {radius} must be > 0")));
        }
        let reach = radius.floor() as i32;
        let mut offsets = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if (dy, dx) != (0, 0) && ((dy * dy + dx * dx) as f64) <= radius * radius {
                    offsets.push(Offset { dy, dx });
                }
            }
        }
        Ok(Self { radius, offsets })
    }

    pub fn from_config(cfg: &NeighborhoodConfig) -> Result<Self> {
        Self::new(cfg.radius)
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Index of the offset pointing the opposite way.
    #[inline]
    pub fn opposite(&self, k: usize) -> usize {
        self.offsets.len() - 1 - k
    }

    /// Indices of the forward half of the offsets (one per unordered pair).
    pub fn forward(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_forward())
            .map(|(k, _)| k)
    }

    /// Flat index of `pixel + offset[k]` on an `height x width` grid, if in bounds.
    #[inline]
    pub fn neighbor(&self, height: usize, width: usize, pixel: usize, k: usize) -> Option<usize> {
        let o = self.offsets[k];
        let y = (pixel / width) as i64 + o.dy as i64;
        let x = (pixel % width) as i64 + o.dx as i64;
        if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
            None
        } else {
            Some(y as usize * width + x as usize)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_four_has_48_offsets() {
        assert_eq!(NeighborhoodSpec::new(4.0).unwrap().len(), 48);
    }

    #[test]
    fn radius_one_is_four_connected() {
        let s = NeighborhoodSpec::new(1.0).unwrap();
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn offsets_are_symmetric() {
        for r in [1.0, 1.5, 2.0, 3.7, 4.0, 6.0] {
            let s = NeighborhoodSpec::new(r).unwrap();
            for k in 0..s.len() {
                assert_eq!(s.offsets()[s.opposite(k)], s.offsets()[k].neg());
            }
            assert_eq!(s.forward().count() * 2, s.len());
        }
    }

    #[test]
    fn neighbors_respect_bounds() {
        let s = NeighborhoodSpec::new(1.0).unwrap();
        // Offsets sorted: (-1,0), (0,-1), (0,1), (1,0).
        assert_eq!(s.neighbor(3, 3, 0, 0), None);
        assert_eq!(s.neighbor(3, 3, 0, 2), Some(1));
        assert_eq!(s.neighbor(3, 3, 4, 3), Some(7));
        assert_eq!(s.neighbor(3, 3, 8, 2), None);
    }

    #[test]
    fn rejects_non_positive_radius() {
        assert!(NeighborhoodSpec::new(0.0).is_err());
        assert!(NeighborhoodSpec::new(f64::NAN).is_err());
    }
}
