use serde::{Deserialize, Serialize};

use crate::detect::boxes::Box3D;
use crate::error::{Error, Result};
use crate::lattice::Coord;

pub const DEFAULT_RATIO_SEEDS: [f64; 5] = [1.0, 2.0, 4.0, 0.5, 0.25];

/// Anchor shapes: aspect-ratio seeds and the level-0 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSpec {
    pub ratio_seeds: Vec<f64>,
    /// Anchor base edge at level `l` is `voxel_size · 2^l · anchor_scale`.
    pub anchor_scale: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            ratio_seeds: DEFAULT_RATIO_SEEDS.to_vec(),
            anchor_scale: 1.0,
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio_seeds.is_empty() || self.ratio_seeds.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("ratio seeds must be positive, got {:?}", self.ratio_seeds)));
        }
        if !(self.anchor_scale > 0.0 && self.anchor_scale.is_finite()) {
            return Err(Error::Config(format!("anchor scale must be positive, got {}", self.anchor_scale)));
        }
        Ok(())
    }

    pub fn multipliers(&self) -> Vec<[f64; 3]> {
        ratio_multipliers(&self.ratio_seeds)
    }

    pub fn count(&self) -> usize {
        self.multipliers().len()
    }

    /// Anchors for every ratio at one voxel.
    pub fn geometry(&self, voxel_size: f64) -> AnchorGeometry {
        AnchorGeometry {
            multipliers: self.multipliers(),
            voxel_size,
            scale: self.anchor_scale,
        }
    }
}

/// Unique permutations of `(√a, √a, 1/√a)` for every seed `a`, seeds in
/// order, permutations in the order (odd axis z, y, x). Each triple is
/// rescaled to unit volume so only the aspect ratio varies across anchors.
pub fn ratio_multipliers(seeds: &[f64]) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::new();
    for &a in seeds {
        let norm = a.sqrt().cbrt();
        let (r, q) = (a.sqrt() / norm, 1.0 / (a.sqrt() * norm));
        for m in [[r, r, q], [r, q, r], [q, r, r]] {
            let dup = out.iter().any(|o| o.iter().zip(&m).all(|(x, y)| (x - y).abs() < 1e-12));
            if !dup {
                out.push(m);
            }
        }
    }
    out
}

/// The default 13 anchor aspect ratios.
pub fn anchor_ratios() -> Vec<[f64; 3]> {
    ratio_multipliers(&DEFAULT_RATIO_SEEDS)
}

/// Resolved anchor shapes for placing boxes on lattice voxels.
#[derive(Clone, Debug)]
pub struct AnchorGeometry {
    pub multipliers: Vec<[f64; 3]>,
    pub voxel_size: f64,
    pub scale: f64,
}

impl AnchorGeometry {
    pub fn k(&self) -> usize {
        self.multipliers.len()
    }

    /// Center of a voxel of the given stride, in meters.
    pub fn voxel_center(&self, c: &Coord, stride: i32) -> [f64; 3] {
        let h = stride as f64 / 2.0;
        [c.x, c.y, c.z].map(|v| self.voxel_size * (v as f64 + h))
    }

    pub fn base_size(&self, stride: i32) -> f64 {
        self.voxel_size * stride as f64 * self.scale
    }

    pub fn anchor(&self, c: &Coord, stride: i32, a: usize) -> Box3D {
        let base = self.base_size(stride);
        let m = self.multipliers[a];
        Box3D::new(self.voxel_center(c, stride), m.map(|v| v * base), 0, 1.0)
    }

    /// Largest half-extent of any anchor at this stride, per axis.
    pub fn max_half_extent(&self, stride: i32) -> [f64; 3] {
        let base = self.base_size(stride);
        let mut h = [0.0f64; 3];
        for m in &self.multipliers {
            for i in 0..3 {
                h[i] = h[i].max(0.5 * m[i] * base);
            }
        }
        h
    }
}
