use rustc_hash::FxHashSet;

use crate::error::{Error, Result};
use crate::lattice::{Coord, Support};

/// Sparsity targets per level, finest first.
///
/// `levels[i]` is the support at stride `2^(i+1)` together with the mask of
/// voxels owning a positive anchor. A voxel is a target when it owns a
/// positive anchor or when its 27-stencil at the next finer stride reaches a
/// target voxel there.
pub fn sparsity_targets(levels: &[(&Support, &[bool])]) -> Result<Vec<Vec<bool>>> {
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(levels.len());
    let mut finer: FxHashSet<Coord> = FxHashSet::default();
    for (i, (support, positive)) in levels.iter().enumerate() {
        if positive.len() != support.len() {
            return Err(Error::Shape(format!(
                "level {} has {} positive flags for {} voxels",
                i + 1,
                positive.len(),
                support.len()
            )));
        }
        if i > 0 && support.stride() != 2 * levels[i - 1].0.stride() {
            return Err(Error::Contract(format!(
                "level strides {} and {} are not consecutive",
                levels[i - 1].0.stride(),
                support.stride()
            )));
        }
        let half = support.stride() / 2;
        let mask: Vec<bool> = support
            .coords()
            .iter()
            .zip(positive.iter())
            .map(|(c, &p)| p || (i > 0 && !finer.is_empty() && stencil_hits(c, half, &finer)))
            .collect();
        finer = support
            .coords()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect();
        out.push(mask);
    }
    Ok(out)
}

fn stencil_hits(c: &Coord, step: i32, set: &FxHashSet<Coord>) -> bool {
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                if set.contains(&c.offset([dx * step, dy * step, dz * step])) {
                    return true;
                }
            }
        }
    }
    false
}
