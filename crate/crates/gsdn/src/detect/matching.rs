use serde::{Deserialize, Serialize};

use crate::detect::anchors::AnchorGeometry;
use crate::detect::boxes::{iou3d, Box3D};
use crate::lattice::{Coord, Support};

pub const POSITIVE_IOU: f64 = 0.35;
pub const NEGATIVE_IOU: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Labels for every (voxel row, anchor) pair of one support, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub k: usize,
    pub labels: Vec<AnchorLabel>,
    /// Matched ground-truth index for positives, `u32::MAX` otherwise.
    pub gt_index: Vec<u32>,
    /// Best IoU over all ground truths.
    pub best_iou: Vec<f64>,
}

impl MatchResult {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.labels.len() / self.k
        }
    }

    pub fn label(&self, row: usize, anchor: usize) -> AnchorLabel {
        self.labels[row * self.k + anchor]
    }

    pub fn positive_rows(&self) -> Vec<bool> {
        self.labels
            .chunks(self.k.max(1))
            .map(|c| c.contains(&AnchorLabel::Positive))
            .collect()
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }
}

pub fn label_for(iou: f64) -> AnchorLabel {
    if iou > POSITIVE_IOU {
        AnchorLabel::Positive
    } else if iou < NEGATIVE_IOU {
        AnchorLabel::Negative
    } else {
        AnchorLabel::Ignore
    }
}

/// Assigns every anchor of every voxel in `support` against `gts`.
///
/// Only lattice cells whose anchors can touch a ground-truth box are
/// visited, so the cost follows the ground-truth volume rather than the
/// support size.
pub fn match_anchors(support: &Support, geom: &AnchorGeometry, gts: &[Box3D]) -> MatchResult {
    let k = geom.k();
    let n = support.len();
    let mut best = vec![0.0f64; n * k];
    let mut arg = vec![u32::MAX; n * k];
    let stride = support.stride();
    let reach = geom.max_half_extent(stride);
    let batches = batches_of(support);
    for (gi, g) in gts.iter().enumerate() {
        let mut visit = |row: usize| {
            let c = &support.coords()[row];
            for a in 0..k {
                let iou = iou3d(&geom.anchor(c, stride, a), g);
                let slot = row * k + a;
                if iou > best[slot] {
                    best[slot] = iou;
                    arg[slot] = gi as u32;
                }
            }
        };
        let mut ranges = [(0i64, 0i64); 3];
        let mut cells = 1u128;
        for i in 0..3 {
            let span = reach[i] + 0.5 * g.size[i];
            let lo = ((g.center[i] - span) / geom.voxel_size - stride as f64 / 2.0) / stride as f64;
            let hi = ((g.center[i] + span) / geom.voxel_size - stride as f64 / 2.0) / stride as f64;
            ranges[i] = (lo.floor() as i64, hi.ceil() as i64);
            cells *= (ranges[i].1 - ranges[i].0 + 1).max(0) as u128;
        }
        if cells * batches.len() as u128 > n as u128 {
            (0..n).for_each(&mut visit);
            continue;
        }
        let s = stride as i64;
        for &b in &batches {
            for x in ranges[0].0..=ranges[0].1 {
                for y in ranges[1].0..=ranges[1].1 {
                    for z in ranges[2].0..=ranges[2].1 {
                        let c = Coord::new(b, (x * s) as i32, (y * s) as i32, (z * s) as i32);
                        if let Some(row) = support.row_of(&c) {
                            visit(row as usize);
                        }
                    }
                }
            }
        }
    }
    let labels: Vec<AnchorLabel> = best.iter().map(|&v| label_for(v)).collect();
    for (l, g) in labels.iter().zip(arg.iter_mut()) {
        if *l != AnchorLabel::Positive {
            *g = u32::MAX;
        }
    }
    MatchResult {
        k,
        labels,
        gt_index: arg,
        best_iou: best,
    }
}

fn batches_of(support: &Support) -> Vec<i32> {
    let mut b: Vec<i32> = support.coords().iter().map(|c| c.batch).collect();
    b.dedup();
    b
}
