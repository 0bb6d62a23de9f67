//! Detection mathematics: anchors, box coding, IoU, target assignment,
//! losses and merging NMS.

mod anchors;
mod boxes;
mod loss;
mod matching;
mod nms;
mod targets;

pub use anchors::{anchor_ratios, ratio_multipliers, AnchorGeometry, AnchorSpec, DEFAULT_RATIO_SEEDS};
pub use boxes::{decode_box, encode_box, iou3d, Box3D};
pub use loss::{
    anchor_block_width, balanced_ce, detection_loss, LevelTargets, LevelVars, LossBreakdown, LossMode, LossWeights,
    HUBER_DELTA,
};
pub use matching::{label_for, match_anchors, AnchorLabel, MatchResult, NEGATIVE_IOU, POSITIVE_IOU};
pub use nms::{nms_merge, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
pub use targets::sparsity_targets;

use crate::autograd::sigmoid;
use crate::lattice::Support;
use crate::scalar::Matrix;

/// Head output of one decoded level, ready for box extraction.
#[derive(Clone, Copy, Debug)]
pub struct DecodeLevel<'a> {
    pub support: &'a Support,
    pub anchor_raw: &'a Matrix<f32>,
}

/// Turns raw head outputs into merged boxes: every anchor whose objectness
/// probability reaches `score_thresh` becomes a candidate, then `nms_merge`.
pub fn decode_detections(
    levels: &[DecodeLevel<'_>],
    geom: &AnchorGeometry,
    classes: usize,
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Box3D> {
    nms_merge(&candidates(levels, geom, classes, score_thresh), nms_iou, score_thresh)
}

/// Pre-NMS candidates above the score threshold.
pub fn candidates(levels: &[DecodeLevel<'_>], geom: &AnchorGeometry, classes: usize, score_thresh: f64) -> Vec<Box3D> {
    let w = anchor_block_width(classes);
    let mut out = Vec::new();
    for lvl in levels {
        let stride = lvl.support.stride();
        for (row, c) in lvl.support.coords().iter().enumerate() {
            let r = lvl.anchor_raw.row(row);
            for a in 0..geom.k() {
                let block = &r[a * w..(a + 1) * w];
                let score = sigmoid(block[0] as f64);
                if score < score_thresh {
                    continue;
                }
                let class_id = argmax(&block[7..]);
                let offsets: [f64; 6] = std::array::from_fn(|j| block[1 + j] as f64);
                let mut b = decode_box(&offsets, &geom.anchor(c, stride, a));
                b.class_id = class_id;
                b.score = score;
                out.push(b);
            }
        }
    }
    out
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
