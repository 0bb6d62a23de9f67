use std::cmp::Ordering;

use crate::detect::boxes::{iou3d, Box3D};

pub const DEFAULT_NMS_IOU: f64 = 0.2;
pub const DEFAULT_SCORE_THRESH: f64 = 0.05;

fn rank(a: &Box3D, b: &Box3D) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.center[0].total_cmp(&b.center[0]))
        .then_with(|| a.center[1].total_cmp(&b.center[1]))
        .then_with(|| a.center[2].total_cmp(&b.center[2]))
}

/// Greedy per-class suppression where each kept box absorbs the boxes it
/// suppresses as a score-weighted mean of center and size.
///
/// A merged box that overlaps an already emitted box above the threshold is
/// dropped along with its cluster, so survivors stay pairwise separated.
/// Output is ordered by score, then center.
pub fn nms_merge(boxes: &[Box3D], iou_thresh: f64, score_thresh: f64) -> Vec<Box3D> {
    let mut candidates: Vec<Box3D> = boxes.iter().filter(|b| b.score >= score_thresh && b.is_valid()).copied().collect();
    candidates.sort_by(|a, b| a.class_id.cmp(&b.class_id).then_with(|| rank(a, b)));
    let mut out = Vec::new();
    let mut start = 0;
    while start < candidates.len() {
        let class = candidates[start].class_id;
        let end = start + candidates[start..].iter().take_while(|b| b.class_id == class).count();
        let mut pending: Vec<Box3D> = candidates[start..end].to_vec();
        let mut emitted: Vec<Box3D> = Vec::new();
        while !pending.is_empty() {
            let top = pending[0];
            let (cluster, rest): (Vec<Box3D>, Vec<Box3D>) = pending[1..].iter().partition(|b| iou3d(&top, b) > iou_thresh);
            let merged = weighted_merge(&top, &cluster);
            if emitted.iter().all(|e| iou3d(e, &merged) <= iou_thresh) {
                emitted.push(merged);
            }
            pending = rest;
        }
        out.extend(emitted);
        start = end;
    }
    out.sort_by(rank);
    out
}

fn weighted_merge(top: &Box3D, cluster: &[Box3D]) -> Box3D {
    if cluster.is_empty() {
        return *top;
    }
    let all = || std::iter::once(top).chain(cluster.iter());
    let total: f64 = all().map(|b| b.score).sum();
    let weight = |b: &Box3D| if total > 0.0 { b.score / total } else { 1.0 / (cluster.len() + 1) as f64 };
    let mut m = *top;
    for i in 0..3 {
        m.center[i] = all().map(|b| weight(b) * b.center[i]).sum();
        m.size[i] = all().map(|b| weight(b) * b.size[i]).sum();
    }
    m
}
