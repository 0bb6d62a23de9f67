use std::time::Instant;

use serde::Serialize;

use crate::autograd::ParameterStore;
use crate::data::SceneBundle;
use crate::detect::{decode_detections, Box3D, DecodeLevel};
use crate::error::Result;
use crate::eval::SceneDetections;
use crate::lattice::SparseTensor;
use crate::model::{predict, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LevelStats {
    pub level: usize,
    pub nnz: usize,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub boxes: Vec<Box3D>,
    /// Coarsest level first.
    pub levels: Vec<LevelStats>,
    pub forward_ms: f64,
    pub post_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferSettings {
    pub tau: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

/// Full inference on a voxelized scene: forward pass, decoding and merging.
pub fn detect_tensor(store: &ParameterStore<f32>, cfg: &ModelConfig, input: &SparseTensor<f32>, s: &InferSettings) -> Result<Detection> {
    if input.nnz() == 0 {
        return Ok(Detection {
            boxes: Vec::new(),
            levels: Vec::new(),
            forward_ms: 0.0,
            post_ms: 0.0,
        });
    }
    let t0 = Instant::now();
    let levels = predict(store, cfg, input, s.tau)?;
    let t1 = Instant::now();
    let dl: Vec<DecodeLevel<'_>> = levels.iter().map(|l| l.as_decode()).collect();
    let boxes = decode_detections(&dl, &cfg.geometry(), cfg.classes, s.score_thresh, s.nms_iou);
    let t2 = Instant::now();
    Ok(Detection {
        boxes,
        levels: levels
            .iter()
            .map(|l| LevelStats {
                level: l.level,
                nnz: l.support.len(),
                kept: l.kept.iter().filter(|&&k| k).count(),
            })
            .collect(),
        forward_ms: (t1 - t0).as_secs_f64() * 1e3,
        post_ms: (t2 - t1).as_secs_f64() * 1e3,
    })
}

pub fn detect_scene(store: &ParameterStore<f32>, cfg: &ModelConfig, scene: &SceneBundle, s: &InferSettings) -> Result<Detection> {
    if scene.points.is_empty() {
        return detect_tensor(store, cfg, &SparseTensor::empty(1, cfg.in_channels), s);
    }
    let q = scene.voxelize(cfg.voxel_size)?;
    detect_tensor(store, cfg, &q.tensor, s)
}

/// Detections paired with ground truth for every scene, ready for AP.
pub fn detect_all<'a>(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    scenes: impl IntoIterator<Item = (&'a SparseTensor<f32>, &'a [Box3D])>,
    s: &InferSettings,
) -> Result<Vec<SceneDetections>> {
    scenes
        .into_iter()
        .map(|(input, gts)| {
            Ok(SceneDetections {
                predictions: detect_tensor(store, cfg, input, s)?.boxes,
                gts: gts.to_vec(),
            })
        })
        .collect()
}
