//! Browser bindings for three detector building blocks: scene voxelization
//! with generative stencil expansion, anchor placement and IoU labeling, and
//! box merging. Every export takes plain numbers or JSON and returns a JSON
//! string shaped `{"ok": ...}` or `{"error": "..."}`.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use gsdn::data::{synth_scene, SynthSpec};
use gsdn::detect::{iou3d, label_for, nms_merge, AnchorLabel, AnchorSpec, Box3D};
use gsdn::lattice::Coord;
use gsdn::model::{ModelConfig, TargetPlan};
use gsdn::{Error, Result};

/// Flags of a top-down cell: any voxel of the column was present in the
/// encoder, only generated by the decoder stencil, or a sparsity target.
pub const CELL_ENCODER: u8 = 1;
pub const CELL_GENERATED: u8 = 2;
pub const CELL_TARGET: u8 = 4;

#[derive(Clone, Debug, Serialize)]
pub struct LevelView {
    pub level: usize,
    pub stride: i32,
    pub encoder_nnz: usize,
    /// Voxels after stencil expansion and union with the encoder skip.
    pub potential_nnz: usize,
    pub target_nnz: usize,
    pub positive_anchors: usize,
    /// Top-down columns as `[x, y, flags]` in voxel units.
    pub cells: Vec<[i32; 3]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SceneView {
    pub voxel_size: f64,
    pub room: [f64; 3],
    /// Every n-th point as `[x, y, z, r, g, b]`.
    pub points: Vec<[f64; 6]>,
    pub input_nnz: usize,
    pub boxes: Vec<Box3D>,
    pub levels: Vec<LevelView>,
}

fn model_config(voxel_size: f64, levels: usize, anchor_scale: f64) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        levels,
        voxel_size,
        anchors: AnchorSpec {
            anchor_scale,
            ..AnchorSpec::default()
        },
        ..ModelConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Synthesizes a scene, voxelizes it and lays out the unpruned decoder
/// supports with their sparsity targets per level.
pub fn scene_view(seed: u64, voxel_size: f64, levels: usize, anchor_scale: f64, max_points: usize) -> Result<SceneView> {
    let cfg = model_config(voxel_size, levels, anchor_scale)?;
    let spec = SynthSpec {
        seed,
        ..SynthSpec::default()
    };
    let scene = synth_scene(&spec)?;
    let q = scene.voxelize(voxel_size)?;
    let input = q.tensor.support().as_ref().clone();
    let enc = gsdn::model::encoder_supports(&input, levels)?;
    let pot = gsdn::model::potential_supports(&enc, cfg.transpose_kernel)?;
    let plan = TargetPlan::new(&cfg, &input, &scene.gt_boxes)?;

    let mut views = Vec::with_capacity(levels);
    for (i, (e, p)) in enc.iter().zip(&pot).enumerate() {
        let mask = plan.sparsity_mask(i + 1, p)?;
        let mut cols: std::collections::BTreeMap<(i32, i32), u8> = Default::default();
        for (c, &t) in p.coords().iter().zip(&mask) {
            let f = cols.entry((c.x, c.y)).or_default();
            *f |= if e.contains(c) { CELL_ENCODER } else { CELL_GENERATED };
            if t {
                *f |= CELL_TARGET;
            }
        }
        views.push(LevelView {
            level: i + 1,
            stride: p.stride(),
            encoder_nnz: e.len(),
            potential_nnz: p.len(),
            target_nnz: mask.iter().filter(|&&t| t).count(),
            positive_anchors: plan.positive_counts()[i],
            cells: cols.into_iter().map(|((x, y), f)| [x, y, f as i32]).collect(),
        });
    }
    let step = scene.points.len().div_ceil(max_points.max(1)).max(1);
    let points = scene
        .points
        .iter()
        .enumerate()
        .step_by(step)
        .map(|(i, p)| {
            let c = scene.colors.as_ref().map_or([160, 160, 160], |c| c[i]);
            [p[0], p[1], p[2], c[0] as f64, c[1] as f64, c[2] as f64]
        })
        .collect();
    Ok(SceneView {
        voxel_size,
        room: spec.room,
        points,
        input_nnz: input.len(),
        boxes: scene.gt_boxes,
        levels: views,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AnchorView {
    pub anchor: Box3D,
    pub iou: f64,
    pub label: AnchorLabel,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnchorsView {
    /// Lattice voxel at the requested stride holding the query point.
    pub voxel: [i32; 3],
    pub stride: i32,
    pub anchors: Vec<AnchorView>,
}

/// Anchors of the level-`level` voxel containing `point`, scored against `gt`.
pub fn anchors_at(point: [f64; 3], level: u32, voxel_size: f64, anchor_scale: f64, gt: &Box3D) -> Result<AnchorsView> {
    if level > 10 {
        return Err(Error::Config(format!("level must be at most 10, got {level}")));
    }
    let spec = AnchorSpec {
        anchor_scale,
        ..AnchorSpec::default()
    };
    spec.validate()?;
    if !(voxel_size > 0.0 && voxel_size.is_finite()) || !gt.is_valid() {
        return Err(Error::Validation("voxel size and ground-truth box must be positive and finite".into()));
    }
    let stride = 1i32 << level;
    let geom = spec.geometry(voxel_size);
    let v = point.map(|p| (p / voxel_size).floor() as i32);
    let c = Coord::new(0, v[0], v[1], v[2]).decimate(stride);
    let anchors = (0..geom.k())
        .map(|a| {
            let anchor = geom.anchor(&c, stride, a);
            let iou = iou3d(&anchor, gt);
            AnchorView {
                anchor,
                iou,
                label: label_for(iou),
            }
        })
        .collect();
    Ok(AnchorsView {
        voxel: c.xyz(),
        stride,
        anchors,
    })
}

#[derive(Clone, Debug, Deserialize)]
pub struct MergeRequest {
    pub boxes: Vec<Box3D>,
    pub iou: f64,
    pub score_thresh: f64,
}

pub fn merge(req: &MergeRequest) -> Result<Vec<Box3D>> {
    if !(0.0..=1.0).contains(&req.iou) {
        return Err(Error::Config(format!("merge IoU must lie in [0, 1], got {}", req.iou)));
    }
    Ok(nms_merge(&req.boxes, req.iou, req.score_thresh))
}

fn respond<T: Serialize>(r: Result<T>) -> String {
    let v = match r {
        Ok(ok) => serde_json::json!({ "ok": ok }),
        Err(e) => serde_json::json!({ "error": e.to_string() }),
    };
    v.to_string()
}

#[wasm_bindgen(js_name = sceneView)]
pub fn scene_view_json(seed: u32, voxel_size: f64, levels: u32, anchor_scale: f64, max_points: u32) -> String {
    respond(scene_view(seed as u64, voxel_size, levels as usize, anchor_scale, max_points as usize))
}

/// `gt_json` is a single box: `{"class_id", "center", "size"}`.
#[wasm_bindgen(js_name = anchorsAt)]
pub fn anchors_at_json(x: f64, y: f64, z: f64, level: u32, voxel_size: f64, anchor_scale: f64, gt_json: &str) -> String {
    respond(
        serde_json::from_str::<Box3D>(gt_json)
            .map_err(Error::from)
            .and_then(|gt| anchors_at([x, y, z], level, voxel_size, anchor_scale, &gt)),
    )
}

/// `request_json` is `{"boxes": [...], "iou": f64, "score_thresh": f64}`.
#[wasm_bindgen(js_name = nmsMerge)]
pub fn merge_json(request_json: &str) -> String {
    respond(serde_json::from_str::<MergeRequest>(request_json).map_err(Error::from).and_then(|r| merge(&r)))
}
