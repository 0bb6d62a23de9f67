use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{grad_check, GradCheckReport, ParameterStore};
use crate::detect::{AnchorSpec, Box3D};
use crate::error::{Error, Result};
use crate::lattice::{Coord, SparseTensor, Support};
use crate::model::{encoder_supports, init_parameters, ModelConfig, TargetPlan};
use crate::pipeline::{scene_loss, LossConfig};
use crate::scalar::Matrix;

/// Relative error bound of the full-model check.
pub const GRADCHECK_TOL: f64 = 1e-6;
pub const GRADCHECK_EPS: f64 = 1e-5;

/// A model small enough to probe every weight by finite differences. Pruning
/// is disabled so perturbations cannot change the decoded supports.
pub fn gradcheck_config(classes: usize) -> ModelConfig {
    ModelConfig {
        levels: 2,
        base_channels: 2,
        classes,
        tau: 0.0,
        voxel_size: 1.0,
        anchors: AnchorSpec {
            ratio_seeds: vec![1.0, 4.0],
            anchor_scale: 1.0,
        },
        ..ModelConfig::default()
    }
}

/// A random scene of `voxels` distinct voxels in an 8³ window with two
/// ground-truth boxes placed near anchors so that positives exist.
pub fn gradcheck_scene(cfg: &ModelConfig, voxels: usize, seed: u64) -> Result<(SparseTensor<f64>, Vec<Box3D>)> {
    if !(2..=512).contains(&voxels) {
        return Err(Error::Config(format!("gradcheck scene needs 2..=512 voxels, got {voxels}")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(voxels);
    while coords.len() < voxels {
        let c = Coord::new(0, rng.random_range(0..8), rng.random_range(0..8), rng.random_range(0..8));
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    coords.sort();
    let feats: Vec<f64> = (0..voxels * cfg.in_channels).map(|_| rng.random_range(0.0..1.0)).collect();
    let support = Support::new(coords, 1)?;
    let enc = encoder_supports(&support, cfg.levels)?;
    let geom = cfg.geometry();
    let mut gts = Vec::new();
    for (l, s) in enc.iter().enumerate().rev() {
        let c = s.coords()[rng.random_range(0..s.len())];
        let mut b = geom.anchor(&c, s.stride(), rng.random_range(0..geom.k()));
        b.center = std::array::from_fn(|i| b.center[i] + 0.1 * b.size[i]);
        b.size = b.size.map(|v| v * 1.15);
        b.class_id = l % cfg.classes;
        gts.push(b);
    }
    let tensor = SparseTensor::new(Arc::new(support), Matrix::from_vec(voxels, cfg.in_channels, feats))?;
    Ok((tensor, gts))
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    pub voxels: usize,
    pub parameters: usize,
    pub positives: usize,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOL
    }
}

/// Finite-difference check of the teacher-forced detection loss over every
/// trainable parameter of `cfg`, in double precision with train-mode BN.
pub fn gradcheck_model(cfg: &ModelConfig, loss: &LossConfig, voxels: usize, seed: u64) -> Result<GradcheckOutcome> {
    cfg.validate()?;
    let (input, gts) = gradcheck_scene(cfg, voxels, seed)?;
    let plan = TargetPlan::new(cfg, input.support(), &gts)?;
    let mut store: ParameterStore<f64> = init_parameters(cfg, seed)?.cast();
    // small random BN affine terms keep every branch of the graph exercised
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") {
            for v in store.data_mut(id) {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let report = grad_check(&mut store, GRADCHECK_EPS, |tape| Ok(scene_loss(tape, cfg, loss, &input, &plan)?.0))?;
    Ok(GradcheckOutcome {
        report,
        voxels,
        parameters: store.count_parameters(),
        positives: plan.positive_counts().iter().sum(),
    })
}
