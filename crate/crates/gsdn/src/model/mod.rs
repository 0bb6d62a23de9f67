//! The detector network: residual sparse encoder, generative decoder with
//! sparsity pruning, and per-level anchor and sparsity heads.

mod plan;

pub use plan::{encoder_supports, potential_supports, TargetPlan};

use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParameterStore, Tape, Var};
use crate::detect::{anchor_block_width, AnchorGeometry, AnchorSpec, DecodeLevel};
use crate::error::{Error, Result};
use crate::lattice::{support_union, SparseTensor, Support};
use crate::scalar::{Matrix, Real};
use crate::sparse_ops::{build_kernel_map, ConvKind, BN_EPS};

/// Prior probability behind the initial objectness and sparsity bias.
pub const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Res14,
    Res18,
    Res34,
}

impl Backbone {
    /// Residual blocks at encoder level `l` (1-based).
    pub fn blocks(self, level: usize) -> usize {
        match self {
            Backbone::Res14 => 1,
            Backbone::Res18 => 2,
            Backbone::Res34 => [3, 4, 6, 3][(level - 1).min(3)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub in_channels: usize,
    /// Channels of level 1; level `l` has `base_channels · 2^(l−1)`.
    pub base_channels: usize,
    pub backbone: Backbone,
    pub classes: usize,
    pub tau: f64,
    pub transpose_kernel: usize,
    pub voxel_size: f64,
    pub anchors: AnchorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            in_channels: 4,
            base_channels: 32,
            backbone: Backbone::Res14,
            classes: 5,
            tau: 0.3,
            transpose_kernel: 3,
            voxel_size: 0.05,
            anchors: AnchorSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 || self.levels > 12 {
            return bad(format!("levels must be in 2..=12, got {}", self.levels));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.classes == 0 {
            return bad("channel and class counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.transpose_kernel != 3 {
            return bad(format!("transpose kernel must be 3, got {}", self.transpose_kernel));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel size must be positive, got {}", self.voxel_size));
        }
        self.anchors.validate()
    }

    /// Feature channels at level `l`; level 0 is the input.
    pub fn channels(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels
        } else {
            self.base_channels << (level - 1)
        }
    }

    pub fn anchors_per_voxel(&self) -> usize {
        self.anchors.count()
    }

    pub fn head_width(&self) -> usize {
        anchor_block_width(self.classes) * self.anchors_per_voxel()
    }

    pub fn geometry(&self) -> AnchorGeometry {
        self.anchors.geometry(self.voxel_size)
    }
}

const CONV_KERNEL: usize = 3;

/// Names of every parameter and buffer the model owns, with shapes and whether they train.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    let vol = CONV_KERNEL.pow(3);
    let bn = |out: &mut Vec<(String, Vec<usize>, bool)>, p: &str, c: usize| {
        out.push((format!("{p}.gamma"), vec![c], true));
        out.push((format!("{p}.beta"), vec![c], true));
        out.push((format!("{p}.mean"), vec![c], false));
        out.push((format!("{p}.var"), vec![c], false));
    };
    for l in 1..=cfg.levels {
        let (ci, co) = (cfg.channels(l - 1), cfg.channels(l));
        out.push((format!("enc{l}.down.w"), vec![vol, ci, co], true));
        bn(&mut out, &format!("enc{l}.down.bn"), co);
        for b in 0..cfg.backbone.blocks(l) {
            for j in 1..=2 {
                out.push((format!("enc{l}.block{b}.conv{j}.w"), vec![vol, co, co], true));
                bn(&mut out, &format!("enc{l}.block{b}.bn{j}"), co);
            }
        }
    }
    for l in (1..=cfg.levels).rev() {
        let c = cfg.channels(l);
        out.push((format!("head{l}.anchor.w"), vec![c, cfg.head_width()], true));
        out.push((format!("head{l}.anchor.b"), vec![cfg.head_width()], true));
        out.push((format!("head{l}.sparsity.w"), vec![c, 1], true));
        out.push((format!("head{l}.sparsity.b"), vec![1], true));
        if l > 1 {
            out.push((format!("dec{l}.up.w"), vec![cfg.transpose_kernel.pow(3), c, cfg.channels(l - 1)], true));
            bn(&mut out, &format!("dec{l}.up.bn"), cfg.channels(l - 1));
        }
    }
    out
}

/// Fresh parameters: He-normal weights, unit batch-norm scale, and a
/// rare-event prior on objectness and sparsity biases.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
    let block = anchor_block_width(cfg.classes);
    let mut store = ParameterStore::new();
    for (name, shape, trainable) in parameter_layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".w") {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        } else if name.ends_with(".gamma") || name.ends_with(".var") {
            vec![1.0; n]
        } else if name.ends_with("anchor.b") {
            (0..n).map(|i| if i % block == 0 { prior as f32 } else { 0.0 }).collect()
        } else if name.ends_with("sparsity.b") {
            vec![prior as f32; n]
        } else {
            vec![0.0; n]
        };
        store.add(name, shape, data, trainable)?;
    }
    Ok(store)
}

/// Trainable scalar count.
pub fn count_parameters<T: Real>(store: &ParameterStore<T>) -> usize {
    store.count_parameters()
}

/// One decoder level as recorded on the tape.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: usize,
    /// Support before pruning.
    pub support: Arc<Support>,
    pub anchor_raw: Var,
    pub sparsity_logit: Var,
    pub sparsity_prob: Var,
    pub kept: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Encoder supports, level 1 first.
    pub encoder: Vec<Arc<Support>>,
    /// Decoder levels, coarsest first. Shorter than `levels` when a level
    /// pruned everything.
    pub levels: Vec<LevelOutput>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization; running statistics are reported on the tape.
    Train,
    Eval,
}

/// Extra voxels to keep at a level regardless of predictions.
pub type ForceKeep<'f> = &'f mut dyn FnMut(usize, &Support) -> Result<Vec<bool>>;

struct Ids<'s, T: Real> {
    store: &'s ParameterStore<T>,
}

impl<T: Real> Ids<'_, T> {
    fn get(&self, name: &str) -> Result<ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} missing from store")))
    }
}

fn bn_relu<T: Real>(tape: &mut Tape<'_, T>, ids: &Ids<'_, T>, x: Var, prefix: &str, mode: Mode, relu: bool) -> Result<Var> {
    let y = tape.batch_norm(
        x,
        ids.get(&format!("{prefix}.gamma"))?,
        ids.get(&format!("{prefix}.beta"))?,
        ids.get(&format!("{prefix}.mean"))?,
        ids.get(&format!("{prefix}.var"))?,
        mode == Mode::Train,
        BN_EPS,
    )?;
    Ok(if relu { tape.relu(y) } else { y })
}

/// Runs the encoder. Returns features and supports of `T_1 … T_L`.
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    input: &SparseTensor<T>,
    mode: Mode,
) -> Result<Vec<(Var, Arc<Support>)>> {
    if input.nnz() == 0 {
        return Err(Error::Validation("cannot encode an empty tensor".into()));
    }
    if input.stride() != 1 || input.channels() != cfg.in_channels {
        return Err(Error::Contract(format!(
            "encoder expects stride 1 and {} channels, got stride {} and {}",
            cfg.in_channels,
            input.stride(),
            input.channels()
        )));
    }
    let ids = Ids { store: tape.store() };
    let mut x = tape.input(input.feats().clone());
    let mut support = input.support().clone();
    let mut out = Vec::with_capacity(cfg.levels);
    for l in 1..=cfg.levels {
        let (ci, co) = (cfg.channels(l - 1), cfg.channels(l));
        let (down_sup, down_map) = build_kernel_map(&support, ConvKind::Strided, CONV_KERNEL)?;
        x = tape.conv(x, ids.get(&format!("enc{l}.down.w"))?, down_map, ci, co)?;
        x = bn_relu(tape, &ids, x, &format!("enc{l}.down.bn"), mode, true)?;
        support = down_sup;
        let (_, sub_map) = build_kernel_map(&support, ConvKind::Submanifold, CONV_KERNEL)?;
        for b in 0..cfg.backbone.blocks(l) {
            let p = format!("enc{l}.block{b}");
            let h = tape.conv(x, ids.get(&format!("{p}.conv1.w"))?, sub_map.clone(), co, co)?;
            let h = bn_relu(tape, &ids, h, &format!("{p}.bn1"), mode, true)?;
            let h = tape.conv(h, ids.get(&format!("{p}.conv2.w"))?, sub_map.clone(), co, co)?;
            let h = bn_relu(tape, &ids, h, &format!("{p}.bn2"), mode, false)?;
            let rows = Arc::new((0..support.len() as u32).collect::<Vec<_>>());
            let s = tape.union_add(h, x, rows.clone(), rows, support.len())?;
            x = tape.relu(s);
        }
        out.push((x, support.clone()));
    }
    Ok(out)
}

/// Whether a sparsity logit survives pruning at threshold `tau`.
pub fn keeps(logit: f64, tau: f64) -> bool {
    if tau <= 0.0 {
        true
    } else if tau >= 1.0 {
        false
    } else {
        logit >= (tau / (1.0 - tau)).ln()
    }
}

/// Runs the generative decoder from the coarsest encoder level down.
///
/// `force` may add voxels to the keep mask of each level (teacher forcing).
pub fn decoder_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    encoder: &[(Var, Arc<Support>)],
    tau: f64,
    mode: Mode,
    mut force: Option<ForceKeep<'_>>,
) -> Result<Vec<LevelOutput>> {
    if encoder.len() != cfg.levels {
        return Err(Error::Contract(format!("decoder needs {} encoder levels, got {}", cfg.levels, encoder.len())));
    }
    let ids = Ids { store: tape.store() };
    let mut out = Vec::with_capacity(cfg.levels);
    let (mut cur, mut support) = encoder[cfg.levels - 1].clone();
    for l in (1..=cfg.levels).rev() {
        if l < cfg.levels {
            let (skip, skip_sup) = &encoder[l - 1];
            let u = support_union(&support, skip_sup)?;
            cur = tape.union_add(cur, *skip, Arc::new(u.left_rows), Arc::new(u.right_rows), u.support.len())?;
            support = Arc::new(u.support);
        }
        let anchor_raw = tape.linear(cur, ids.get(&format!("head{l}.anchor.w"))?, Some(ids.get(&format!("head{l}.anchor.b"))?))?;
        let sparsity_logit = tape.linear(cur, ids.get(&format!("head{l}.sparsity.w"))?, Some(ids.get(&format!("head{l}.sparsity.b"))?))?;
        let sparsity_prob = tape.sigmoid(sparsity_logit);
        let mut kept: Vec<bool> = tape.value(sparsity_logit).as_slice().iter().map(|v| keeps(v.as_f64(), tau)).collect();
        if let Some(f) = force.as_mut() {
            let extra = f(l, &support)?;
            if extra.len() != kept.len() {
                return Err(Error::Shape(format!("forced mask of {} rows for {} voxels", extra.len(), kept.len())));
            }
            kept.iter_mut().zip(extra).for_each(|(k, e)| *k |= e);
        }
        let any_kept = kept.iter().any(|&k| k);
        out.push(LevelOutput {
            level: l,
            support: support.clone(),
            anchor_raw,
            sparsity_logit,
            sparsity_prob,
            kept: kept.clone(),
        });
        if l == 1 || !any_kept {
            break;
        }
        let (pruned_sup, rows) = support.filter(&kept)?;
        let pruned = tape.gather_rows(cur, Arc::new(rows));
        let (up_sup, up_map) = build_kernel_map(&pruned_sup, ConvKind::Transposed, cfg.transpose_kernel)?;
        let up = tape.conv(pruned, ids.get(&format!("dec{l}.up.w"))?, up_map, cfg.channels(l), cfg.channels(l - 1))?;
        cur = bn_relu(tape, &ids, up, &format!("dec{l}.up.bn"), mode, true)?;
        support = up_sup;
    }
    Ok(out)
}

/// Encoder and decoder in one call.
pub fn forward<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    input: &SparseTensor<T>,
    tau: f64,
    mode: Mode,
    force: Option<ForceKeep<'_>>,
) -> Result<ForwardOutput> {
    let enc = encoder_forward(tape, cfg, input, mode)?;
    let levels = decoder_forward(tape, cfg, &enc, tau, mode, force)?;
    Ok(ForwardOutput {
        encoder: enc.into_iter().map(|(_, s)| s).collect(),
        levels,
    })
}

/// Decoder output of one level, detached from the tape.
#[derive(Clone, Debug)]
pub struct LevelPrediction {
    pub level: usize,
    pub support: Arc<Support>,
    /// nnz × (c + 7)·k.
    pub anchor_raw: Matrix<f32>,
    pub sparsity_prob: Vec<f32>,
    pub kept: Vec<bool>,
}

impl LevelPrediction {
    pub fn as_decode(&self) -> DecodeLevel<'_> {
        DecodeLevel {
            support: &self.support,
            anchor_raw: &self.anchor_raw,
        }
    }
}

/// Inference pass in eval mode. Levels are ordered coarsest first; every
/// level below one that pruned everything is present and empty.
pub fn predict(store: &ParameterStore<f32>, cfg: &ModelConfig, input: &SparseTensor<f32>, tau: f64) -> Result<Vec<LevelPrediction>> {
    let mut tape = Tape::new(store);
    let out = forward(&mut tape, cfg, input, tau, Mode::Eval, None)?;
    let mut preds: Vec<LevelPrediction> = out
        .levels
        .iter()
        .map(|lv| LevelPrediction {
            level: lv.level,
            support: lv.support.clone(),
            anchor_raw: tape.value(lv.anchor_raw).clone(),
            sparsity_prob: tape.value(lv.sparsity_prob).as_slice().to_vec(),
            kept: lv.kept.clone(),
        })
        .collect();
    let last = preds.last().map_or(cfg.levels + 1, |p| p.level);
    for l in (1..last).rev() {
        preds.push(LevelPrediction {
            level: l,
            support: Arc::new(Support::empty(1 << l)),
            anchor_raw: Matrix::zeros(0, cfg.head_width()),
            sparsity_prob: Vec::new(),
            kept: Vec::new(),
        });
    }
    Ok(preds)
}
