use rustc_hash::{FxHashMap, FxHashSet};

use crate::detect::{match_anchors, sparsity_targets, AnchorLabel, Box3D, LevelTargets, MatchResult};
use crate::error::{Error, Result};
use crate::lattice::{support_union, Coord, Support};
use crate::model::ModelConfig;
use crate::sparse_ops::{output_support, ConvKind};

/// Supports of `T_1 … T_L` computed from coordinates alone.
pub fn encoder_supports(input: &Support, levels: usize) -> Result<Vec<Support>> {
    let mut out: Vec<Support> = Vec::with_capacity(levels);
    for l in 0..levels {
        let prev = if l == 0 { input } else { &out[l - 1] };
        let next = output_support(prev, ConvKind::Strided, 3)?;
        out.push(next);
    }
    Ok(out)
}

/// Decoder supports without pruning: `P_L = supp(T_L)` and
/// `P_l = stencil(P_(l+1)) ∪ supp(T_l)`. Level 1 first.
pub fn potential_supports(encoder: &[Support], kernel: usize) -> Result<Vec<Support>> {
    let n = encoder.len();
    let mut rev: Vec<Support> = Vec::with_capacity(n);
    rev.push(encoder[n - 1].clone());
    for l in (0..n - 1).rev() {
        let up = output_support(rev.last().unwrap_or(&encoder[n - 1]), ConvKind::Transposed, kernel)?;
        rev.push(support_union(&up, &encoder[l])?.support);
    }
    rev.reverse();
    Ok(rev)
}

#[derive(Clone, Debug)]
struct PlanLevel {
    sparsity: FxHashSet<Coord>,
    /// Labels of voxels that own at least one non-negative anchor.
    anchors: FxHashMap<Coord, (Vec<AnchorLabel>, Vec<u32>, Vec<f64>)>,
}

/// Per-scene supervision computed once on the unpruned supports and looked
/// up for whatever supports a forward pass actually produces.
#[derive(Clone, Debug)]
pub struct TargetPlan {
    levels: Vec<PlanLevel>,
    k: usize,
    gts: Vec<Box3D>,
    cfg: ModelConfig,
    positives: Vec<usize>,
}

impl TargetPlan {
    pub fn new(cfg: &ModelConfig, input: &Support, gts: &[Box3D]) -> Result<Self> {
        let enc = encoder_supports(input, cfg.levels)?;
        let pot = potential_supports(&enc, cfg.transpose_kernel)?;
        let geom = cfg.geometry();
        let matches: Vec<MatchResult> = pot.iter().map(|p| match_anchors(p, &geom, gts)).collect();
        let pos: Vec<Vec<bool>> = matches.iter().map(MatchResult::positive_rows).collect();
        let refs: Vec<(&Support, &[bool])> = pot.iter().zip(&pos).map(|(s, p)| (s, p.as_slice())).collect();
        let masks = sparsity_targets(&refs)?;
        let k = geom.k();
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut positives = Vec::with_capacity(cfg.levels);
        for ((p, m), mask) in pot.iter().zip(&matches).zip(&masks) {
            let sparsity = p.coords().iter().zip(mask).filter(|(_, &t)| t).map(|(c, _)| *c).collect();
            let mut anchors = FxHashMap::default();
            for (row, c) in p.coords().iter().enumerate() {
                let r = row * k..(row + 1) * k;
                if m.labels[r.clone()].iter().any(|&l| l != AnchorLabel::Negative) {
                    anchors.insert(*c, (m.labels[r.clone()].to_vec(), m.gt_index[r.clone()].to_vec(), m.best_iou[r].to_vec()));
                }
            }
            positives.push(m.num_positive());
            levels.push(PlanLevel { sparsity, anchors });
        }
        Ok(Self {
            levels,
            k,
            gts: gts.to_vec(),
            cfg: cfg.clone(),
            positives,
        })
    }

    /// Positive anchors per level on the unpruned supports, level 1 first.
    pub fn positive_counts(&self) -> &[usize] {
        &self.positives
    }

    fn level(&self, level: usize) -> Result<&PlanLevel> {
        level
            .checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or_else(|| Error::Contract(format!("no targets for level {level}")))
    }

    /// Sparsity labels of an actual support at `level`.
    pub fn sparsity_mask(&self, level: usize, support: &Support) -> Result<Vec<bool>> {
        let lv = self.level(level)?;
        Ok(support.coords().iter().map(|c| lv.sparsity.contains(c)).collect())
    }

    pub fn matches(&self, level: usize, support: &Support) -> Result<MatchResult> {
        let lv = self.level(level)?;
        let n = support.len() * self.k;
        let mut m = MatchResult {
            k: self.k,
            labels: vec![AnchorLabel::Negative; n],
            gt_index: vec![u32::MAX; n],
            best_iou: vec![0.0; n],
        };
        for (row, c) in support.coords().iter().enumerate() {
            if let Some((l, g, b)) = lv.anchors.get(c) {
                let r = row * self.k..(row + 1) * self.k;
                m.labels[r.clone()].copy_from_slice(l);
                m.gt_index[r.clone()].copy_from_slice(g);
                m.best_iou[r].copy_from_slice(b);
            }
        }
        Ok(m)
    }

    pub fn level_targets(&self, level: usize, support: &Support) -> Result<LevelTargets> {
        LevelTargets::new(
            support,
            &self.cfg.geometry(),
            &self.gts,
            self.sparsity_mask(level, support)?,
            self.matches(level, support)?,
        )
    }
}
