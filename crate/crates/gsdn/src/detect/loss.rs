use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, PROB_CLAMP};
use crate::detect::anchors::AnchorGeometry;
use crate::detect::boxes::{encode_box, Box3D};
use crate::detect::matching::{AnchorLabel, MatchResult};
use crate::error::{Error, Result};
use crate::lattice::Support;
use crate::scalar::{Matrix, Real};

pub const HUBER_DELTA: f64 = 1.0;

/// Width of one anchor block in the head output: objectness, six box
/// offsets, then class logits.
pub fn anchor_block_width(classes: usize) -> usize {
    7 + classes
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Positives and negatives averaged separately, then halved.
    #[default]
    Bce,
    /// Plain binary cross entropy averaged over all labels.
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub sparsity: f64,
    pub anchor: f64,
    pub class: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sparsity: 1.0,
            anchor: 1.0,
            class: 1.0,
            reg: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_s: f64,
    pub loss_anc: f64,
    pub loss_class: f64,
    pub loss_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.loss_s, self.loss_anc, self.loss_class, self.loss_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.loss_s += o.loss_s;
        self.loss_anc += o.loss_anc;
        self.loss_class += o.loss_class;
        self.loss_reg += o.loss_reg;
        self.total += o.total;
    }

    pub fn scale(&mut self, k: f64) {
        for v in [&mut self.loss_s, &mut self.loss_anc, &mut self.loss_class, &mut self.loss_reg, &mut self.total] {
            *v *= k;
        }
    }
}

/// Balanced binary cross entropy over clamped probabilities.
pub fn balanced_ce(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Contract("balanced cross entropy needs at least one label".into()));
    }
    let (mut sp, mut np, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if y {
            sp -= p.ln();
            np += 1;
        } else {
            sn -= (1.0 - p).ln();
            nn += 1;
        }
    }
    let pos = if np > 0 { sp / (2.0 * np as f64) } else { 0.0 };
    let neg = if nn > 0 { sn / (2.0 * nn as f64) } else { 0.0 };
    Ok(pos + neg)
}

/// Supervision for one decoder level, aligned with its support rows.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    pub sparsity: Vec<bool>,
    pub matches: MatchResult,
    /// Encoded offsets for each positive anchor in row-major order.
    pub reg_targets: Vec<[f64; 6]>,
    /// Ground-truth class for each positive anchor in the same order.
    pub classes: Vec<usize>,
}

impl LevelTargets {
    pub fn new(support: &Support, geom: &AnchorGeometry, gts: &[Box3D], sparsity: Vec<bool>, matches: MatchResult) -> Result<Self> {
        if sparsity.len() != support.len() || matches.rows() != support.len() || matches.k != geom.k() {
            return Err(Error::Shape(format!(
                "targets for {} rows do not fit a support of {}",
                matches.rows(),
                support.len()
            )));
        }
        let mut reg_targets = Vec::new();
        let mut classes = Vec::new();
        for (slot, &label) in matches.labels.iter().enumerate() {
            if label == AnchorLabel::Positive {
                let (row, a) = (slot / matches.k, slot % matches.k);
                let gt = &gts[matches.gt_index[slot] as usize];
                let anchor = geom.anchor(&support.coords()[row], support.stride(), a);
                reg_targets.push(encode_box(gt, &anchor));
                classes.push(gt.class_id);
            }
        }
        Ok(Self {
            sparsity,
            matches,
            reg_targets,
            classes,
        })
    }
}

/// Head outputs of one level on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    /// rows × (c + 7)·k raw head output.
    pub anchor_raw: Var,
    /// rows × 1 sparsity probability.
    pub sparsity_prob: Var,
}

/// Builds the weighted detection loss over all levels on the tape.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    levels: &[(LevelVars, &LevelTargets)],
    classes: usize,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(Var, LossBreakdown)> {
    let balanced = mode == LossMode::Bce;
    let w = anchor_block_width(classes);
    let mut sparsity_parts = Vec::new();
    let mut sparsity_labels = Vec::new();
    let mut obj_parts = Vec::new();
    let mut obj_labels = Vec::new();
    let mut cls_parts = Vec::new();
    let mut cls_labels = Vec::new();
    let mut reg_parts = Vec::new();
    let mut reg_targets = Vec::new();
    for (vars, t) in levels {
        let k = t.matches.k;
        let width = tape.value(vars.anchor_raw).cols();
        if width != w * k {
            return Err(Error::Shape(format!("head width {width} does not equal {w}·{k}")));
        }
        if tape.value(vars.sparsity_prob).rows() != t.sparsity.len() {
            return Err(Error::Shape("sparsity targets do not match level rows".into()));
        }
        sparsity_parts.push(vars.sparsity_prob);
        sparsity_labels.extend_from_slice(&t.sparsity);
        let mut obj_idx = Vec::new();
        let mut cls_idx = Vec::new();
        let mut reg_idx = Vec::new();
        for (slot, &label) in t.matches.labels.iter().enumerate() {
            let base = ((slot / k) * width + (slot % k) * w) as u32;
            match label {
                AnchorLabel::Ignore => continue,
                AnchorLabel::Negative => obj_labels.push(false),
                AnchorLabel::Positive => {
                    obj_labels.push(true);
                    reg_idx.extend((1..7).map(|j| base + j));
                    cls_idx.extend((7..w as u32).map(|j| base + j));
                }
            }
            obj_idx.push(base);
        }
        obj_parts.push(tape.select(vars.anchor_raw, obj_idx, 1)?);
        cls_parts.push(tape.select(vars.anchor_raw, cls_idx, classes)?);
        reg_parts.push(tape.select(vars.anchor_raw, reg_idx, 6)?);
        cls_labels.extend_from_slice(&t.classes);
        reg_targets.extend(t.reg_targets.iter().flat_map(|r| r.iter().map(|&v| T::lit(v))));
    }
    let sp = tape.concat_rows(sparsity_parts, 1)?;
    let loss_s = tape.binary_ce(sp, sparsity_labels, balanced)?;
    let obj = tape.concat_rows(obj_parts, 1)?;
    let loss_anc = if obj_labels.is_empty() {
        tape.input(Matrix::scalar(T::zero()))
    } else {
        let p = tape.sigmoid(obj);
        tape.binary_ce(p, obj_labels, balanced)?
    };
    let cls = tape.concat_rows(cls_parts, classes)?;
    let loss_class = tape.softmax_ce(cls, cls_labels)?;
    let reg = tape.concat_rows(reg_parts, 6)?;
    let n_reg = reg_targets.len() / 6;
    let loss_reg = tape.huber(reg, Matrix::from_vec(n_reg, 6, reg_targets), T::lit(HUBER_DELTA))?;
    let total = tape.weighted_sum(vec![
        (loss_s, T::lit(weights.sparsity)),
        (loss_anc, T::lit(weights.anchor)),
        (loss_class, T::lit(weights.class)),
        (loss_reg, T::lit(weights.reg)),
    ])?;
    let read = |v: Var| tape.value(v).as_slice()[0].as_f64();
    let breakdown = LossBreakdown {
        loss_s: read(loss_s),
        loss_anc: read(loss_anc),
        loss_class: read(loss_class),
        loss_reg: read(loss_reg),
        total: read(total),
    };
    if !breakdown.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss term: {breakdown:?}")));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParameterStore;
    use crate::detect::anchors::AnchorSpec;
    use crate::detect::matching::{label_for, match_anchors};
    use crate::lattice::Coord;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn balanced_ce_fixtures() {
        let v = balanced_ce(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = balanced_ce(&[1.0, 0.0], &[true, false]).unwrap();
        assert!(perfect <= -(1.0 - 1e-7f64).ln() + 1e-15);
        assert!(balanced_ce(&[], &[]).is_err());
        // one-sided labels keep the half factor
        let only_pos = balanced_ce(&[0.5], &[true]).unwrap();
        assert!((only_pos - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn balanced_ce_ignores_class_counts() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..30);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let base = balanced_ce(&p, &y).unwrap();
            let p2: Vec<f64> = p.iter().chain(&p).copied().collect();
            let y2: Vec<bool> = y.iter().chain(&y).copied().collect();
            assert!((balanced_ce(&p2, &y2).unwrap() - base).abs() < 1e-12);
            // tripling only the positives
            let mut p3 = p.clone();
            let mut y3 = y.clone();
            for (q, l) in p.iter().zip(&y).filter(|(_, l)| **l) {
                p3.extend([*q, *q]);
                y3.extend([*l, *l]);
            }
            assert!((balanced_ce(&p3, &y3).unwrap() - base).abs() < 1e-12);
        }
    }

    struct Case {
        support: Support,
        gts: Vec<Box3D>,
        raw: Matrix<f64>,
        sparsity: Vec<f64>,
        targets: LevelTargets,
    }

    fn random_case(rng: &mut impl Rng, classes: usize, geom: &AnchorGeometry, stride: i32) -> Case {
        let coords: Vec<Coord> = (0..12)
            .map(|_| Coord::new(0, rng.random_range(0..4) * stride, rng.random_range(0..4) * stride, 0))
            .collect();
        let support = Support::from_unsorted(coords, stride).unwrap();
        // ground truths centered on anchors so positives exist
        let gts: Vec<Box3D> = (0..2)
            .map(|i| {
                let c = support.coords()[i * 3 % support.len()];
                let a = geom.anchor(&c, stride, rng.random_range(0..geom.k()));
                Box3D::new(a.center.map(|v| v + rng.random_range(-0.01..0.01)), a.size.map(|s| s * rng.random_range(0.9..1.1)), rng.random_range(0..classes), 1.0)
            })
            .collect();
        let m = match_anchors(&support, geom, &gts);
        let w = anchor_block_width(classes) * geom.k();
        let raw = Matrix::from_vec(support.len(), w, (0..support.len() * w).map(|_| rng.random_range(-2.0..2.0)).collect());
        let sparsity: Vec<f64> = (0..support.len()).map(|_| rng.random_range(0.01..0.99)).collect();
        let labels: Vec<bool> = (0..support.len()).map(|_| rng.random_bool(0.4)).collect();
        let targets = LevelTargets::new(&support, geom, &gts, labels, m).unwrap();
        Case {
            support,
            gts,
            raw,
            sparsity,
            targets,
        }
    }

    /// Direct recomputation from the loss definitions, without the tape.
    fn reference(cases: &[Case], geom: &AnchorGeometry, classes: usize, wts: &LossWeights) -> LossBreakdown {
        let w = anchor_block_width(classes);
        let (mut sp, mut sl) = (vec![], vec![]);
        let (mut op, mut ol) = (vec![], vec![]);
        let (mut ce, mut n_pos, mut reg) = (0.0, 0usize, 0.0);
        for c in cases {
            sp.extend_from_slice(&c.sparsity);
            sl.extend_from_slice(&c.targets.sparsity);
            for (row, coord) in c.support.coords().iter().enumerate() {
                for a in 0..geom.k() {
                    let anchor = geom.anchor(coord, c.support.stride(), a);
                    let (mut best, mut arg) = (0.0, 0);
                    for (gi, g) in c.gts.iter().enumerate() {
                        let v = crate::detect::boxes::iou3d(&anchor, g);
                        if v > best {
                            best = v;
                            arg = gi;
                        }
                    }
                    let block = &c.raw.row(row)[a * w..(a + 1) * w];
                    match label_for(best) {
                        AnchorLabel::Ignore => {}
                        AnchorLabel::Negative => {
                            op.push(1.0 / (1.0 + (-block[0]).exp()));
                            ol.push(false);
                        }
                        AnchorLabel::Positive => {
                            op.push(1.0 / (1.0 + (-block[0]).exp()));
                            ol.push(true);
                            let g = &c.gts[arg];
                            let logits = &block[7..];
                            let z: f64 = logits.iter().map(|v| v.exp()).sum();
                            ce -= (logits[g.class_id].exp() / z).ln();
                            let t = encode_box(g, &anchor);
                            for j in 0..6 {
                                let e = (block[1 + j] - t[j]).abs();
                                reg += if e <= 1.0 { 0.5 * e * e } else { e - 0.5 };
                            }
                            n_pos += 1;
                        }
                    }
                }
            }
        }
        let loss_s = balanced_ce(&sp, &sl).unwrap();
        let loss_anc = balanced_ce(&op, &ol).unwrap();
        let (loss_class, loss_reg) = if n_pos == 0 { (0.0, 0.0) } else { (ce / n_pos as f64, reg / n_pos as f64) };
        LossBreakdown {
            loss_s,
            loss_anc,
            loss_class,
            loss_reg,
            total: wts.sparsity * loss_s + wts.anchor * loss_anc + wts.class * loss_class + wts.reg * loss_reg,
        }
    }

    #[test]
    fn matches_independent_recomputation() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let classes = 3;
        let geom = AnchorSpec::default().geometry(0.05);
        let store = ParameterStore::<f64>::new();
        for _ in 0..5 {
            let cases = vec![random_case(&mut rng, classes, &geom, 2), random_case(&mut rng, classes, &geom, 4)];
            let mut tape = Tape::new(&store);
            let levels: Vec<(LevelVars, &LevelTargets)> = cases
                .iter()
                .map(|c| {
                    let vars = LevelVars {
                        anchor_raw: tape.input(c.raw.clone()),
                        sparsity_prob: tape.input(Matrix::from_vec(c.sparsity.len(), 1, c.sparsity.clone())),
                    };
                    (vars, &c.targets)
                })
                .collect();
            let wts = LossWeights::default();
            let (_, got) = detection_loss(&mut tape, &levels, classes, &wts, LossMode::Bce).unwrap();
            let want = reference(&cases, &geom, classes, &wts);
            assert!(got.loss_class > 0.0 && got.loss_reg > 0.0);
            for (a, b) in [
                (got.loss_s, want.loss_s),
                (got.loss_anc, want.loss_anc),
                (got.loss_class, want.loss_class),
                (got.loss_reg, want.loss_reg),
                (got.total, want.total),
            ] {
                assert!((a - b).abs() < 1e-10, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn no_positives_and_exact_offsets() {
        let geom = AnchorSpec::default().geometry(0.05);
        let classes = 2;
        let w = anchor_block_width(classes) * geom.k();
        let support = Support::new(vec![Coord::new(0, 0, 0, 0), Coord::new(0, 2, 0, 0)], 2).unwrap();
        let store = ParameterStore::<f64>::new();

        let m = match_anchors(&support, &geom, &[]);
        let t = LevelTargets::new(&support, &geom, &[], vec![true, false], m).unwrap();
        let mut tape = Tape::new(&store);
        let vars = LevelVars {
            anchor_raw: tape.input(Matrix::zeros(2, w)),
            sparsity_prob: tape.input(Matrix::from_vec(2, 1, vec![0.7, 0.2])),
        };
        let (_, b) = detection_loss(&mut tape, &[(vars, &t)], classes, &LossWeights::default(), LossMode::Bce).unwrap();
        assert_eq!((b.loss_class, b.loss_reg), (0.0, 0.0));
        assert!((b.total - (b.loss_s + b.loss_anc)).abs() < 1e-15);

        // one anchor equal to the gt and head offsets set to its target
        let gt = Box3D { class_id: 1, ..geom.anchor(&support.coords()[0], 2, 0) };
        let m = match_anchors(&support, &geom, &[gt]);
        let t = LevelTargets::new(&support, &geom, &[gt], vec![true, false], m).unwrap();
        let mut raw = Matrix::zeros(2, w);
        for (slot, &l) in t.matches.labels.iter().enumerate() {
            if l == AnchorLabel::Positive {
                let (row, a) = (slot / geom.k(), slot % geom.k());
                let anchor = geom.anchor(&support.coords()[row], 2, a);
                let enc = encode_box(&gt, &anchor);
                raw.row_mut(row)[a * (7 + classes) + 1..a * (7 + classes) + 7].copy_from_slice(&enc);
            }
        }
        let mut tape = Tape::new(&store);
        let vars = LevelVars {
            anchor_raw: tape.input(raw),
            sparsity_prob: tape.input(Matrix::from_vec(2, 1, vec![0.7, 0.2])),
        };
        let (_, b) = detection_loss(&mut tape, &[(vars, &t)], classes, &LossWeights::default(), LossMode::Ce).unwrap();
        assert!(t.matches.num_positive() >= 1);
        assert!(b.loss_reg.abs() < 1e-15);
    }
}
