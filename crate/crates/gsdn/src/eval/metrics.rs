use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detect::{iou3d, Box3D};

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub predictions: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    /// Recall reached with every prediction of the class.
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_thresh: f64,
    /// Classes with at least one ground-truth box, ascending id.
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

impl ApReport {
    pub fn class(&self, id: usize) -> Option<&ClassAp> {
        self.per_class.iter().find(|c| c.class_id == id)
    }

    /// Mean over classes of the recall at the lowest score cut.
    pub fn mean_recall(&self) -> f64 {
        if self.per_class.is_empty() {
            0.0
        } else {
            self.per_class.iter().map(|c| c.recall).sum::<f64>() / self.per_class.len() as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrSample {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// True/false positive flag and score of every prediction of `class`, in
/// descending score order (ties keep scene, then prediction order).
pub fn match_class(scenes: &[SceneDetections], class: usize, iou_thresh: f64) -> (Vec<(f64, bool)>, usize) {
    let mut preds: Vec<(usize, &Box3D)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| sc.predictions.iter().filter(|b| b.class_id == class).map(move |b| (s, b)))
        .collect();
    preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let gts: Vec<Vec<&Box3D>> = scenes.iter().map(|s| s.gts.iter().filter(|b| b.class_id == class).collect()).collect();
    let num_gt = gts.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(preds.len());
    for (s, p) in preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if used[s][j] {
                continue;
            }
            let v = iou3d(p, g);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[s][j] = true;
        }
        out.push((p.score, best.is_some()));
    }
    (out, num_gt)
}

/// Precision/recall after each prediction, with the precision envelope
/// (running maximum from the right) applied.
pub fn pr_curve(scenes: &[SceneDetections], iou_thresh: f64, class: usize) -> Vec<PrSample> {
    let (flags, num_gt) = match_class(scenes, class, iou_thresh);
    if num_gt == 0 {
        return Vec::new();
    }
    let mut tp = 0usize;
    let mut samples: Vec<PrSample> = flags
        .iter()
        .enumerate()
        .map(|(i, &(score, hit))| {
            tp += hit as usize;
            PrSample {
                score,
                precision: tp as f64 / (i + 1) as f64,
                recall: tp as f64 / num_gt as f64,
            }
        })
        .collect();
    for i in (0..samples.len().saturating_sub(1)).rev() {
        samples[i].precision = samples[i].precision.max(samples[i + 1].precision);
    }
    samples
}

/// All-point area under an enveloped PR curve.
pub fn integrate_pr(samples: &[PrSample]) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for s in samples {
        ap += (s.recall - prev) * s.precision;
        prev = s.recall;
    }
    ap
}

/// Per-class AP with all-point interpolation and its mean over classes that
/// have ground truth.
pub fn average_precision(scenes: &[SceneDetections], iou_thresh: f64) -> ApReport {
    let classes: BTreeSet<usize> = scenes.iter().flat_map(|s| s.gts.iter().map(|b| b.class_id)).collect();
    let per_class: Vec<ClassAp> = classes
        .into_iter()
        .map(|c| {
            let curve = pr_curve(scenes, iou_thresh, c);
            let num_pred = scenes.iter().map(|s| s.predictions.iter().filter(|b| b.class_id == c).count()).sum();
            ClassAp {
                class_id: c,
                ap: integrate_pr(&curve),
                num_gt: scenes.iter().map(|s| s.gts.iter().filter(|b| b.class_id == c).count()).sum(),
                num_pred,
                recall: curve.last().map_or(0.0, |s| s.recall),
            }
        })
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    ApReport {
        iou_thresh,
        per_class,
        map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, class: usize, score: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [1.0; 3], class, score)
    }

    fn one(preds: Vec<Box3D>, gts: Vec<Box3D>) -> Vec<SceneDetections> {
        vec![SceneDetections { predictions: preds, gts }]
    }

    #[test]
    fn single_hit_is_perfect() {
        // IoU of unit cubes offset by 1/3 is 0.5
        let s = one(vec![bx(1.0 / 3.0, 0, 0.9)], vec![bx(0.0, 0, 1.0)]);
        assert!((iou3d(&s[0].predictions[0], &s[0].gts[0]) - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&s, 0.25).map, 1.0);
        assert_eq!(pr_curve(&s, 0.25, 0), vec![PrSample { score: 0.9, precision: 1.0, recall: 1.0 }]);
    }

    #[test]
    fn miss_then_hit_gives_half() {
        let s = one(vec![bx(5.0, 0, 0.9), bx(0.0, 0, 0.4)], vec![bx(0.0, 0, 1.0)]);
        assert!((average_precision(&s, 0.25).map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let s = one(vec![bx(0.0, 0, 0.9), bx(0.0, 0, 0.8)], vec![bx(0.0, 0, 1.0)]);
        let (flags, _) = match_class(&s, 0, 0.5);
        assert_eq!(flags, vec![(0.9, true), (0.8, false)]);
        // the envelope still reaches precision 1 at full recall
        assert_eq!(average_precision(&s, 0.5).map, 1.0);
        let s2 = one(vec![bx(0.0, 0, 0.9), bx(0.0, 0, 0.8), bx(3.0, 0, 0.7)], vec![bx(0.0, 0, 1.0), bx(3.0, 0, 1.0)]);
        assert!(average_precision(&s2, 0.5).map < 1.0);
    }

    #[test]
    fn empty_cases() {
        let s = one(vec![], vec![bx(0.0, 0, 1.0)]);
        assert_eq!(average_precision(&s, 0.25).map, 0.0);
        assert!(pr_curve(&s, 0.25, 0).is_empty());
        assert_eq!(average_precision(&one(vec![bx(0.0, 1, 0.5)], vec![]), 0.25).per_class.len(), 0);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let s = one(vec![bx(0.0, 0, 0.9), bx(9.0, 3, 0.9)], vec![bx(0.0, 0, 1.0)]);
        let r = average_precision(&s, 0.25);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn three_box_fixture() {
        // gts A(0), B(3), C(6) in class 0; predictions by score:
        // 0.9 on A (TP), 0.8 nowhere (FP), 0.7 on B (TP), 0.6 on A again (FP)
        let s = one(
            vec![bx(0.0, 0, 0.9), bx(20.0, 0, 0.8), bx(3.0, 0, 0.7), bx(0.05, 0, 0.6)],
            vec![bx(0.0, 0, 1.0), bx(3.0, 0, 1.0), bx(6.0, 0, 1.0)],
        );
        // precision 1, 1/2, 2/3, 1/2 at recall 1/3, 1/3, 2/3, 2/3 → AP = 1/3·1 + 1/3·2/3
        let want = 1.0 / 3.0 + 2.0 / 9.0;
        assert!((average_precision(&s, 0.25).map - want).abs() < 1e-12);
    }

    /// AP from the interpolated precision at every recall breakpoint, using
    /// per-threshold precision/recall of the prediction sets {score ≥ t}.
    fn exhaustive(scenes: &[SceneDetections], iou: f64, class: usize) -> f64 {
        let (flags, num_gt) = match_class(scenes, class, iou);
        if num_gt == 0 {
            return 0.0;
        }
        let points: Vec<(f64, f64)> = (1..=flags.len())
            .map(|k| {
                let tp = flags[..k].iter().filter(|f| f.1).count() as f64;
                (tp / num_gt as f64, tp / k as f64)
            })
            .collect();
        let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
        recalls.insert(0, 0.0);
        recalls.dedup();
        let mut ap = 0.0;
        for w in recalls.windows(2) {
            let p = points.iter().filter(|q| q.0 >= w[1]).map(|q| q.1).fold(0.0, f64::max);
            ap += (w[1] - w[0]) * p;
        }
        ap
    }

    fn scene_strategy() -> impl Strategy<Value = Vec<SceneDetections>> {
        let b = |score: bool| {
            (0.0f64..4.0, 0usize..2, 0.0f64..1.0).prop_map(move |(x, c, s)| bx(x, c, if score { s } else { 1.0 }))
        };
        proptest::collection::vec(
            (proptest::collection::vec(b(true), 0..8), proptest::collection::vec(b(false), 0..4))
                .prop_map(|(predictions, gts)| SceneDetections { predictions, gts }),
            1..4,
        )
    }

    proptest! {
        #[test]
        fn equals_exhaustive_oracle(s in scene_strategy()) {
            let r = average_precision(&s, 0.25);
            for c in &r.per_class {
                prop_assert!((c.ap - exhaustive(&s, 0.25, c.class_id)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&c.ap));
            }
            for c in 0..2 {
                for p in pr_curve(&s, 0.25, c) {
                    prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
                }
            }
        }

        #[test]
        fn invariant_to_order_and_monotone_rescaling(s in scene_strategy()) {
            let base = average_precision(&s, 0.5).map;
            let mut rev = s.clone();
            for sc in &mut rev {
                sc.predictions.reverse();
            }
            let mut squashed = s.clone();
            for sc in &mut squashed {
                for p in &mut sc.predictions {
                    p.score = p.score.powi(3) * 0.5;
                }
            }
            // distinct scores make the ranking unique, so reordering cannot matter
            let mut scores: Vec<f64> = s.iter().flat_map(|x| x.predictions.iter().map(|p| p.score)).collect();
            scores.sort_by(f64::total_cmp);
            let distinct = scores.windows(2).all(|w| w[0] != w[1]);
            if distinct {
                prop_assert!((average_precision(&rev, 0.5).map - base).abs() < 1e-12);
            }
            prop_assert!((average_precision(&squashed, 0.5).map - base).abs() < 1e-12);
        }
    }
}
