use serde::Serialize;

use crate::data::SceneBundle;
use crate::detect::{LossMode, DEFAULT_RATIO_SEEDS};
use crate::error::Result;
use crate::eval::evaluate;
use crate::model::{init_parameters, Backbone};
use crate::pipeline::{detect_all, train, InferSettings, RunConfig, TrainScene};

/// Named anchor ratio seed sets compared by the ablation.
pub fn ratio_sets() -> Vec<(String, Vec<f64>)> {
    vec![
        ("1".into(), vec![1.0]),
        ("1,4,1/4".into(), vec![1.0, 4.0, 0.25]),
        ("full".into(), DEFAULT_RATIO_SEEDS.to_vec()),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationGrid {
    pub loss_modes: Vec<LossMode>,
    pub backbones: Vec<Backbone>,
    pub ratio_sets: Vec<(String, Vec<f64>)>,
    /// Pruning thresholds applied at inference to each trained model.
    pub taus: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            loss_modes: vec![LossMode::Bce, LossMode::Ce],
            backbones: vec![Backbone::Res14],
            ratio_sets: ratio_sets(),
            taus: vec![0.1, 0.3, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub loss_mode: LossMode,
    pub backbone: Backbone,
    pub ratio_set: String,
    pub tau: f64,
    pub map25: f64,
    pub map50: f64,
    pub recall25: f64,
    pub recall50: f64,
    pub final_loss: f64,
}

pub const ABLATION_HEADER: &str = "loss_mode,backbone,ratio_set,tau,map25,map50,recall25,recall50,final_loss";

impl AblationRow {
    pub fn csv(&self) -> String {
        let mode = match self.loss_mode {
            LossMode::Bce => "bce",
            LossMode::Ce => "ce",
        };
        let bb = match self.backbone {
            Backbone::Res14 => "res14",
            Backbone::Res18 => "res18",
            Backbone::Res34 => "res34",
        };
        format!(
            "{mode},{bb},\"{}\",{},{},{},{},{},{}",
            self.ratio_set, self.tau, self.map25, self.map50, self.recall25, self.recall50, self.final_loss
        )
    }
}

/// Mean total loss over the last `window` rows.
fn tail_loss(rows: &[crate::pipeline::LogRow], window: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(window)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len() as f64
    }
}

/// Trains one model per (loss mode, backbone, ratio set) cell on `scenes`
/// and evaluates it on the same scenes at every inference threshold.
pub fn run_ablation(
    base: &RunConfig,
    scenes: &[(String, SceneBundle)],
    grid: &AblationGrid,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &mode in &grid.loss_modes {
        for &backbone in &grid.backbones {
            for (set_name, seeds) in &grid.ratio_sets {
                let mut run = base.clone();
                run.loss.mode = mode;
                run.model.backbone = backbone;
                run.model.anchors.ratio_seeds = seeds.clone();
                run.validate()?;
                let train_scenes: Vec<TrainScene> = scenes
                    .iter()
                    .map(|(n, s)| TrainScene::new(n.clone(), s, &run.model))
                    .collect::<Result<_>>()?;
                let mut store = init_parameters(&run.model, run.seed)?;
                let log = train(&mut store, &run, &train_scenes, 0, None, &mut |_| {})?;
                for &tau in &grid.taus {
                    let settings = InferSettings {
                        tau,
                        score_thresh: run.eval.score_thresh,
                        nms_iou: run.eval.nms_iou,
                    };
                    let dets = detect_all(&store, &run.model, train_scenes.iter().map(|s| (&s.input, s.gts.as_slice())), &settings)?;
                    let rep = evaluate(&dets, &[0.25, 0.5])?;
                    let row = AblationRow {
                        loss_mode: mode,
                        backbone,
                        ratio_set: set_name.clone(),
                        tau,
                        map25: rep.reports[0].map,
                        map50: rep.reports[1].map,
                        recall25: rep.reports[0].mean_recall(),
                        recall50: rep.reports[1].mean_recall(),
                        final_loss: tail_loss(&log, 50),
                    };
                    on_row(&row);
                    out.push(row);
                }
            }
        }
    }
    Ok(out)
}
