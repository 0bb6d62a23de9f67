//! Detection metrics and the scaling benchmark.

mod bench;
mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bench::{
    bench_csv, bench_scaling, current_bytes, linear_fit, peak_bytes, reset_peak, scaling_ladder, tile_tensor, BenchReport, BenchRow,
    BenchScene, BenchSettings, LinearFit, TrackingAllocator,
};
pub use metrics::{average_precision, integrate_pr, match_class, pr_curve, ApReport, ClassAp, PrSample, SceneDetections};

use crate::data::write_text;
use crate::error::{Error, Result};

/// AP tables and PR curves at each requested IoU threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub reports: Vec<ApReport>,
    /// Curves per threshold, in the order of `reports`, keyed by class id.
    pub curves: Vec<Vec<(usize, Vec<PrSample>)>>,
}

impl EvalReport {
    pub fn at(&self, iou: f64) -> Option<&ApReport> {
        self.reports.iter().find(|r| (r.iou_thresh - iou).abs() < 1e-9)
    }
}

pub fn evaluate(scenes: &[SceneDetections], ious: &[f64]) -> Result<EvalReport> {
    if let Some(bad) = ious.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("IoU thresholds must lie in (0, 1], got {bad}")));
    }
    let reports: Vec<ApReport> = ious.iter().map(|&t| average_precision(scenes, t)).collect();
    let curves = reports
        .iter()
        .map(|r| r.per_class.iter().map(|c| (c.class_id, pr_curve(scenes, r.iou_thresh, c.class_id))).collect())
        .collect();
    Ok(EvalReport {
        scenes: scenes.len(),
        reports,
        curves,
    })
}

pub fn pr_csv(samples: &[PrSample]) -> String {
    let mut s = String::from("score,precision,recall\n");
    for p in samples {
        s.push_str(&format!("{},{},{}\n", p.score, p.precision, p.recall));
    }
    s
}

/// Writes `eval.json` and one `pr_<class>.csv` per class. Curves at the first
/// threshold use the plain name; later thresholds append `_iou<percent>`.
pub fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        scenes: usize,
        thresholds: &'a [ApReport],
    }
    let summary = Summary {
        scenes: report.scenes,
        thresholds: &report.reports,
    };
    write_text(&dir.join("eval.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    for (i, (r, curves)) in report.reports.iter().zip(&report.curves).enumerate() {
        for (class, samples) in curves {
            let name = if i == 0 {
                format!("pr_{class}.csv")
            } else {
                format!("pr_{class}_iou{}.csv", (r.iou_thresh * 100.0).round() as u32)
            };
            write_text(&dir.join(name), &pr_csv(samples))?;
        }
    }
    Ok(())
}
