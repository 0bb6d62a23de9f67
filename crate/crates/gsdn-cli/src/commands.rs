use std::fs;
use std::path::{Path, PathBuf};

use gsdn::data::{
    load_checkpoint, load_dataset, load_scene, read_boxes, synth_dataset, write_boxes, write_dataset, SynthSpec,
    BOXES_FILE, MANIFEST_FILE,
};
use gsdn::detect::Box3D;
use gsdn::eval::{bench_csv, bench_scaling, evaluate, scaling_ladder, write_eval, BenchSettings, SceneDetections};
use gsdn::model::{init_parameters, Backbone};
use gsdn::pipeline::{
    detect_scene, gradcheck_config, gradcheck_model, run_ablation, train as train_loop, AblationGrid, InferSettings, LossConfig,
    RunConfig, TrainScene, ABLATION_HEADER, CHECKPOINT_FILE, GRADCHECK_TOL, TRAIN_LOG_HEADER,
};
use gsdn::{Error, Result};

use crate::ConfigArgs;

fn load_run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_overrides(&args.overrides)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    gsdn::data::write_text(path, text)
}

pub fn config(args: &ConfigArgs) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&load_run_config(args)?)?);
    Ok(())
}

pub fn synth(spec: Option<&Path>, out: &Path, count: usize, overrides: &[String]) -> Result<()> {
    let run = match spec {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            match RunConfig::from_json(&text) {
                Ok(r) => r,
                Err(run_err) => match serde_json::from_str::<SynthSpec>(&text) {
                    Ok(s) => RunConfig {
                        synth: s,
                        ..RunConfig::default()
                    },
                    Err(_) => return Err(Error::Config(format!("{}: {run_err}", p.display()))),
                },
            }
        }
    };
    let run = run.with_overrides(overrides)?;
    let scenes = synth_dataset(&run.synth, count)?;
    let m = write_dataset(out, &run.synth, &scenes)?;
    let points: usize = m.scenes.iter().map(|s| s.points).sum();
    println!("wrote {} scenes ({points} points) to {}", m.scenes.len(), out.display());
    Ok(())
}

fn need(path: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("missing {flag} (or config key {key})")))
}

pub fn train(args: &ConfigArgs, data: Option<PathBuf>, out: Option<PathBuf>, resume: bool, progress: u64) -> Result<()> {
    let run = load_run_config(args)?;
    let data = need(data.or(run.paths.data.clone()), "--data", "paths.data")?;
    let out = need(out.or(run.paths.out.clone()), "--out", "paths.out")?;
    let scenes: Vec<TrainScene> = load_dataset(&data)?
        .iter()
        .map(|(n, s)| TrainScene::new(n.clone(), s, &run.model))
        .collect::<Result<_>>()?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let (mut store, start) = if resume && ckpt.exists() {
        let bytes = fs::read(&ckpt).map_err(|e| Error::Io {
            path: ckpt.clone(),
            source: e,
        })?;
        let c = gsdn::data::decode_checkpoint_as(&bytes, &run.model)?;
        println!("resuming from iteration {}", c.iteration);
        (c.store, c.iteration)
    } else {
        (init_parameters(&run.model, run.seed)?, 0)
    };
    write_file(&out.join("config.json"), &(serde_json::to_string_pretty(&run)? + "\n"))?;
    println!(
        "training on {} scenes for {} iterations ({} parameters)",
        scenes.len(),
        run.train.iterations,
        store.count_parameters()
    );
    if progress > 0 {
        println!("{TRAIN_LOG_HEADER}");
    }
    let mut on_row = |r: &gsdn::pipeline::LogRow| {
        if progress > 0 && (r.iter + 1) % progress == 0 {
            println!("{}", r.csv());
        }
    };
    train_loop(&mut store, &run, &scenes, start, Some(&out), &mut on_row)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

pub fn detect(ckpt: &Path, input: &Path, out: &Path, tau: Option<f64>, score_thresh: f64, nms_iou: f64) -> Result<()> {
    let c = load_checkpoint(ckpt)?;
    let tau = tau.unwrap_or(c.config.tau);
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
    }
    let scene = load_scene(input)?;
    let settings = InferSettings {
        tau,
        score_thresh,
        nms_iou,
    };
    let det = detect_scene(&c.store, &c.config, &scene, &settings)?;
    for l in &det.levels {
        println!("level {}: nnz {} kept {}", l.level, l.nnz, l.kept);
    }
    println!(
        "forward {:.1} ms, post-processing {:.1} ms, {} detections",
        det.forward_ms,
        det.post_ms,
        det.boxes.len()
    );
    write_boxes(out, &det.boxes)
}

/// Ground truth of one scene: its boxes file, or boxes derived from labels.
fn scene_gts(path: &Path) -> Result<Vec<Box3D>> {
    if path.is_file() {
        return read_boxes(path);
    }
    let boxes = path.join(BOXES_FILE);
    if boxes.is_file() {
        read_boxes(&boxes)
    } else {
        Ok(load_scene(path)?.gt_boxes)
    }
}

pub fn eval(pred: &Path, gt: &Path, ious: &[f64], out: &Path) -> Result<()> {
    let scenes: Vec<SceneDetections> = if pred.is_dir() {
        let names = gsdn::data::dataset_scenes(gt)?;
        names
            .iter()
            .map(|n| {
                let p = pred.join(format!("{n}.json"));
                let predictions = if p.exists() { read_boxes(&p)? } else { Vec::new() };
                Ok(SceneDetections {
                    predictions,
                    gts: scene_gts(&gt.join(n))?,
                })
            })
            .collect::<Result<_>>()?
    } else {
        if gt.join(MANIFEST_FILE).exists() {
            return Err(Error::Config("a single prediction file needs a single-scene ground truth".into()));
        }
        vec![SceneDetections {
            predictions: read_boxes(pred)?,
            gts: scene_gts(gt)?,
        }]
    };
    let report = evaluate(&scenes, ious)?;
    write_eval(out, &report)?;
    for r in &report.reports {
        let per: Vec<String> = r.per_class.iter().map(|c| format!("{}:{:.3}", c.class_id, c.ap)).collect();
        println!("mAP@{} = {:.4}  [{}]", r.iou_thresh, r.map, per.join(" "));
    }
    Ok(())
}

pub fn gradcheck(voxels: usize, seed: u64, classes: usize) -> Result<()> {
    let cfg = gradcheck_config(classes);
    let o = gradcheck_model(&cfg, &LossConfig::default(), voxels, seed)?;
    for g in &o.report.groups {
        println!("{:<28} {:>6} {:.3e}", g.name, g.entries, g.rel_error);
    }
    let verdict = if o.passed() { "PASS" } else { "FAIL" };
    println!(
        "max relative error {:.3e} over {} parameters ({} voxels): {verdict} at {GRADCHECK_TOL:e}",
        o.report.max_rel_error, o.parameters, o.voxels
    );
    if o.passed() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed: {:.3e}", o.report.max_rel_error)))
    }
}

pub fn bench(args: &ConfigArgs, ckpt: Option<&Path>, out: &Path, steps: usize, warmup: usize, repeats: usize) -> Result<()> {
    let mut run = load_run_config(args)?;
    let store = match ckpt {
        Some(p) => {
            let c = load_checkpoint(p)?;
            run.model = c.config;
            c.store
        }
        None => init_parameters(&run.model, run.seed)?,
    };
    let scenes = scaling_ladder(&run.synth, &run.model, steps)?;
    let settings = BenchSettings {
        tau: run.model.tau,
        score_thresh: run.eval.score_thresh,
        nms_iou: run.eval.nms_iou,
        warmup,
        repeats,
    };
    let report = bench_scaling(&store, &run.model, &scenes, &settings)?;
    let csv = bench_csv(&report);
    print!("{csv}");
    println!(
        "forward time fit: {:.4} ms per voxel + {:.2} ms, R² {:.4}",
        report.time_fit.slope, report.time_fit.intercept, report.time_fit.r2
    );
    write_file(&out.join("bench.csv"), &csv)
}

fn parse_backbone(s: &str) -> Result<Backbone> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
        .map_err(|_| Error::Config(format!("unknown backbone '{s}', expected res14, res18 or res34")))
}

pub fn ablate(args: &ConfigArgs, data: Option<&Path>, out: &Path, count: usize, backbones: &[String]) -> Result<()> {
    let run = load_run_config(args)?;
    let scenes = match data {
        Some(d) => load_dataset(d)?,
        None => synth_dataset(&run.synth, count)?.into_iter().map(|(e, s)| (e.name, s)).collect(),
    };
    let grid = AblationGrid {
        backbones: backbones.iter().map(|b| parse_backbone(b)).collect::<Result<_>>()?,
        ..AblationGrid::default()
    };
    println!("{ABLATION_HEADER}");
    let rows = run_ablation(&run, &scenes, &grid, &mut |r| println!("{}", r.csv()))?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write_file(&out.join("ablation.csv"), &csv)
}
