use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::autograd::{lr_at, sgd_step, ParameterStore, Tape, Var};
use crate::data::{save_checkpoint, write_text, SceneBundle};
use crate::detect::{detection_loss, Box3D, LevelTargets, LevelVars, LossBreakdown};
use crate::error::{Error, Result};
use crate::lattice::{SparseTensor, Support};
use crate::model::{forward, Mode, ModelConfig, TargetPlan};
use crate::pipeline::{LossConfig, RunConfig};
use crate::scalar::Real;
use crate::sparse_ops::{update_running, BN_MOMENTUM};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_LOG_HEADER: &str = "iter,lr,loss_s,loss_anc,loss_class,loss_reg,total";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const NAN_DUMP: &str = "nan_dump.json";

/// A voxelized training scene with its cached target plan.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub id: String,
    pub points: usize,
    pub input: SparseTensor<f32>,
    pub gts: Vec<Box3D>,
    pub plan: TargetPlan,
}

impl TrainScene {
    pub fn new(id: impl Into<String>, scene: &SceneBundle, cfg: &ModelConfig) -> Result<Self> {
        let q = scene.voxelize(cfg.voxel_size)?;
        let plan = TargetPlan::new(cfg, q.tensor.support(), &scene.gt_boxes)?;
        Ok(Self {
            id: id.into(),
            points: scene.points.len(),
            input: q.tensor,
            gts: scene.gt_boxes.clone(),
            plan,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{}", self.iter, self.lr, l.loss_s, l.loss_anc, l.loss_class, l.loss_reg, l.total)
    }
}

/// Scene visited at `iter`: every epoch is a seeded permutation of all scenes.
pub fn scene_index(seed: u64, scenes: usize, iter: u64) -> usize {
    let epoch = iter / scenes as u64;
    let mut order: Vec<usize> = (0..scenes).collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order[(iter % scenes as u64) as usize]
}

/// Builds the teacher-forced detection loss of one scene on `tape`.
pub fn scene_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    loss: &LossConfig,
    input: &SparseTensor<T>,
    plan: &TargetPlan,
) -> Result<(Var, LossBreakdown)> {
    let mut force = |l: usize, s: &Support| plan.sparsity_mask(l, s);
    let out = forward(tape, cfg, input, cfg.tau, Mode::Train, Some(&mut force))?;
    let targets: Vec<LevelTargets> = out
        .levels
        .iter()
        .map(|lv| plan.level_targets(lv.level, &lv.support))
        .collect::<Result<_>>()?;
    let vars: Vec<(LevelVars, &LevelTargets)> = out
        .levels
        .iter()
        .zip(&targets)
        .map(|(lv, t)| {
            (
                LevelVars {
                    anchor_raw: lv.anchor_raw,
                    sparsity_prob: lv.sparsity_prob,
                },
                t,
            )
        })
        .collect();
    detection_loss(tape, &vars, cfg.classes, &loss.weights, loss.mode)
}

/// Loss of one scene, with gradients accumulated into the store and
/// batch-norm running statistics folded in.
pub fn loss_and_grads(store: &mut ParameterStore<f32>, run: &RunConfig, scene: &TrainScene) -> Result<LossBreakdown> {
    let (grads, updates, breakdown) = {
        let mut tape = Tape::new(store);
        let (loss, breakdown) = scene_loss(&mut tape, &run.model, &run.loss, &scene.input, &scene.plan)?;
        if !breakdown.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss on scene {}: {breakdown:?}", scene.id)));
        }
        let grads = tape.backward(loss)?;
        (grads, tape.take_running_updates(), breakdown)
    };
    if !grads.all_finite() {
        return Err(Error::Numerical(format!("non-finite gradient on scene {}", scene.id)));
    }
    store.accumulate(&grads);
    for u in updates {
        let mut mean = store.data(u.mean_id).to_vec();
        let mut var = store.data(u.var_id).to_vec();
        update_running(&mut mean, &mut var, &u.mean, &u.var, BN_MOMENTUM);
        store.data_mut(u.mean_id).copy_from_slice(&mean);
        store.data_mut(u.var_id).copy_from_slice(&var);
    }
    Ok(breakdown)
}

/// Scenes of iteration `iter`: consecutive entries of the epoch stream.
pub fn batch_indices(run: &RunConfig, scenes: usize, iter: u64) -> Vec<usize> {
    let b = run.train.batch_size.max(1) as u64;
    (0..b).map(|j| scene_index(run.seed, scenes, iter * b + j)).collect()
}

/// Like [`train_step`], reporting which scene failed.
fn step(store: &mut ParameterStore<f32>, run: &RunConfig, scenes: &[TrainScene], iter: u64) -> std::result::Result<LogRow, (usize, Error)> {
    let batch = batch_indices(run, scenes.len(), iter);
    let lr = lr_at(iter, &run.optimizer);
    store.clear_grads();
    let mut loss = LossBreakdown::default();
    for &i in &batch {
        let l = loss_and_grads(store, run, &scenes[i]).map_err(|e| (i, e))?;
        loss.add(&l);
    }
    let k = 1.0 / batch.len() as f32;
    loss.scale(k as f64);
    store.scale_grads(k);
    sgd_step(store, lr, run.optimizer.momentum, run.optimizer.weight_decay).map_err(|e| (batch[0], e))?;
    Ok(LogRow { iter, lr, loss })
}

/// One optimizer iteration over the scenes chosen by [`batch_indices`].
pub fn train_step(store: &mut ParameterStore<f32>, run: &RunConfig, scenes: &[TrainScene], iter: u64) -> Result<LogRow> {
    step(store, run, scenes, iter).map_err(|(_, e)| e)
}

#[derive(Serialize)]
struct NanDump<'a> {
    iteration: u64,
    scene: &'a str,
    points: usize,
    nnz: usize,
    error: String,
}

/// Trains from `start_iter` up to `run.train.iterations`.
///
/// With `out` set, rows go to `train_log.csv` (rows at or past `start_iter`
/// from an earlier run are dropped first) and checkpoints to
/// `checkpoint.bin`. A non-finite loss writes `nan_dump.json` naming the
/// scene and aborts with a numerical error.
pub fn train(
    store: &mut ParameterStore<f32>,
    run: &RunConfig,
    scenes: &[TrainScene],
    start_iter: u64,
    out: Option<&Path>,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    run.validate()?;
    if scenes.is_empty() {
        return Err(Error::Validation("training needs at least one scene".into()));
    }
    let mut log = match out {
        Some(dir) => Some(open_log(dir, start_iter)?),
        None => None,
    };
    let mut rows = Vec::new();
    for iter in start_iter..run.train.iterations {
        let row = match step(store, run, scenes, iter) {
            Ok(r) => r,
            Err((i, e @ Error::Numerical(_))) => {
                let scene = &scenes[i];
                if let Some(dir) = out {
                    let dump = NanDump {
                        iteration: iter,
                        scene: &scene.id,
                        points: scene.points,
                        nnz: scene.input.nnz(),
                        error: e.to_string(),
                    };
                    write_text(&dir.join(NAN_DUMP), &(serde_json::to_string_pretty(&dump)? + "\n"))?;
                }
                return Err(Error::Numerical(format!("iteration {iter}, scene {}: {e}", scene.id)));
            }
            Err((_, e)) => return Err(e),
        };
        on_row(&row);
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", row.csv()).map_err(|e| Error::io(path.clone(), e))?;
        }
        rows.push(row);
        let done = iter + 1;
        let periodic = run.train.checkpoint_every > 0 && done % run.train.checkpoint_every == 0;
        if let (Some(dir), true) = (out, periodic && done < run.train.iterations) {
            flush(&mut log)?;
            save_checkpoint(&dir.join(CHECKPOINT_FILE), store, &run.model, done)?;
        }
    }
    if let Some(dir) = out {
        flush(&mut log)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), store, &run.model, run.train.iterations.max(start_iter))?;
    }
    Ok(rows)
}

fn flush(log: &mut Option<(BufWriter<File>, std::path::PathBuf)>) -> Result<()> {
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.clone(), e))?;
    }
    Ok(())
}

fn open_log(dir: &Path, start_iter: u64) -> Result<(BufWriter<File>, std::path::PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TRAIN_LOG);
    let mut text = format!("{TRAIN_LOG_HEADER}\n");
    if start_iter > 0 && path.exists() {
        let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in old.lines().skip(1) {
            let it = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if it.is_some_and(|i| i < start_iter) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    write_text(&path, &text)?;
    let f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    Ok((BufWriter::new(f), path))
}
