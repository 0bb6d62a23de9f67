use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::ParameterStore;
use crate::data::{synth_scene, SynthSpec};
use crate::detect::{decode_detections, DecodeLevel};
use crate::error::{Error, Result};
use crate::lattice::{Coord, SparseTensor, Support};
use crate::model::{predict, ModelConfig};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that tracks live and peak heap bytes. Install it
/// with `#[global_allocator]` in a binary or test to enable memory columns.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

fn grow(n: usize) {
    ACTIVE.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Live heap bytes, or `None` when the tracking allocator is not installed.
pub fn current_bytes() -> Option<usize> {
    ACTIVE.load(Ordering::Relaxed).then(|| CURRENT.load(Ordering::Relaxed))
}

/// Restarts peak tracking from the current live size.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub fn peak_bytes() -> Option<usize> {
    ACTIVE.load(Ordering::Relaxed).then(|| PEAK.load(Ordering::Relaxed))
}

#[derive(Clone, Debug)]
pub struct BenchScene {
    pub name: String,
    pub points: usize,
    pub input: SparseTensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scene: String,
    pub points: usize,
    pub nnz: usize,
    /// Median over the timed repeats.
    pub forward_ms: f64,
    pub post_ms: f64,
    /// Heap high-water mark above the pre-forward baseline.
    pub peak_mb: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Forward milliseconds against nnz.
    pub time_fit: LinearFit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchSettings {
    pub tau: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub warmup: usize,
    pub repeats: usize,
}

/// Ordinary least squares of `ys` on `xs`. Needs two distinct abscissae.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Validation("linear fit needs at least two paired samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times inference on each scene in order, strictly serially.
pub fn bench_scaling(store: &ParameterStore<f32>, cfg: &ModelConfig, scenes: &[BenchScene], s: &BenchSettings) -> Result<BenchReport> {
    if s.repeats == 0 {
        return Err(Error::Config("bench needs at least one timed repeat".into()));
    }
    let geom = cfg.geometry();
    let mut rows = Vec::with_capacity(scenes.len());
    for sc in scenes {
        for _ in 0..s.warmup {
            predict(store, cfg, &sc.input, s.tau)?;
        }
        let (mut fwd, mut post) = (Vec::new(), Vec::new());
        let mut peak: Option<usize> = None;
        for _ in 0..s.repeats {
            let base = current_bytes();
            reset_peak();
            let t0 = Instant::now();
            let levels = predict(store, cfg, &sc.input, s.tau)?;
            let t1 = Instant::now();
            let dl: Vec<DecodeLevel<'_>> = levels.iter().map(|l| l.as_decode()).collect();
            let dets = decode_detections(&dl, &geom, cfg.classes, s.score_thresh, s.nms_iou);
            let t2 = Instant::now();
            std::hint::black_box(dets);
            if let (Some(b), Some(p)) = (base, peak_bytes()) {
                peak = Some(peak.map_or(p - b, |q: usize| q.max(p - b)));
            }
            fwd.push((t1 - t0).as_secs_f64() * 1e3);
            post.push((t2 - t1).as_secs_f64() * 1e3);
        }
        rows.push(BenchRow {
            scene: sc.name.clone(),
            points: sc.points,
            nnz: sc.input.nnz(),
            forward_ms: median(fwd),
            post_ms: median(post),
            peak_mb: peak.map(|b| b as f64 / (1024.0 * 1024.0)),
        });
    }
    let time_fit = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.nnz as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.forward_ms).collect();
        linear_fit(&xs, &ys).unwrap_or(LinearFit { slope: 0.0, intercept: 0.0, r2: 0.0 })
    } else {
        LinearFit { slope: 0.0, intercept: 0.0, r2: 0.0 }
    };
    Ok(BenchReport { rows, time_fit })
}

pub fn bench_csv(report: &BenchReport) -> String {
    let mut s = String::from("scene,points,nnz,forward_ms,post_ms,peak_mb\n");
    for r in &report.rows {
        let peak = r.peak_mb.map_or(String::new(), |m| format!("{m:.3}"));
        s.push_str(&format!("{},{},{},{:.3},{:.3},{}\n", r.scene, r.points, r.nnz, r.forward_ms, r.post_ms, peak));
    }
    s
}

/// Places `copies` translated copies of `t` side by side along x, each
/// shifted by a multiple of `spacing` voxels. With `spacing` beyond the
/// tensor's x extent the copies are disjoint, so nnz scales exactly.
pub fn tile_tensor(t: &SparseTensor<f32>, copies: usize, spacing: i32) -> Result<SparseTensor<f32>> {
    if t.stride() != 1 {
        return Err(Error::Contract("tiling expects a stride-1 tensor".into()));
    }
    let (lo, hi) = t
        .coords()
        .iter()
        .fold((i32::MAX, i32::MIN), |(lo, hi), c| (lo.min(c.x), hi.max(c.x)));
    if !t.coords().is_empty() && spacing <= hi - lo {
        return Err(Error::Validation(format!("spacing {spacing} does not clear the x extent {}", hi - lo + 1)));
    }
    let ch = t.channels();
    let mut coords = Vec::with_capacity(t.nnz() * copies);
    let mut feats = Vec::with_capacity(t.nnz() * copies * ch);
    for k in 0..copies {
        let dx = spacing
            .checked_mul(k as i32)
            .ok_or_else(|| Error::Validation("tiling overflows the coordinate range".into()))?;
        coords.extend(t.coords().iter().map(|c| c.offset([dx, 0, 0])));
        feats.extend_from_slice(t.feats().as_slice());
    }
    // copies are laid out in increasing x, but the coordinate order sorts by
    // batch then x first, so a single sort restores the invariant
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| coords[i]);
    let sorted: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
    let mut data = Vec::with_capacity(feats.len());
    for &i in &order {
        data.extend_from_slice(&feats[i * ch..(i + 1) * ch]);
    }
    let support = Support::new(sorted, 1)?;
    SparseTensor::new(std::sync::Arc::new(support), crate::scalar::Matrix::from_vec(coords.len(), ch, data))
}

/// Geometric ladder of benchmark scenes: rung `i` holds `2^i` disjoint
/// copies of the scene generated from `spec`.
pub fn scaling_ladder(spec: &SynthSpec, cfg: &ModelConfig, steps: usize) -> Result<Vec<BenchScene>> {
    let scene = synth_scene(spec)?;
    let base = scene.voxelize(cfg.voxel_size)?.tensor;
    let cell = 1i32 << cfg.levels;
    let (lo, hi) = base
        .coords()
        .iter()
        .fold((i32::MAX, i32::MIN), |(a, b), c| (a.min(c.x), b.max(c.x)));
    // two empty coarsest cells between copies keep their decoder supports apart
    let spacing = (hi - lo + 1 + 3 * cell - 1) / cell * cell;
    (0..steps)
        .map(|i| {
            let copies = 1usize << i;
            Ok(BenchScene {
                name: format!("rung_{i}"),
                points: scene.points.len() * copies,
                input: tile_tensor(&base, copies, spacing)?,
            })
        })
        .collect()
}
