use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::scene::{gt_boxes_from_instances, SceneBundle};
use crate::error::{Error, Result};

/// Size range of one synthetic object class, meters per axis (x, y, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrior {
    pub name: String,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
}

impl ClassPrior {
    fn new(name: &str, size_min: [f64; 3], size_max: [f64; 3]) -> Self {
        Self {
            name: name.into(),
            size_min,
            size_max,
        }
    }
}

/// The five furniture-like classes used by default.
pub fn default_classes() -> Vec<ClassPrior> {
    vec![
        ClassPrior::new("table", [1.0, 0.6, 0.7], [1.6, 0.9, 0.8]),
        ClassPrior::new("chair", [0.4, 0.4, 0.8], [0.55, 0.55, 1.0]),
        ClassPrior::new("sofa", [1.5, 0.8, 0.7], [2.0, 1.0, 0.9]),
        ClassPrior::new("bookcase", [0.8, 0.3, 1.2], [1.2, 0.4, 1.6]),
        ClassPrior::new("board", [1.2, 0.08, 0.9], [1.8, 0.12, 1.2]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Floor extent (x, y) and wall height, meters.
    pub room: [f64; 3],
    /// Inclusive object count range.
    pub objects: [usize; 2],
    pub classes: Vec<ClassPrior>,
    /// Surface samples per square meter.
    pub density: f64,
    /// Standard deviation of Gaussian position noise, meters.
    pub noise: f64,
    /// Sample two walls (x = 0 and y = 0) in addition to the floor.
    pub walls: bool,
    /// Minimum horizontal gap between objects, meters.
    pub gap: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            room: [4.0, 4.0, 2.0],
            objects: [2, 4],
            classes: default_classes(),
            density: 400.0,
            noise: 0.005,
            walls: true,
            gap: 0.15,
            seed: 0,
            max_retries: 200,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.room.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad(format!("room extents must be positive, got {:?}", self.room));
        }
        if self.objects[0] > self.objects[1] {
            return bad(format!("object range {:?} is empty", self.objects));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad(format!("density must be positive, got {}", self.density));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.gap >= 0.0) {
            return bad("noise and gap must be non-negative".into());
        }
        if self.objects[1] > 0 && self.classes.is_empty() {
            return bad("objects requested but no classes defined".into());
        }
        for c in &self.classes {
            if (0..3).any(|i| !(c.size_min[i] > 0.0 && c.size_min[i] <= c.size_max[i])) {
                return bad(format!("class {} has an invalid size range", c.name));
            }
        }
        Ok(())
    }
}

/// Seed of scene `index` under a master seed: the `index`-th output
/// (0-based) of SplitMix64 started at `master`.
pub fn scene_seed(master: u64, index: usize) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(master);
    let mut v = sm.next_u64();
    for _ in 0..index {
        v = sm.next_u64();
    }
    v
}

/// A placed cuboid (min corner, size) with its class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub min: [f64; 3],
    pub size: [f64; 3],
    pub class_id: usize,
}

struct Sampler<'a> {
    rng: &'a mut Xoshiro256PlusPlus,
    noise: Option<Normal<f64>>,
    density: f64,
}

impl Sampler<'_> {
    /// Samples an axis-aligned rectangle: `origin + u·a + v·b`, `a`, `b` along axes.
    fn face(&mut self, origin: [f64; 3], a: [f64; 3], b: [f64; 3], out: &mut Vec<[f64; 3]>) {
        let area = norm(a) * norm(b);
        let n = (area * self.density).round() as usize;
        for _ in 0..n {
            let (u, v): (f64, f64) = (self.rng.random(), self.rng.random());
            let mut p = [0, 1, 2].map(|i| origin[i] + u * a[i] + v * b[i]);
            if let Some(d) = &self.noise {
                for x in &mut p {
                    *x += d.sample(self.rng);
                }
            }
            out.push(p);
        }
    }

    fn cuboid(&mut self, c: &Cuboid, out: &mut Vec<[f64; 3]>) {
        let [sx, sy, sz] = c.size;
        let m = c.min;
        let hi = [m[0] + sx, m[1] + sy, m[2] + sz];
        self.face(m, [sx, 0.0, 0.0], [0.0, sy, 0.0], out);
        self.face([m[0], m[1], hi[2]], [sx, 0.0, 0.0], [0.0, sy, 0.0], out);
        self.face(m, [sx, 0.0, 0.0], [0.0, 0.0, sz], out);
        self.face([m[0], hi[1], m[2]], [sx, 0.0, 0.0], [0.0, 0.0, sz], out);
        self.face(m, [0.0, sy, 0.0], [0.0, 0.0, sz], out);
        self.face([hi[0], m[1], m[2]], [0.0, sy, 0.0], [0.0, 0.0, sz], out);
    }
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn overlaps(a: &Cuboid, b: &Cuboid, gap: f64) -> bool {
    (0..2).all(|i| a.min[i] < b.min[i] + b.size[i] + gap && b.min[i] < a.min[i] + a.size[i] + gap)
}

/// Places non-overlapping cuboids on the floor.
pub fn place_objects(spec: &SynthSpec, rng: &mut Xoshiro256PlusPlus) -> Result<Vec<Cuboid>> {
    let count = rng.random_range(spec.objects[0]..=spec.objects[1]);
    let mut placed: Vec<Cuboid> = Vec::with_capacity(count);
    for i in 0..count {
        let mut ok = false;
        for _ in 0..spec.max_retries.max(1) {
            let class_id = rng.random_range(0..spec.classes.len());
            let prior = &spec.classes[class_id];
            let mut size = [0, 1, 2].map(|a| rng.random_range(prior.size_min[a]..=prior.size_max[a]));
            if rng.random_bool(0.5) {
                size.swap(0, 1);
            }
            let room = spec.room;
            if size[0] >= room[0] - 2.0 * spec.gap || size[1] >= room[1] - 2.0 * spec.gap {
                continue;
            }
            let min = [
                rng.random_range(spec.gap..room[0] - spec.gap - size[0]),
                rng.random_range(spec.gap..room[1] - spec.gap - size[1]),
                0.0,
            ];
            let c = Cuboid { min, size, class_id };
            if placed.iter().all(|p| !overlaps(p, &c, spec.gap)) {
                placed.push(c);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Validation(format!(
                "could not place object {} of {count} after {} attempts",
                i + 1,
                spec.max_retries
            )));
        }
    }
    Ok(placed)
}

/// Generates a labeled scene of surface-sampled cuboids on a floor, with
/// the spec's seed.
pub fn synth_scene(spec: &SynthSpec) -> Result<SceneBundle> {
    Ok(synth_scene_with_cuboids(spec)?.0)
}

/// Like [`synth_scene`], also returning the generating cuboids.
pub fn synth_scene_with_cuboids(spec: &SynthSpec) -> Result<(SceneBundle, Vec<Cuboid>)> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let cuboids = place_objects(spec, &mut rng)?;
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    let mut sampler = Sampler {
        rng: &mut rng,
        noise,
        density: spec.density,
    };
    let [rx, ry, rz] = spec.room;
    let mut bg = Vec::new();
    sampler.face([0.0; 3], [rx, 0.0, 0.0], [0.0, ry, 0.0], &mut bg);
    if spec.walls {
        sampler.face([0.0; 3], [rx, 0.0, 0.0], [0.0, 0.0, rz], &mut bg);
        sampler.face([0.0; 3], [0.0, ry, 0.0], [0.0, 0.0, rz], &mut bg);
    }
    let gray = sampler.rng.random_range(90u8..170);
    for p in bg {
        let j = sampler.rng.random_range(0u8..20);
        points.push(p);
        colors.push([gray + j, gray + j, gray + j]);
        semantic.push(-1);
        instance.push(-1);
    }
    for (i, c) in cuboids.iter().enumerate() {
        let base: [u8; 3] = [0, 1, 2].map(|_| sampler.rng.random_range(30u8..220));
        let mut pts = Vec::new();
        sampler.cuboid(c, &mut pts);
        for p in pts {
            let j = sampler.rng.random_range(0u8..30);
            points.push(p);
            colors.push(base.map(|v| v.saturating_add(j)));
            semantic.push(c.class_id as i32);
            instance.push(i as i32);
        }
    }
    // points are stored at f32 precision so saved scenes reload bit-identically
    for p in &mut points {
        *p = p.map(|v| v as f32 as f64);
    }
    let gt_boxes = gt_boxes_from_instances(&points, &semantic, &instance);
    Ok((
        SceneBundle {
            points,
            colors: Some(colors),
            semantic,
            instance,
            gt_boxes,
        },
        cuboids,
    ))
}
