use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::detect::Box3D;
use crate::error::{Error, Result};
use crate::lattice::{quantize, QuantizationResult};
use crate::scalar::Matrix;

/// Degenerate (flat) instances get at least this extent per axis, in meters.
pub const MIN_BOX_SIZE: f64 = 1e-3;

pub const POINTS_FILE: &str = "points.ply";
pub const LABELS_FILE: &str = "labels.txt";
pub const BOXES_FILE: &str = "boxes.json";

/// One scene: points with optional colors, per-point labels and boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Per-point class, `-1` when unlabeled. Empty when the scene has no labels.
    pub semantic: Vec<i32>,
    /// Per-point instance, `-1` when unlabeled. Empty when the scene has no labels.
    pub instance: Vec<i32>,
    pub gt_boxes: Vec<Box3D>,
}

impl SceneBundle {
    pub fn has_labels(&self) -> bool {
        !self.instance.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::Validation(format!("{} colors for {n} points", c.len())));
            }
        }
        if self.semantic.len() != self.instance.len() || (self.has_labels() && self.instance.len() != n) {
            return Err(Error::Validation(format!(
                "{} semantic and {} instance labels for {n} points",
                self.semantic.len(),
                self.instance.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation(format!("point {i} is not finite")));
        }
        Ok(())
    }

    /// Input features: RGB in [0, 1] (0.5 gray when absent) and a constant 1.
    pub fn features(&self) -> Matrix<f32> {
        let mut data = Vec::with_capacity(self.points.len() * 4);
        for i in 0..self.points.len() {
            match &self.colors {
                Some(c) => data.extend(c[i].iter().map(|&v| v as f32 / 255.0)),
                None => data.extend([0.5f32; 3]),
            }
            data.push(1.0);
        }
        Matrix::from_vec(self.points.len(), 4, data)
    }

    pub fn voxelize(&self, voxel_size: f64) -> Result<QuantizationResult> {
        quantize(&self.points, &self.features(), voxel_size)
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect(),
            gt_boxes: self.gt_boxes.iter().map(|b| b.translated(d)).collect(),
            ..self.clone()
        }
    }
}

/// Tight box per instance with the majority class of its points.
/// Instances are emitted in increasing id order; ties in the vote go to the
/// smaller class id.
pub fn gt_boxes_from_instances(points: &[[f64; 3]], semantic: &[i32], instance: &[i32]) -> Vec<Box3D> {
    struct Acc {
        lo: [f64; 3],
        hi: [f64; 3],
        votes: BTreeMap<i32, usize>,
    }
    let mut by_id: BTreeMap<i32, Acc> = BTreeMap::new();
    for ((p, &s), &id) in points.iter().zip(semantic).zip(instance) {
        if id < 0 {
            continue;
        }
        let a = by_id.entry(id).or_insert(Acc {
            lo: *p,
            hi: *p,
            votes: BTreeMap::new(),
        });
        for i in 0..3 {
            a.lo[i] = a.lo[i].min(p[i]);
            a.hi[i] = a.hi[i].max(p[i]);
        }
        if s >= 0 {
            *a.votes.entry(s).or_default() += 1;
        }
    }
    by_id
        .values()
        .filter_map(|a| {
            let class = a.votes.iter().fold(None, |best: Option<(i32, usize)>, (&c, &n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((c, n)),
            })?;
            let center = [0, 1, 2].map(|i| 0.5 * (a.lo[i] + a.hi[i]));
            let size = [0, 1, 2].map(|i| (a.hi[i] - a.lo[i]).max(MIN_BOX_SIZE));
            Some(Box3D::new(center, size, class.0 as usize, 1.0))
        })
        .collect()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parsed ASCII PLY vertex data.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

pub fn parse_ply(path: &Path, text: &str) -> Result<PlyCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (n, first) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if first != "ply" {
        return Err(parse_err(path, n, "missing 'ply' magic"));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut format_seen = false;
    let mut header_end = 0;
    for (n, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", "1.0"] => format_seen = true,
            ["format", other, ..] => return Err(parse_err(path, n, format!("unsupported format '{other}', expected ascii 1.0"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", count] => {
                let c: usize = count.parse().map_err(|_| parse_err(path, n, format!("bad vertex count '{count}'")))?;
                vertex_count = Some(c);
                in_vertex = true;
            }
            ["element", _, count] => {
                if *count != "0" {
                    return Err(parse_err(path, n, "only vertex elements are supported"));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(parse_err(path, n, "list properties are not supported on vertices")),
            ["property", ty, name] => {
                if in_vertex {
                    if !matches!(*ty, "float" | "float32" | "double" | "float64" | "uchar" | "uint8" | "int" | "int32" | "short" | "ushort" | "uint") {
                        return Err(parse_err(path, n, format!("unsupported property type '{ty}'")));
                    }
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_end = n;
                break;
            }
            _ => return Err(parse_err(path, n, format!("unrecognized header line '{line}'"))),
        }
    }
    if header_end == 0 {
        return Err(parse_err(path, text.lines().count().max(1), "missing end_header"));
    }
    if !format_seen {
        return Err(parse_err(path, header_end, "missing 'format ascii 1.0' line"));
    }
    let count = vertex_count.ok_or_else(|| parse_err(path, header_end, "missing 'element vertex'"))?;
    let find = |name: &str| props.iter().position(|p| p == name);
    let (Some(xi), Some(yi), Some(zi)) = (find("x"), find("y"), find("z")) else {
        return Err(parse_err(path, header_end, "vertex element needs x, y and z properties"));
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => return Err(parse_err(path, header_end, "color needs all of red, green and blue")),
    };
    let mut points = Vec::with_capacity(count);
    let mut colors = rgb.map(|_| Vec::with_capacity(count));
    for (n, line) in lines.by_ref() {
        if points.len() == count {
            if line.is_empty() {
                continue;
            }
            return Err(parse_err(path, n, format!("more than the declared {count} vertices")));
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != props.len() {
            return Err(parse_err(path, n, format!("expected {} values, found {}", props.len(), fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            // coordinates are kept at single precision throughout
            let v: f32 = fields[i].parse().map_err(|_| parse_err(path, n, format!("bad number '{}'", fields[i])))?;
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(parse_err(path, n, format!("non-finite value '{}'", fields[i])))
            }
        };
        points.push([num(xi)?, num(yi)?, num(zi)?]);
        if let (Some(c), Some(idx)) = (colors.as_mut(), rgb) {
            let mut px = [0u8; 3];
            for (slot, &i) in px.iter_mut().zip(&idx) {
                *slot = fields[i].parse().map_err(|_| parse_err(path, n, format!("color '{}' is not in 0..=255", fields[i])))?;
            }
            c.push(px);
        }
    }
    if points.len() != count {
        return Err(parse_err(
            path,
            text.lines().count(),
            format!("header declares {count} vertices, file has {}", points.len()),
        ));
    }
    Ok(PlyCloud { points, colors })
}

/// Serializes points as ASCII PLY with 32-bit float coordinates. Values are
/// written with the shortest representation that reads back to the same f32.
pub fn format_ply(points: &[[f64; 3]], colors: Option<&[[u8; 3]]>) -> String {
    let mut s = String::with_capacity(points.len() * 40 + 200);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
        if let Some(c) = colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    s
}

pub fn parse_labels(path: &Path, text: &str) -> Result<(Vec<i32>, Vec<i32>)> {
    let mut sem = Vec::new();
    let mut ins = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(parse_err(path, i + 1, format!("expected 'semantic_id instance_id', found '{line}'")));
        }
        let p = |s: &str| s.parse::<i32>().map_err(|_| parse_err(path, i + 1, format!("bad integer '{s}'")));
        sem.push(p(f[0])?);
        ins.push(p(f[1])?);
    }
    Ok((sem, ins))
}

pub fn read_boxes(path: &Path) -> Result<Vec<Box3D>> {
    let boxes: Vec<Box3D> = serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
    if let Some(i) = boxes.iter().position(|b| !b.is_valid()) {
        return Err(Error::Validation(format!("{}: box {i} has a non-positive or non-finite size", path.display())));
    }
    Ok(boxes)
}

pub fn write_boxes(path: &Path, boxes: &[Box3D]) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(boxes)? + "\n"))
}

/// Reads a scene directory, or a bare `.ply` file.
pub fn load_scene(path: &Path) -> Result<SceneBundle> {
    let (ply, dir): (PathBuf, Option<&Path>) = if path.is_dir() {
        (path.join(POINTS_FILE), Some(path))
    } else {
        (path.to_path_buf(), None)
    };
    let cloud = parse_ply(&ply, &read(&ply)?)?;
    let (mut semantic, mut instance) = (Vec::new(), Vec::new());
    if let Some(labels) = dir.map(|d| d.join(LABELS_FILE)).filter(|p| p.exists()) {
        let (s, i) = parse_labels(&labels, &read(&labels)?)?;
        if s.len() != cloud.points.len() {
            return Err(parse_err(
                &labels,
                s.len().max(1),
                format!("{} labels for {} points", s.len(), cloud.points.len()),
            ));
        }
        (semantic, instance) = (s, i);
    }
    let gt_boxes = gt_boxes_from_instances(&cloud.points, &semantic, &instance);
    let bundle = SceneBundle {
        points: cloud.points,
        colors: cloud.colors,
        semantic,
        instance,
        gt_boxes,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes points.ply, labels.txt (when labeled) and boxes.json into `dir`.
pub fn save_scene(dir: &Path, scene: &SceneBundle) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(POINTS_FILE), &format_ply(&scene.points, scene.colors.as_deref()))?;
    if scene.has_labels() {
        let mut s = String::with_capacity(scene.semantic.len() * 6);
        for (a, b) in scene.semantic.iter().zip(&scene.instance) {
            let _ = writeln!(s, "{a} {b}");
        }
        write(&dir.join(LABELS_FILE), &s)?;
    }
    write_boxes(&dir.join(BOXES_FILE), &scene.gt_boxes)
}
