//! Sparse tensor core: lattice coordinates, supports, quantization and
//! support-set algebra.
//!
//! A sparse tensor is a sorted set of unique integer coordinates (its
//! *support*) plus one feature row per coordinate. Coordinates are always kept
//! in lexicographic `(batch, x, y, z)` order, so two tensors with the same
//! support have identical row layouts and results are bit-reproducible.

use std::cmp::Ordering;
use std::sync::{Arc, OnceLock};

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Matrix, Real};

/// A lattice point in voxel units, tagged with the scene index inside a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub batch: i32,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord {
    pub const fn new(batch: i32, x: i32, y: i32, z: i32) -> Self {
        Self { batch, x, y, z }
    }

    pub fn xyz(&self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    pub fn offset(&self, d: [i32; 3]) -> Self {
        Self::new(self.batch, self.x + d[0], self.y + d[1], self.z + d[2])
    }

    /// True when every spatial component is a multiple of `stride`.
    pub fn on_lattice(&self, stride: i32) -> bool {
        self.x.rem_euclid(stride) == 0 && self.y.rem_euclid(stride) == 0 && self.z.rem_euclid(stride) == 0
    }

    /// Snaps to the enclosing cell of a coarser lattice: `floor(c / stride) * stride`.
    pub fn decimate(&self, stride: i32) -> Self {
        Self::new(
            self.batch,
            self.x.div_euclid(stride) * stride,
            self.y.div_euclid(stride) * stride,
            self.z.div_euclid(stride) * stride,
        )
    }
}

/// Sorted unique coordinates on a stride-`s` lattice.
#[derive(Debug)]
pub struct Support {
    coords: Vec<Coord>,
    stride: i32,
    index: OnceLock<FxHashMap<Coord, u32>>,
}

impl Clone for Support {
    /// The lookup index is rebuilt lazily by the clone.
    fn clone(&self) -> Self {
        Self::new_unchecked(self.coords.clone(), self.stride)
    }
}

impl PartialEq for Support {
    fn eq(&self, other: &Self) -> bool {
        self.stride == other.stride && self.coords == other.coords
    }
}

impl Support {
    /// Validates ordering, uniqueness and stride discipline.
    pub fn new(coords: Vec<Coord>, stride: i32) -> Result<Self> {
        if stride < 1 {
            return Err(Error::Contract(format!("stride must be positive, got {stride}")));
        }
        for w in coords.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Contract(format!(
                    "coordinates not strictly increasing: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(c) = coords.iter().find(|c| !c.on_lattice(stride)) {
            return Err(Error::Contract(format!("{c:?} is not on the stride-{stride} lattice")));
        }
        Ok(Self::new_unchecked(coords, stride))
    }

    /// Sorts and deduplicates arbitrary coordinates.
    pub fn from_unsorted(mut coords: Vec<Coord>, stride: i32) -> Result<Self> {
        coords.sort_unstable();
        coords.dedup();
        Self::new(coords, stride)
    }

    pub(crate) fn new_unchecked(coords: Vec<Coord>, stride: i32) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        Self {
            coords,
            stride,
            index: OnceLock::new(),
        }
    }

    pub fn empty(stride: i32) -> Self {
        Self::new_unchecked(Vec::new(), stride)
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn index(&self) -> &FxHashMap<Coord, u32> {
        self.index.get_or_init(|| {
            self.coords
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, i as u32))
                .collect()
        })
    }

    pub fn row_of(&self, c: &Coord) -> Option<u32> {
        self.index().get(c).copied()
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.row_of(c).is_some()
    }

    pub fn to_set(&self) -> FxHashSet<Coord> {
        self.coords.iter().copied().collect()
    }

    /// Keeps rows whose mask entry is true; order preserved.
    pub fn filter(&self, keep: &[bool]) -> Result<(Support, Vec<u32>)> {
        if keep.len() != self.len() {
            return Err(Error::Contract(format!(
                "mask length {} does not match nnz {}",
                keep.len(),
                self.len()
            )));
        }
        let rows: Vec<u32> = (0..self.len() as u32).filter(|&i| keep[i as usize]).collect();
        let coords = rows.iter().map(|&i| self.coords[i as usize]).collect();
        Ok((Support::new_unchecked(coords, self.stride), rows))
    }
}

/// Result of merging two sorted supports.
#[derive(Debug)]
pub struct UnionMap {
    pub support: Support,
    /// Output row of every row of the left operand.
    pub left_rows: Vec<u32>,
    /// Output row of every row of the right operand.
    pub right_rows: Vec<u32>,
}

/// Merges two supports of equal stride into their sorted union.
pub fn support_union(a: &Support, b: &Support) -> Result<UnionMap> {
    if a.stride() != b.stride() {
        return Err(Error::Contract(format!(
            "stride mismatch in union: {} vs {}",
            a.stride(),
            b.stride()
        )));
    }
    let (ca, cb) = (a.coords(), b.coords());
    let mut coords = Vec::with_capacity(ca.len().max(cb.len()));
    let mut left_rows = Vec::with_capacity(ca.len());
    let mut right_rows = Vec::with_capacity(cb.len());
    let (mut i, mut j) = (0, 0);
    while i < ca.len() || j < cb.len() {
        let ord = match (ca.get(i), cb.get(j)) {
            (Some(x), Some(y)) => x.cmp(y),
            (Some(_), None) => Ordering::Less,
            _ => Ordering::Greater,
        };
        let row = coords.len() as u32;
        match ord {
            Ordering::Less => {
                coords.push(ca[i]);
                left_rows.push(row);
                i += 1;
            }
            Ordering::Greater => {
                coords.push(cb[j]);
                right_rows.push(row);
                j += 1;
            }
            Ordering::Equal => {
                coords.push(ca[i]);
                left_rows.push(row);
                right_rows.push(row);
                i += 1;
                j += 1;
            }
        }
    }
    Ok(UnionMap {
        support: Support::new_unchecked(coords, a.stride()),
        left_rows,
        right_rows,
    })
}

/// A sparse tensor: a shared support plus a feature row per coordinate.
#[derive(Clone, Debug)]
pub struct SparseTensor<T> {
    support: Arc<Support>,
    feats: Matrix<T>,
}

impl<T: Real> SparseTensor<T> {
    pub fn new(support: Arc<Support>, feats: Matrix<T>) -> Result<Self> {
        if support.len() != feats.rows() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} feature rows",
                support.len(),
                feats.rows()
            )));
        }
        Ok(Self { support, feats })
    }

    /// Builds a tensor from unsorted `(coord, feature row)` pairs. Duplicate
    /// coordinates are rejected.
    pub fn from_pairs(mut rows: Vec<(Coord, Vec<T>)>, stride: i32, channels: usize) -> Result<Self> {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut coords = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * channels);
        for (c, f) in rows {
            if f.len() != channels {
                return Err(Error::Shape(format!("row at {c:?} has {} channels, expected {channels}", f.len())));
            }
            coords.push(c);
            data.extend(f);
        }
        let support = Support::new(coords, stride)?;
        let n = support.len();
        Self::new(Arc::new(support), Matrix::from_vec(n, channels, data))
    }

    pub fn empty(stride: i32, channels: usize) -> Self {
        Self {
            support: Arc::new(Support::empty(stride)),
            feats: Matrix::zeros(0, channels),
        }
    }

    pub fn support(&self) -> &Arc<Support> {
        &self.support
    }

    pub fn coords(&self) -> &[Coord] {
        self.support.coords()
    }

    pub fn feats(&self) -> &Matrix<T> {
        &self.feats
    }

    pub fn into_feats(self) -> Matrix<T> {
        self.feats
    }

    pub fn stride(&self) -> i32 {
        self.support.stride()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    pub fn feature(&self, c: &Coord) -> Option<&[T]> {
        self.support.row_of(c).map(|r| self.feats.row(r as usize))
    }

    pub fn cast<U: Real>(&self) -> SparseTensor<U> {
        SparseTensor {
            support: self.support.clone(),
            feats: self.feats.cast(),
        }
    }

    /// Shifts every coordinate by `d` (which must respect the stride).
    pub fn translate(&self, d: [i32; 3]) -> Result<Self> {
        let coords: Vec<Coord> = self.coords().iter().map(|c| c.offset(d)).collect();
        let support = Support::new(coords, self.stride())?;
        Self::new(Arc::new(support), self.feats.clone())
    }

    /// Stacks single-scene tensors into one batch tensor, assigning batch index `i` to input `i`.
    pub fn stack_batches(parts: &[SparseTensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("cannot stack zero tensors".into()));
        };
        let (stride, channels) = (first.stride(), first.channels());
        let mut coords = Vec::new();
        let mut data = Vec::new();
        for (b, p) in parts.iter().enumerate() {
            if p.stride() != stride || p.channels() != channels {
                return Err(Error::Contract("stacked tensors must share stride and channels".into()));
            }
            coords.extend(p.coords().iter().map(|c| Coord::new(b as i32, c.x, c.y, c.z)));
            data.extend_from_slice(p.feats().as_slice());
        }
        let n = coords.len();
        let support = Support::new(coords, stride)?;
        Self::new(Arc::new(support), Matrix::from_vec(n, channels, data))
    }
}

/// Output of [`quantize`].
#[derive(Clone, Debug)]
pub struct QuantizationResult {
    pub tensor: SparseTensor<f32>,
    /// Row of `tensor` holding each input point.
    pub point_to_voxel: Vec<u32>,
}

/// Voxelizes a point cloud at `voxel_size` meters; each voxel's feature is the
/// mean of the features of the points it contains.
pub fn quantize(points: &[[f64; 3]], features: &Matrix<f32>, voxel_size: f64) -> Result<QuantizationResult> {
    if points.is_empty() {
        return Err(Error::Validation("quantize needs at least one point".into()));
    }
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Validation(format!("voxel size must be positive, got {voxel_size}")));
    }
    if features.rows() != points.len() {
        return Err(Error::Validation(format!(
            "{} points but {} feature rows",
            points.len(),
            features.rows()
        )));
    }
    let mut cells = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("point row {i} is not finite: {p:?}")));
        }
        if features.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("feature row {i} is not finite")));
        }
        let cell = p.map(|v| (v / voxel_size).floor());
        if cell.iter().any(|v| v.abs() > i32::MAX as f64 / 4.0) {
            return Err(Error::Validation(format!("point row {i} is outside the representable lattice")));
        }
        cells.push(Coord::new(0, cell[0] as i32, cell[1] as i32, cell[2] as i32));
    }
    let support = Support::from_unsorted(cells.clone(), 1)?;
    let channels = features.cols();
    let mut sums = vec![0f64; support.len() * channels];
    let mut counts = vec![0u32; support.len()];
    let mut point_to_voxel = Vec::with_capacity(points.len());
    for (i, c) in cells.iter().enumerate() {
        let r = support.row_of(c).expect("cell present") as usize;
        point_to_voxel.push(r as u32);
        counts[r] += 1;
        for (s, &f) in sums[r * channels..(r + 1) * channels].iter_mut().zip(features.row(i)) {
            *s += f as f64;
        }
    }
    let data = sums
        .chunks(channels.max(1))
        .zip(&counts)
        .flat_map(|(row, &n)| row.iter().map(move |&s| (s / n as f64) as f32))
        .collect::<Vec<_>>();
    let n = support.len();
    let data = if channels == 0 { Vec::new() } else { data };
    Ok(QuantizationResult {
        tensor: SparseTensor::new(Arc::new(support), Matrix::from_vec(n, channels, data))?,
        point_to_voxel,
    })
}

/// Union-support addition: overlapping rows are summed, the rest copied.
pub fn tensor_add<T: Real>(a: &SparseTensor<T>, b: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    if a.channels() != b.channels() {
        return Err(Error::Contract(format!(
            "channel mismatch in addition: {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    let u = support_union(a.support(), b.support())?;
    let mut feats = Matrix::zeros(u.support.len(), a.channels());
    for (src, rows) in [(a, &u.left_rows), (b, &u.right_rows)] {
        for (i, &r) in rows.iter().enumerate() {
            for (o, &v) in feats.row_mut(r as usize).iter_mut().zip(src.feats().row(i)) {
                *o += v;
            }
        }
    }
    SparseTensor::new(Arc::new(u.support), feats)
}

/// Dense `[channel][x][y][z]` array covering a box of lattice cells.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid<T> {
    pub channels: usize,
    pub extent: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> DenseGrid<T> {
    pub fn zeros(channels: usize, extent: [usize; 3]) -> Self {
        Self {
            channels,
            extent,
            data: vec![T::zero(); channels * extent[0] * extent[1] * extent[2]],
        }
    }

    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.extent[0] + x) * self.extent[1] + y) * self.extent[2] + z
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(c, x, y, z)]
    }
}

/// Writes a sparse tensor into a dense window anchored at `origin` with
/// `extent` cells per axis, each cell one stride wide.
pub fn densify<T: Real>(t: &SparseTensor<T>, origin: Coord, extent: [usize; 3]) -> Result<DenseGrid<T>> {
    let s = t.stride();
    let mut grid = DenseGrid::zeros(t.channels(), extent);
    let mut offenders = Vec::new();
    for (row, c) in t.coords().iter().enumerate() {
        let rel = [c.x - origin.x, c.y - origin.y, c.z - origin.z];
        let inside = c.batch == origin.batch
            && rel.iter().zip(extent).all(|(&r, e)| r >= 0 && r % s == 0 && ((r / s) as usize) < e);
        if !inside {
            offenders.push(*c);
            continue;
        }
        let [x, y, z] = rel.map(|r| (r / s) as usize);
        for ch in 0..t.channels() {
            let idx = grid.index(ch, x, y, z);
            grid.data[idx] = t.feats().get(row, ch);
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Contract(format!("coordinates outside the dense window: {offenders:?}")));
    }
    Ok(grid)
}

/// Inverse of [`densify`]: every cell with a nonzero feature becomes a row.
pub fn sparsify<T: Real>(grid: &DenseGrid<T>, origin: Coord, stride: i32) -> Result<SparseTensor<T>> {
    let [ex, ey, ez] = grid.extent;
    let mut rows = Vec::new();
    for x in 0..ex {
        for y in 0..ey {
            for z in 0..ez {
                let f: Vec<T> = (0..grid.channels).map(|c| grid.get(c, x, y, z)).collect();
                if f.iter().any(|v| *v != T::zero()) {
                    let c = origin.offset([x as i32 * stride, y as i32 * stride, z as i32 * stride]);
                    rows.push((c, f));
                }
            }
        }
    }
    SparseTensor::from_pairs(rows, stride, grid.channels)
}
