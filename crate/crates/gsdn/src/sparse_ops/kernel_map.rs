use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::{Coord, Support};

/// How output coordinates relate to input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Output support equals input support (no expansion).
    Submanifold,
    /// Output support is the input support decimated to twice the stride.
    Strided,
    /// Output support is the full kernel stencil of the input at half the stride.
    Transposed,
}

/// Gather/scatter pairs for every kernel offset.
///
/// For offset `δ` (in lattice steps) a pair `(i, o)` means input row `i`
/// contributes `W[δ]·in[i]` to output row `o`, where
/// `in = out + δ·s_in` for forward convolutions and `out = in + δ·s_out` for
/// transposed ones. Pairs under each offset are sorted by output row.
#[derive(Debug)]
pub struct KernelMap {
    pub kernel_size: usize,
    pub offsets: Vec<[i32; 3]>,
    pub pairs: Vec<Vec<(u32, u32)>>,
    /// Offsets whose pairs are exactly `(r, r)` for every row.
    pub identity: Vec<bool>,
    pub in_rows: usize,
    pub out_rows: usize,
}

impl KernelMap {
    pub fn volume(&self) -> usize {
        self.offsets.len()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Offsets of a cubic kernel with half-width `(kernel_size - 1) / 2`, x slowest.
pub fn kernel_offsets(kernel_size: usize) -> Result<Vec<[i32; 3]>> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::Contract(format!("kernel size must be odd and >= 1, got {kernel_size}")));
    }
    let k = (kernel_size / 2) as i32;
    let mut out = Vec::with_capacity(kernel_size.pow(3));
    for dx in -k..=k {
        for dy in -k..=k {
            for dz in -k..=k {
                out.push([dx, dy, dz]);
            }
        }
    }
    Ok(out)
}

/// Output support of a layer, computed from coordinates alone.
pub fn output_support(input: &Support, kind: ConvKind, kernel_size: usize) -> Result<Support> {
    let s = input.stride();
    match kind {
        ConvKind::Submanifold => Ok(Support::new_unchecked(input.coords().to_vec(), s)),
        ConvKind::Strided => {
            let out_stride = 2 * s;
            let mut coords: Vec<Coord> = input.coords().iter().map(|c| c.decimate(out_stride)).collect();
            coords.dedup();
            Support::from_unsorted(coords, out_stride)
        }
        ConvKind::Transposed => {
            if s % 2 != 0 {
                return Err(Error::Contract(format!("transposed convolution needs an even input stride, got {s}")));
            }
            let out_stride = s / 2;
            let offsets = kernel_offsets(kernel_size)?;
            let mut coords = Vec::with_capacity(input.len() * offsets.len());
            for c in input.coords() {
                for d in &offsets {
                    coords.push(c.offset([d[0] * out_stride, d[1] * out_stride, d[2] * out_stride]));
                }
            }
            Support::from_unsorted(coords, out_stride)
        }
    }
}

/// Builds the output support and kernel map of a layer.
pub fn build_kernel_map(input: &Support, kind: ConvKind, kernel_size: usize) -> Result<(Arc<Support>, Arc<KernelMap>)> {
    let offsets = kernel_offsets(kernel_size)?;
    let out = output_support(input, kind, kernel_size)?;
    let s_in = input.stride();
    // Lookup step: in = out + sign·δ·step.
    let (step, sign) = match kind {
        ConvKind::Submanifold | ConvKind::Strided => (s_in, 1),
        ConvKind::Transposed => (out.stride(), -1),
    };
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
    for (o, c) in out.coords().iter().enumerate() {
        for (k, d) in offsets.iter().enumerate() {
            let q = c.offset([sign * d[0] * step, sign * d[1] * step, sign * d[2] * step]);
            if let Some(i) = input.row_of(&q) {
                pairs[k].push((i, o as u32));
            }
        }
    }
    let identity = pairs
        .iter()
        .map(|p| p.len() == input.len() && p.len() == out.len() && p.iter().all(|&(i, o)| i == o))
        .collect();
    let map = KernelMap {
        kernel_size,
        offsets,
        pairs,
        identity,
        in_rows: input.len(),
        out_rows: out.len(),
    };
    Ok((Arc::new(out), Arc::new(map)))
}
