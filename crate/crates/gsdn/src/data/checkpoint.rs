//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "GSDN" | u32 version | u32 len + ModelConfig JSON | u64 iteration
//! u32 array count, then per array:
//!   u32 name len | name (UTF-8) | u32 rank | rank × u64 dims | f32 values (row-major)
//! ```
//!
//! Arrays are the model parameters and buffers in layout order followed by
//! `momentum.<name>` for every trainable parameter.

use std::fs;
use std::path::Path;

use crate::autograd::ParameterStore;
use crate::error::{Error, Result};
use crate::model::{init_parameters, ModelConfig};

pub const MAGIC: &[u8; 4] = b"GSDN";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum.";
/// Upper bound on scalars per array, rejecting corrupt dimension fields.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: u64,
    pub store: ParameterStore<f32>,
}

pub fn encode_checkpoint(store: &ParameterStore<f32>, cfg: &ModelConfig, iteration: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&iteration.to_le_bytes());
    let mut arrays: Vec<(String, &[usize], &[f32])> = Vec::new();
    for e in store.entries() {
        arrays.push((e.name.clone(), &e.shape, &e.data));
    }
    for (id, e) in store.ids().zip(store.entries()) {
        if e.trainable {
            arrays.push((format!("{MOMENTUM_PREFIX}{}", e.name), &e.shape, store.momentum(id)));
        }
    }
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parsed but unvalidated arrays.
struct RawArray {
    name: String,
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn parse(bytes: &[u8]) -> Result<(ModelConfig, u64, Vec<RawArray>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a GSDN checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = r.u32("config length")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let iteration = r.u64("iteration")?;
    let count = r.u32("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(n, "array name")?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("array {name}: rank {rank} is implausible")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            total = total
                .checked_mul(d)
                .filter(|&t| t <= MAX_ELEMENTS)
                .ok_or_else(|| Error::Checkpoint(format!("array {name}: dimension overflow")))?;
            dims.push(d as usize);
        }
        let raw = r.take(total as usize * 4, &format!("values of {name}"))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        arrays.push(RawArray { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((cfg, iteration, arrays))
}

/// Fills `store` from checkpoint bytes. Every array must exist with the
/// store's shape; the first missing or mismatched array is named.
fn fill(store: &mut ParameterStore<f32>, arrays: Vec<RawArray>) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, RawArray> = std::collections::HashMap::new();
    for a in arrays {
        let name = a.name.clone();
        if by_name.insert(name.clone(), a).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (name, shape, trainable) = {
            let e = store.entry(id);
            (e.name.clone(), e.shape.clone(), e.trainable)
        };
        let mut names = vec![name.clone()];
        if trainable {
            names.push(format!("{MOMENTUM_PREFIX}{name}"));
        }
        for (j, n) in names.iter().enumerate() {
            let a = by_name
                .remove(n)
                .ok_or_else(|| Error::Checkpoint(format!("shape mismatch at array {n}: expected {shape:?}, checkpoint has none")))?;
            if a.dims != shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch at array {n}: expected {shape:?}, checkpoint has {:?}",
                    a.dims
                )));
            }
            if j == 0 {
                store.data_mut(id).copy_from_slice(&a.values);
            } else {
                *store.momentum_mut(id) = a.values;
            }
        }
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Checkpoint(format!("unknown array {extra}")));
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (config, iteration, arrays) = parse(bytes)?;
    config.validate().map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let mut store = init_parameters(&config, 0)?;
    fill(&mut store, arrays)?;
    Ok(Checkpoint { config, iteration, store })
}

/// Decodes a checkpoint against a caller-chosen configuration, so shape
/// differences are reported per array.
pub fn decode_checkpoint_as(bytes: &[u8], cfg: &ModelConfig) -> Result<Checkpoint> {
    let (_, iteration, arrays) = parse(bytes)?;
    let mut store = init_parameters(cfg, 0)?;
    fill(&mut store, arrays)?;
    Ok(Checkpoint {
        config: cfg.clone(),
        iteration,
        store,
    })
}

pub fn save_checkpoint(path: &Path, store: &ParameterStore<f32>, cfg: &ModelConfig, iteration: u64) -> Result<()> {
    let bytes = encode_checkpoint(store, cfg, iteration)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Backbone;

    fn cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = init_parameters(&cfg(), 3).unwrap();
        let id = store.id("enc2.down.w").unwrap();
        store.momentum_mut(id)[5] = 0.25;
        let bytes = encode_checkpoint(&store, &cfg(), 42).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.iteration, 42);
        assert_eq!(ck.config, cfg());
        for (a, b) in store.entries().iter().zip(ck.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(ck.store.momentum(id)[5], 0.25);
        assert_eq!(encode_checkpoint(&ck.store, &ck.config, 42).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_typed_errors() {
        let store = init_parameters(&cfg(), 3).unwrap();
        let bytes = encode_checkpoint(&store, &cfg(), 1).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_checkpoint(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(m)) if m.contains("truncated")));
        // first array's first dimension set to 2^62
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first = 12 + json_len + 8 + 4;
        let name_len = u32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()) as usize;
        let dim = first + 4 + name_len + 4;
        let mut huge = bytes.clone();
        huge[dim..dim + 8].copy_from_slice(&(1u64 << 62).to_le_bytes());
        assert!(matches!(decode_checkpoint(&huge), Err(Error::Checkpoint(m)) if m.contains("overflow")));
    }

    #[test]
    fn other_backbone_names_the_first_offending_array() {
        let store = init_parameters(&cfg(), 3).unwrap();
        let bytes = encode_checkpoint(&store, &cfg(), 1).unwrap();
        let deeper = ModelConfig {
            backbone: Backbone::Res34,
            ..cfg()
        };
        let err = decode_checkpoint_as(&bytes, &deeper).unwrap_err().to_string();
        assert!(err.contains("enc1.block1.conv1.w"), "{err}");
        let wider = ModelConfig { base_channels: 3, ..cfg() };
        let err = decode_checkpoint_as(&bytes, &wider).unwrap_err().to_string();
        assert!(err.contains("shape mismatch at array enc1.down.w"), "{err}");
    }

    #[test]
    fn unknown_arrays_are_rejected() {
        let mut store = init_parameters(&cfg(), 3).unwrap();
        store.add("stray", vec![1], vec![0.0], false).unwrap();
        let bytes = encode_checkpoint(&store, &cfg(), 1).unwrap();
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("unknown array stray"), "{err}");
    }
}
