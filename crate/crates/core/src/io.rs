//! Little-endian binary containers for tensors, label grids and checkpoints.
//!
//! Tensor: `SSOCTEN1`, five `u32` dims, `f64` data. Labels: `SSOCLAB1`, four
//! `u32` dims, one byte per voxel. Checkpoint: `SSOCCKP1`, `u32` header length,
//! JSON header (entries with name, shape and element offset, plus arbitrary
//! metadata), then all parameter values as `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ModuleParams, Param};
use crate::tensor::{numel, OccupancyGrid, VoxelTensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"SSOCTEN1";
pub const LABEL_MAGIC: &[u8; 8] = b"SSOCLAB1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSOCCKP1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(Error::Format(format!("{what}: bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(Self { buf, pos: 8, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                Error::Format(format!("{}: truncated at byte {} (need {n} more)", self.what, self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes =
            self.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    out.reserve(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &VoxelTensor) -> Result<Vec<u8>> {
    let mut out = TENSOR_MAGIC.to_vec();
    for d in t.dims() {
        push_u32(&mut out, d)?;
    }
    push_f64s(&mut out, t.data());
    Ok(out)
}

pub fn decode_tensor(buf: &[u8]) -> Result<VoxelTensor> {
    let mut r = Reader::new(buf, TENSOR_MAGIC, "tensor")?;
    let mut dims = [0; 5];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let data = r.f64s(numel(&dims))?;
    r.finish()?;
    VoxelTensor::new(dims, data)
}

pub fn encode_labels(g: &OccupancyGrid) -> Result<Vec<u8>> {
    let mut out = LABEL_MAGIC.to_vec();
    for d in g.dims() {
        push_u32(&mut out, d)?;
    }
    out.extend_from_slice(g.labels());
    Ok(out)
}

pub fn decode_labels(buf: &[u8]) -> Result<OccupancyGrid> {
    let mut r = Reader::new(buf, LABEL_MAGIC, "labels")?;
    let mut dims = [0; 4];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let labels = r.take(numel(&dims))?.to_vec();
    r.finish()?;
    OccupancyGrid::new(dims, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements from the start of the data block.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub rng_seed: u64,
    pub entries: Vec<CheckpointEntry>,
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint(params: &ModuleParams, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, p) in params.iter() {
        entries.push(CheckpointEntry { name: name.clone(), shape: p.shape.clone(), offset });
        offset += p.len();
    }
    let header = CheckpointHeader { rng_seed: params.rng_seed, entries, metadata: metadata.clone() };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = CHECKPOINT_MAGIC.to_vec();
    push_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        push_f64s(&mut out, &p.values);
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ModuleParams, serde_json::Value)> {
    let mut r = Reader::new(buf, CHECKPOINT_MAGIC, "checkpoint")?;
    let n = r.u32()?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let total: usize = header.entries.iter().map(|e| numel(&e.shape)).sum();
    let data = r.f64s(total)?;
    r.finish()?;
    let mut params = ModuleParams::new(header.rng_seed);
    for e in &header.entries {
        let len = numel(&e.shape);
        let vals = data
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Format(format!("checkpoint entry '{}' out of bounds", e.name)))?;
        params.insert(&e.name, Param::new(e.shape.clone(), vals.to_vec())?)?;
    }
    Ok((params, header.metadata))
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| with_path(e, path))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| with_path(e, path))
}

pub fn save_tensor(path: &Path, t: &VoxelTensor) -> Result<()> {
    write_file(path, &encode_tensor(t)?)
}

pub fn load_tensor(path: &Path) -> Result<VoxelTensor> {
    decode_tensor(&read_file(path)?)
}

pub fn save_labels(path: &Path, g: &OccupancyGrid) -> Result<()> {
    write_file(path, &encode_labels(g)?)
}

pub fn load_labels(path: &Path) -> Result<OccupancyGrid> {
    decode_labels(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_and_layout() {
        let t = VoxelTensor::random([1, 2, 3, 1, 2], 4);
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..8], TENSOR_MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(b.len(), 8 + 20 + 12 * 8);
        assert_eq!(decode_tensor(&b).unwrap(), t);
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let b = encode_tensor(&VoxelTensor::zeros([1, 1, 1, 1, 2])).unwrap();
        assert!(matches!(decode_tensor(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut long = b.clone();
        long.push(0);
        assert!(decode_tensor(&long).is_err());
        assert!(decode_labels(&b).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let g = OccupancyGrid::new([1, 2, 1, 2], vec![0, 3, 1, 2]).unwrap();
        assert_eq!(decode_labels(&encode_labels(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModuleParams::new(11);
        p.init_conv3d("enc", 2, 1, 3).unwrap();
        p.init_conv1d("se.reduce", 1, 2).unwrap();
        let meta = serde_json::json!({"step": 3});
        let b = encode_checkpoint(&p, &meta).unwrap();
        let (q, m) = decode_checkpoint(&b).unwrap();
        assert_eq!(q, p);
        assert_eq!(m, meta);
        assert_eq!(b, encode_checkpoint(&q, &m).unwrap());
    }
}
