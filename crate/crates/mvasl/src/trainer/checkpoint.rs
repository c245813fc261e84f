//! Checkpoint and training-state serialization.
//!
//! Both files share one container: magic, version, the resolved config as
//! JSON, run metadata, then named-tensor sections. `checkpoint.bin` holds
//! the best-epoch parameters for evaluation; `state.bin` additionally holds
//! the optimizer moments, the current parameters, and the best parameters so
//! a resumed run reproduces the uninterrupted one bitwise. Parameters are
//! stored as little-endian f64 — storage-precision floats would break
//! bitwise resume.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Result, TrainError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MASLCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub config_hash: [u8; 32],
    pub epochs_done: u32,
    pub best_epoch: u32,
    pub best_map_c: f64,
    pub adam_step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// A full serialized training snapshot. `moments`/`best_params` are empty
/// in evaluation checkpoints.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub config_json: String,
    pub meta: CheckpointMeta,
    pub params: Vec<NamedTensor>,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub best_params: Vec<NamedTensor>,
}

/// Hash of the resolved config with the epoch budget masked out: resuming
/// with a longer budget must be allowed, anything else must not.
pub fn config_hash(config_json_without_epochs: &str) -> [u8; 32] {
    let digest = Sha256::digest(config_json_without_epochs.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

struct Writer<W: Write> {
    inner: W,
    pos: u64,
}

impl<W: Write> Writer<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(bytes)?;
        self.pos += bytes.len() as u64;
        Ok(())
    }

    fn tensor_section(
        &mut self,
        tensors: &[NamedTensor],
        index: &mut Vec<(String, Vec<usize>, u64)>,
    ) -> std::io::Result<()> {
        self.put(&(tensors.len() as u32).to_le_bytes())?;
        for nt in tensors {
            index.push((nt.name.clone(), nt.tensor.shape().to_vec(), self.pos));
            let name = nt.name.as_bytes();
            self.put(&(name.len() as u16).to_le_bytes())?;
            self.put(name)?;
            self.put(&[nt.tensor.shape().len() as u8])?;
            for &d in nt.tensor.shape() {
                self.put(&(d as u32).to_le_bytes())?;
            }
            for &v in nt.tensor.data() {
                self.put(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Write a snapshot; returns the `(name, shape, offset)` index of every
/// tensor written, in file order.
pub fn write_snapshot(snapshot: &Snapshot, path: &Path) -> Result<Vec<(String, Vec<usize>, u64)>> {
    let mut w = Writer { inner: BufWriter::new(File::create(path)?), pos: 0 };
    w.put(CHECKPOINT_MAGIC)?;
    w.put(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = snapshot.config_json.as_bytes();
    w.put(&(cfg.len() as u32).to_le_bytes())?;
    w.put(cfg)?;
    let m = &snapshot.meta;
    w.put(&m.config_hash)?;
    w.put(&m.epochs_done.to_le_bytes())?;
    w.put(&m.best_epoch.to_le_bytes())?;
    w.put(&m.best_map_c.to_le_bytes())?;
    w.put(&m.adam_step.to_le_bytes())?;
    w.put(&m.rng_seed.to_le_bytes())?;
    w.put(&m.rng_word_pos.to_le_bytes())?;
    let mut index = Vec::new();
    w.tensor_section(&snapshot.params, &mut index)?;
    w.tensor_section(&snapshot.adam_m, &mut index)?;
    w.tensor_section(&snapshot.adam_v, &mut index)?;
    w.tensor_section(&snapshot.best_params, &mut index)?;
    w.inner.flush()?;
    Ok(index)
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| TrainError::BadCheckpoint("truncated checkpoint".into()))
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn tensor_section(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            let mut name = vec![0u8; name_len];
            self.exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TrainError::BadCheckpoint("non-utf8 tensor name".into()))?;
            let mut ndim = [0u8; 1];
            self.exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(self.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            self.exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| TrainError::BadCheckpoint(format!("bad tensor {name}: {e}")))?;
            out.push(NamedTensor { name, tensor });
        }
        Ok(out)
    }
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let mut r = Reader { inner: BufReader::new(File::open(path)?) };
    let mut magic = [0u8; 8];
    r.exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::BadCheckpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.exact(&mut cfg)?;
    let config_json =
        String::from_utf8(cfg).map_err(|_| TrainError::BadCheckpoint("non-utf8 config".into()))?;

    let mut meta = CheckpointMeta::default();
    r.exact(&mut meta.config_hash)?;
    meta.epochs_done = r.u32()?;
    meta.best_epoch = r.u32()?;
    let mut f = [0u8; 8];
    r.exact(&mut f)?;
    meta.best_map_c = f64::from_le_bytes(f);
    meta.adam_step = r.u64()?;
    meta.rng_seed = r.u64()?;
    let mut w = [0u8; 16];
    r.exact(&mut w)?;
    meta.rng_word_pos = u128::from_le_bytes(w);

    let params = r.tensor_section()?;
    let adam_m = r.tensor_section()?;
    let adam_v = r.tensor_section()?;
    let best_params = r.tensor_section()?;
    Ok(Snapshot { config_json, meta, params, adam_m, adam_v, best_params })
}
