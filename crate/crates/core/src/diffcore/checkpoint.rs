//! Self-describing binary container for model parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CLCP" | version u32 | iteration u64
//! config length u32 | config JSON bytes (UTF-8)
//! param count u32
//! per param: name length u16 | name bytes | rank u8 | dims u32 x rank
//!            | values f32 x prod(dims)
//! ```
//!
//! Values are stored in 32 bits regardless of the scalar the model ran at.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;

use super::params::ParamStore;
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_json: String,
    /// Name, shape, values; in the order the model registered them.
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    iteration: u64,
    config_json: &str,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&iteration.to_le_bytes())?;
    let cfg = config_json.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let iteration = read_u64(&mut r)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_json =
        String::from_utf8(cfg).map_err(|_| CheckpointError::Corrupt("config not UTF-8"))?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("name not UTF-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf));
        }
        params.push((name, shape, values));
    }
    Ok(Checkpoint {
        iteration,
        config_json,
        params,
    })
}

/// Rebuilds a parameter store at scalar type `F` from a loaded checkpoint.
pub fn store_from_checkpoint<F: Scalar>(
    checkpoint: &Checkpoint,
) -> Result<ParamStore<F>, CheckpointError> {
    let mut store = ParamStore::new();
    for (name, shape, values) in &checkpoint.params {
        let data: Vec<F> = values.iter().map(|&v| F::from_f64(v as f64)).collect();
        let tensor =
            Tensor::new(shape, data).map_err(|_| CheckpointError::Corrupt("shape mismatch"))?;
        store
            .register(name, tensor)
            .map_err(|_| CheckpointError::Corrupt("duplicate parameter name"))?;
    }
    Ok(store)
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new();
        store
            .register("mem.sq.c1.weight", Tensor::new(&[2, 3], vec![0.5; 6]).unwrap())
            .unwrap();
        store
            .register("mem.sq.c1.bias", Tensor::new(&[1, 3], vec![-1.25; 3]).unwrap())
            .unwrap();
        save_checkpoint(&path, &store, 1234, "{\"seed\":7}").unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.iteration, 1234);
        assert_eq!(ck.config_json, "{\"seed\":7}");
        assert_eq!(ck.params.len(), 2);
        assert_eq!(ck.params[0].0, "mem.sq.c1.weight");
        assert_eq!(ck.params[0].1, vec![2, 3]);
        assert_eq!(ck.params[1].2, vec![-1.25f32; 3]);

        let restored: ParamStore<f32> = store_from_checkpoint(&ck).unwrap();
        assert_eq!(restored.get("mem.sq.c1.bias").unwrap().data(), &[-1.25f32; 3]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic) | Err(CheckpointError::Io(_))
        ));
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadVersion(9))
        ));
    }
}
