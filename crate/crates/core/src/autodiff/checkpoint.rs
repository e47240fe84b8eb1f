//! Binary checkpoint format for a [`ParameterStore`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FLRLCKPT"
//! version  u32
//! count    u32      number of entries
//! entry*   name_len u32, name utf-8, ndims u32, dims u64 * ndims, payload f64 * prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"FLRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write_store<W: Write>(store: &ParameterStore, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_store<R: Read>(mut r: R) -> Result<ParameterStore, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = read_u32(&mut r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("entry name is not utf-8".into()))?;
        let ndims = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor =
            Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        store.insert(name, tensor);
    }
    Ok(store)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    write_store(store, std::io::BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<ParameterStore, CheckpointError> {
    let file = std::fs::File::open(path)?;
    read_store(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("velocity.w0", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0e-300, 0.1, f64::MIN_POSITIVE, 7.0]).unwrap());
        s.insert("encoder.bias", Tensor::vector(vec![0.5, -0.25]));
        s.insert("scalar", Tensor::scalar(std::f64::consts::PI));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let mut buf = Vec::new();
        write_store(&s, &mut buf).unwrap();
        let back = read_store(buf.as_slice()).unwrap();
        assert_eq!(s, back);
        let mut again = Vec::new();
        write_store(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut buf = Vec::new();
        write_store(&store(), &mut buf).unwrap();
        buf[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_store(buf.as_slice()),
            Err(CheckpointError::Version { found: 2 })
        ));
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let mut buf = Vec::new();
        write_store(&store(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_store(bad.as_slice()), Err(CheckpointError::BadMagic)));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_store(buf.as_slice()), Err(CheckpointError::Io(_))));
    }
}
