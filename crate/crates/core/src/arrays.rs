//! Flat binary array files: 8-byte magic `ADPFARR1`, little-endian `u32`
//! rank, one `u64` per dimension, then little-endian `f32` data.

use std::fs;
use std::path::Path;

use adaperf_autograd::Tensor;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ADPFARR1";

pub fn write_array(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * t.shape().len() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: m.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("bad array magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated array header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad("array size does not match its shape"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let t = Tensor::new(&[2, 1, 3], vec![0.0, -1.5, 2.0, f32::MAX, 1e-30, 7.0]).unwrap();
        write_array(&p, &t).unwrap();
        assert!(read_array(&p).unwrap().bit_eq(&t));
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&p, bytes).unwrap();
        assert!(read_array(&p).is_err());
    }
}
