//! Parameter checkpoint file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "FNRC"
//! version      u32      currently 1
//! meta_len     u32      length of the metadata blob
//! meta         bytes    UTF-8 text (the experiment configuration)
//! n_arrays     u32
//! repeated n_arrays times:
//!   name_len   u32
//!   name       bytes    UTF-8
//!   ndim       u32
//!   dims       u64 x ndim
//!   values     f64 x product(dims)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing array `{0}`")]
    Missing(String),
}

/// Named arrays plus a free-form metadata string.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.metadata.as_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let metadata = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let n = read_u32(&mut r)?;
        let mut arrays = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            let mut b = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            arrays.push((name, t));
        }
        Ok(Checkpoint { metadata, arrays })
    }

    /// Writes through a temporary sibling file and renames, so a crash never
    /// leaves a truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = io::BufReader::new(fs::File::open(path)?);
        Checkpoint::read_from(f)
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let ck = Checkpoint {
            metadata: "[model]\nhidden_dim = 32\n".into(),
            arrays: vec![
                (
                    "w".into(),
                    Tensor::from_rows(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]),
                ),
                ("b".into(), Tensor::row(&[0.1])),
            ],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FNRC");
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOPE\x01\x00\x00\x00"[..]),
            Err(CheckpointError::Magic)
        ));
        let ck = Checkpoint {
            metadata: String::new(),
            arrays: vec![("w".into(), Tensor::zeros(4, 4))],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
