//! Self-describing checkpoint container for named parameter tensors.
//!
//! Layout: an 8-byte magic string, a u32 format version, a u32 record count,
//! then per record: name length (u32) + UTF-8 name, rank (u32) + extents
//! (u32 each), and the data as little-endian f64. All integers little-endian.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"THRTLNET";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic { found: [u8; 8] },
    UnsupportedVersion { found: u32 },
    Corrupt { offset: u64, what: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint I/O error: {e}"),
            CheckpointError::BadMagic { found } => {
                write!(f, "not a checkpoint file (magic {:?})", found)
            }
            CheckpointError::UnsupportedVersion { found } => {
                write!(f, "unsupported checkpoint version {found} (expected {VERSION})")
            }
            CheckpointError::Corrupt { offset, what } => {
                write!(f, "corrupt checkpoint at byte {offset}: {what}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Writes named tensors in the given order.
pub fn save(path: &Path, records: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(records.len() as u32)?;
    for (name, tensor) in records {
        let bytes = name.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)?;
        w.write_all(bytes)?;
        w.write_u32::<LittleEndian>(tensor.shape().len() as u32)?;
        for &e in tensor.shape() {
            w.write_u32::<LittleEndian>(e as u32)?;
        }
        for &v in tensor.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads all records back, in file order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic string")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.read_u32("format version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = r.read_u32("record count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32("name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes, "record name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::Corrupt {
            offset: r.offset,
            what: "record name is not UTF-8".into(),
        })?;
        let rank = r.read_u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32("shape extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64("tensor data")?);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt {
            offset: r.offset,
            what: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
        self.inner.read_exact(buf).map_err(|_| CheckpointError::Corrupt {
            offset: self.offset,
            what: format!("truncated while reading {what} ({} bytes expected)", buf.len()),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_data() {
        let dir = std::env::temp_dir().join("tnn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 5.5, -6.125]).unwrap();
        let b = Tensor::scalar(0.99);
        save(&path, &[("layer.w".into(), &a), ("alpha".into(), &b)]).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "layer.w");
        assert_eq!(loaded[0].1.shape(), &[2, 3]);
        assert_eq!(loaded[0].1.data(), a.data());
        assert_eq!(loaded[1].0, "alpha");
        assert_eq!(loaded[1].1.item(), 0.99);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("tnn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badmagic.ckpt");
        std::fs::write(&path, b"NOTATNNCplusmore").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = std::env::temp_dir().join("tnn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save(&path, &[("w".into(), &a)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        match load(&path) {
            Err(CheckpointError::Corrupt { offset, what }) => {
                assert!(offset > 0);
                assert!(what.contains("truncated"));
            }
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }
}
