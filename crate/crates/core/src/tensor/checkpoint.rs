//! Checkpoint container: magic bytes "FGF1", an optional architecture header,
//! then one record per parameter of (name length, name, shape rank, extents as
//! 64-bit little-endian, raw little-endian f32 payload).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGF1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint(path: &Path, header: &[u8], params: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| {
            Error::data(format!("truncated checkpoint: {what} at byte offset {at}"))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Returns None cleanly at EOF, an error on a partial read.
    fn u64_or_eof(&mut self, what: &str) -> Result<Option<u64>> {
        let mut b = [0u8; 8];
        let mut got = 0;
        while got < 8 {
            let n = self.inner.read(&mut b[got..]).map_err(Error::Io)?;
            if n == 0 {
                if got == 0 {
                    return Ok(None);
                }
                return Err(Error::data(format!(
                    "truncated checkpoint: {what} at byte offset {}",
                    self.offset
                )));
            }
            got += n;
        }
        self.offset += 8;
        Ok(Some(u64::from_le_bytes(b)))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(Vec<u8>, Vec<CheckpointRecord>)> {
    let mut c = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    c.exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data(format!(
            "bad checkpoint magic {magic:?} at byte offset 0, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let header_len = c.u64("header length")? as usize;
    let mut header = vec![0u8; header_len];
    c.exact(&mut header, "header")?;

    let mut records = Vec::new();
    while let Some(name_len) = c.u64_or_eof("parameter name length")? {
        let mut name = vec![0u8; name_len as usize];
        c.exact(&mut name, "parameter name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::data(format!("non-UTF8 parameter name before offset {}", c.offset)))?;
        let rank = c.u64("shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("shape extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        c.exact(&mut payload, "parameter payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(CheckpointRecord { name, shape, data });
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("fgf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.fgf");

        let mut store = ParamStore::new();
        store.register("a.weight", Tensor::param(vec![2, 3], vec![1.5, -2.25, 0.0, 3.5, -0.125, 9.0]).unwrap());
        store.register("a.bias", Tensor::param(vec![2], vec![0.5, -0.5]).unwrap());
        write_checkpoint(&path, b"{\"mode\":\"x\"}", &store).unwrap();

        let (header, records) = read_checkpoint(&path).unwrap();
        assert_eq!(header, b"{\"mode\":\"x\"}");
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].name, "a.weight");
        assert_eq!(records[0].shape, vec![2, 3]);
        assert_eq!(records[0].data, store.iter().next().unwrap().1.data());
    }

    #[test]
    fn bad_magic_is_rejected_with_offset() {
        let dir = std::env::temp_dir().join("fgf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.fgf");
        std::fs::write(&path, b"NOPE_____").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("offset 0"), "{err}");
    }

    #[test]
    fn truncation_is_rejected_with_offset() {
        let dir = std::env::temp_dir().join("fgf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.fgf");

        let mut store = ParamStore::new();
        store.register("w", Tensor::param(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        write_checkpoint(&path, b"", &store).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();

        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
    }
}
