//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"STAGNNCK"
//! version  u8 (= 1)
//! meta     u32 length + UTF-8 bytes (free-form, JSON by convention)
//! count    u32
//! tensor*  u32 name length, name bytes, u64 rows, u64 cols, rows·cols f64
//! ```

use std::fs;
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"STAGNNCK";
pub const VERSION: u8 = 1;

pub fn encode(params: &ParamStore, meta: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params.names().iter().zip(params.values()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = r.string()?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((params, meta))
}

pub fn save(path: &Path, params: &ParamStore, meta: &str) -> Result<()> {
    fs::write(path, encode(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::from_rows(&[[1.0, 2.0]]));
        let bytes = encode(&p, "{}");
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes[8], VERSION);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        // magic + version + meta + count + name + dims + payload
        assert_eq!(bytes.len(), 8 + 1 + 4 + 2 + 4 + 4 + 1 + 16 + 16);
        assert_eq!(&bytes[bytes.len() - 8..], &2.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::zeros(2, 2));
        let bytes = encode(&p, "");
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(tensors in proptest::collection::vec(
            ("[a-z_.]{1,12}", 0usize..4, 0usize..4, any::<u64>()), 0..5),
            meta in ".{0,40}")
        {
            let mut p = ParamStore::new();
            for (name, r, c, seed) in &tensors {
                let data = (0..r * c).map(|i| f64::from_bits(seed.wrapping_add(i as u64) >> 2)).collect();
                p.insert(name.clone(), Matrix::from_vec(*r, *c, data).unwrap());
            }
            let (back, m) = decode(&encode(&p, &meta)).unwrap();
            prop_assert_eq!(m, meta);
            prop_assert_eq!(back.names(), p.names());
            for (a, b) in back.values().iter().zip(p.values()) {
                prop_assert_eq!(a.shape(), b.shape());
                prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
