//! "BATN" parameter checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "BATN"
//! version  u32      1
//! then, per parameter in registration order, until end of file:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents rank × u64
//!   data     product(extents) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::nn::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BATN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!("checkpoint truncated in {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a BATN checkpoint".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Corruption("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Corruption(format!("parameter {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = c.u64("extent")? as usize;
            numel = numel
                .checked_mul(e)
                .filter(|&n| n <= (buf.len() - c.pos) / 8)
                .ok_or_else(|| Error::Corruption(format!("parameter {name} extents exceed file size")))?;
            shape.push(e);
        }
        let raw = c.take(numel * 8, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data).map_err(|e| Error::Corruption(e.to_string()))?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    store.load(decode(&buf)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap());
        s.add("a.bias", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let bytes = encode(&s);
        assert_eq!(&bytes[..4], b"BATN");
        let mut t = sample();
        t.tensors_mut()[0].data_mut().iter_mut().for_each(|v| *v = 0.0);
        t.load(decode(&bytes).unwrap()).unwrap();
        assert_eq!(encode(&t), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(&bytes[12..20], b"a.weight");
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
    }

    #[test]
    fn truncation_and_bad_magic_are_errors() {
        let bytes = encode(&sample());
        for cut in [9, 15, 30, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut huge = bytes;
        huge[24..32].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&huge), Err(Error::Corruption(_))));
    }

    #[test]
    fn mismatched_model_rejected() {
        let bytes = encode(&sample());
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[3, 2]));
        other.add("a.bias", Tensor::zeros(&[3]));
        assert!(other.load(decode(&bytes).unwrap()).is_err());
    }
}
