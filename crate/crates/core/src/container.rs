//! Versioned binary container for lists of `f64` tensors.
//!
//! Layout (little-endian): 4-byte magic, `u16` version, `u16` reserved,
//! `u32` tensor count, then per tensor a `u32` rank, `rank` `u32` dims and the
//! row-major `f64` data.

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const VERSION: u16 = 1;

pub fn encode(magic: &[u8; 4], tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != magic {
        return Err(Error::format(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    r.take(2, "reserved field")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::format(r.pos as u64 - 4, format!("implausible tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let at = r.pos;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(at as u64, "tensor too large"))?, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(tensors)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let ts = vec![Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.5).collect()).unwrap(), Tensor::scalar(-1.25)];
        let bytes = encode(b"EVDT", &ts);
        assert_eq!(decode(b"EVDT", &bytes).unwrap(), ts);
        assert!(decode(b"EVLG", &bytes).is_err());
        assert!(matches!(decode(b"EVDT", &bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
