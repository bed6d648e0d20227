//! Binary named-tensor container.
//!
//! Layout, all integers little-endian: `"PHYC"`, version `u32`, tensor
//! count `u32`, then per tensor: name length `u32`, UTF-8 name, ndim `u32`,
//! dims `u64` each, `f32` data in row-major order. A CRC32 of every
//! preceding byte closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PHYC";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
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
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    let mut cur = Cursor {
        buf: payload,
        pos: 4,
    };
    let version = cur.u32()?;
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = cur.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Config("checkpoint tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(usize::try_from(cur.u64()?).map_err(|_| Error::Truncated)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(Error::Truncated)?;
        let raw = cur.take(numel.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if store.contains(&name) {
            return Err(Error::DuplicateName(name));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != payload.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} trailing bytes",
            payload.len() - cur.pos
        )));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    io::write_bytes(path, &encode(store))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    decode(&io::read_bytes(path)?)
}

/// Stores arbitrary bytes as a 1-D tensor, one byte per element.
pub fn bytes_tensor(bytes: &[u8]) -> Tensor<f32> {
    Tensor::new(vec![bytes.len()], bytes.iter().map(|&b| b as f32).collect())
        .expect("byte values are finite")
}

pub fn tensor_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&x| {
            if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(Error::Config(format!("tensor value {x} is not a byte")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "a.w",
            Tensor::new(
                vec![2, 3],
                vec![1.0, -0.0, 2.5, f32::MIN_POSITIVE, 7.0, 1e-30],
            )
            .unwrap(),
        );
        s.insert("b", Tensor::scalar(3.25f32));
        s.insert("meta", bytes_tensor(b"{\"x\":1}"));
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = store();
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        for (name, t) in s.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = u.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(
            tensor_bytes(back.get("meta").unwrap()).unwrap(),
            b"{\"x\":1}"
        );
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"PHYC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // first tensor sorted by name is "a.w"
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.w");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&store());
        for i in [12, 20, bytes.len() / 2, bytes.len() - 5] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(
                matches!(decode(&bad), Err(Error::CrcMismatch { .. })),
                "{i}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic)));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Truncated)));
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&v2), Err(Error::VersionMismatch(2))));
    }

    #[test]
    fn truncated_body_with_valid_crc() {
        let bytes = encode(&store());
        let mut cut = bytes[..bytes.len() - 12].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&cut), Err(Error::Truncated)));
    }
}
