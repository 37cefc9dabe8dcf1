//! `DSHG` tensor container used for weights and encoded target maps.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DSHG" | version | tensor count | { name_len | name (UTF-8) | rank | dims[rank] | f32 LE data }*
//! ```
//!
//! Tensors are written with rank 4 (NCHW). Lower-rank entries are accepted
//! on read and padded with leading unit dimensions.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DSHG";
pub const VERSION: u32 = 1;

pub fn write(mut w: impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_len(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&u32_len(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&4u32.to_le_bytes())?;
        for d in t.shape().dims() {
            w.write_all(&u32_len(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected DSHG")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated tensor name: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("`{name}` has rank {rank} > 4")));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            dims[4 - rank + i] = read_u32(&mut r)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut raw = vec![0u8; shape.numel() * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated data for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

pub fn write_file(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read(fs::read(path)?.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &[("ab".into(), t)]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"DSHG");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&4u32.to_le_bytes());
        for d in [1u32, 1, 1, 2] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn low_rank_entries_are_padded() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"DSHG");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(b"v");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let got = read(buf.as_slice()).unwrap();
        assert_eq!(got[0].1.shape(), Shape::new(1, 1, 1, 3));
        assert_eq!(got[0].1.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read(&b"NOPE\x01\0\0\0\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let t = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        write(&mut buf, &[("x".into(), t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read(buf.as_slice()), Err(Error::Format(_))));
    }
}
