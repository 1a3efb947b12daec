//! Named-tensor container files.
//!
//! Layout (little-endian): magic `RFCK`, version u32, metadata length u32
//! and UTF-8 JSON bytes, tensor count u32, then per tensor: name length u32,
//! name bytes, rank u32, dims u32…, f32 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use radfield_autodiff::{ParamSet, Real, Tensor};

use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"RFCK";
pub const CONTAINER_VERSION: u32 = 1;

pub fn encode_container(meta: &str, tensors: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::TruncatedPayload { expected: n, found: left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<(String, ParamSet)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: "RFCK".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::VersionMismatch {
            expected: CONTAINER_VERSION,
            found: version,
        });
    }
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|e| Error::Format {
        what: "container metadata",
        msg: e.to_string(),
    })?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format {
            what: "tensor name",
            msg: e.to_string(),
        })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let left = (bytes.len() - r.pos) / 4;
        if left < n {
            return Err(Error::TruncatedPayload { expected: n, found: left });
        }
        let data: Vec<Real> = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((meta, params))
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_container(path: &Path, meta: &str, tensors: &ParamSet) -> Result<()> {
    write_atomic(path, &encode_container(meta, tensors))
}

pub fn read_container(path: &Path) -> Result<(String, ParamSet)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        p.insert("b/c", Tensor::scalar(4.25));
        p
    }

    #[test]
    fn round_trip() {
        let bytes = encode_container("{\"x\":1}", &sample());
        let (meta, p) = decode_container(&bytes).unwrap();
        assert_eq!(meta, "{\"x\":1}");
        assert_eq!(p.get("a").unwrap().data(), sample().get("a").unwrap().data());
        assert_eq!(p.get("b/c").unwrap().shape(), &[] as &[usize]);
    }

    #[test]
    fn errors() {
        let bytes = encode_container("{}", &sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode_container(&ver), Err(Error::VersionMismatch { found: 9, .. })));
        let short = &bytes[..bytes.len() - 8];
        assert!(matches!(decode_container(short), Err(Error::TruncatedPayload { .. })));
    }
}
