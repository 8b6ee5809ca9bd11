//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"BEVNETCK"`, `u32` version, 32-byte config digest, `u64` optimizer step,
//! `u32` blob count, then per blob: `u32` name length, UTF-8 name, `u32` rank,
//! `u64` dims, `f64` values. Parameter blobs come first, followed by Adam
//! moments named `adam.m:<param>` and `adam.v:<param>`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::param::ParamStore;
use super::Mat;

const MAGIC: &[u8; 8] = b"BEVNETCK";
const VERSION: u32 = 1;

/// SHA-256 of a canonical configuration text.
pub fn config_digest(canonical: &str) -> [u8; 32] {
    Sha256::digest(canonical.as_bytes()).into()
}

fn put_blob(buf: &mut Vec<u8>, name: &str, m: &Mat) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&2u32.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParamStore, digest: &[u8; 32], step: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&((store.len() * 3) as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_blob(&mut buf, &p.name, &p.value);
    }
    for (_, p) in store.iter() {
        put_blob(&mut buf, &format!("adam.m:{}", p.name), &p.m);
    }
    for (_, p) in store.iter() {
        put_blob(&mut buf, &format!("adam.v:{}", p.name), &p.v);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Restores values and moments into `store` (matched by name and shape); returns the optimizer step.
pub fn decode(bytes: &[u8], store: &mut ParamStore, digest: &[u8; 32]) -> Result<u64> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    if r.take(32)? != digest {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut seen = 0;
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 blob name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (kind, pname) = match name.split_once(':') {
            Some((k, p)) if k == "adam.m" || k == "adam.v" => (k, p),
            _ => ("value", name.as_str()),
        };
        let id = store
            .by_name(pname)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{pname}`")))?;
        let p = store.get_mut(id);
        let shape = (p.value.rows(), p.value.cols());
        if rank != 2 || (dims[0], dims[1]) != shape {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`: {dims:?} vs {shape:?}")));
        }
        let m = Mat::from_vec(shape.0, shape.1, vals);
        match kind {
            "adam.m" => p.m = m,
            "adam.v" => p.v = m,
            _ => {
                p.value = m;
                seen += 1;
            }
        }
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint holds {seen} of {} parameters", store.len())));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    store.zero_grads();
    Ok(step)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, digest: &[u8; 32], step: u64) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store, digest, step)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>, store: &mut ParamStore, digest: &[u8; 32]) -> Result<u64> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, store, digest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let a = s.add("enc.0.w", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        s.add("enc.0.b", Mat::from_vec(1, 3, vec![-0.5, 0.25, 1e-300]));
        s.get_mut(a).m = Mat::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        s
    }

    #[test]
    fn round_trip_restores_values_and_moments() {
        let src = store();
        let d = config_digest("cfg");
        let bytes = encode(&src, &d, 17);
        let mut dst = store();
        for p in dst.iter_mut() {
            p.value.fill(0.0);
            p.m.fill(0.0);
        }
        assert_eq!(decode(&bytes, &mut dst, &d).unwrap(), 17);
        assert_eq!(dst, src);
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let src = store();
        let bytes = encode(&src, &config_digest("a"), 0);
        let mut dst = store();
        assert!(matches!(decode(&bytes, &mut dst, &config_digest("b")), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..bytes.len() - 3], &mut dst, &config_digest("a")).is_err());
    }
}
