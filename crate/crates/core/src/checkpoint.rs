//! Binary checkpoints: `MMTC`, version, tensor count, then per tensor its name,
//! rank, dims and little-endian `f32` values; optionally followed by an `OPTS`
//! block holding the optimizer step and moment buffers.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};
use crate::training::OptimizerState;

const MAGIC: &[u8; 4] = b"MMTC";
const OPT_MAGIC: &[u8; 4] = b"OPTS";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParameterStore<f32>, opt: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, store.len() as u32);
    for (name, t) in store.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, t.data());
    }
    if let Some(o) = opt {
        if !o.matches(store) {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        out.extend_from_slice(OPT_MAGIC);
        out.extend_from_slice(&o.step.to_le_bytes());
        for (m, v) in o.m.iter().zip(&o.v) {
            put_f32s(&mut out, m);
            put_f32s(&mut out, v);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterStore<f32>, Option<OptimizerState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParameterStore::new(0);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let data = r.f32s(n)?;
        store.insert(name, Tensor::new(dims, data)?)?;
    }
    if r.pos == bytes.len() {
        return Ok((store, None));
    }
    if r.take(4)? != OPT_MAGIC {
        return Err(Error::Checkpoint("unexpected trailing data".into()));
    }
    let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut opt = OptimizerState { step, m: Vec::new(), v: Vec::new() };
    for (_, t) in store.iter() {
        opt.m.push(r.f32s(t.len())?);
        opt.v.push(r.f32s(t.len())?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("unexpected trailing data".into()));
    }
    Ok((store, Some(opt)))
}

pub fn save(path: &Path, store: &ParameterStore<f32>, opt: Option<&OptimizerState>) -> Result<()> {
    let bytes = encode(store, opt)?;
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterStore<f32>, Option<OptimizerState>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamInit;

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new(4);
        s.declare("a.w", &[3, 2], ParamInit::TruncatedNormal(1.0)).unwrap();
        s.declare("b", &[5], ParamInit::Ones).unwrap();
        s.insert("s", Tensor::scalar(-0.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let mut o = OptimizerState::new(&s);
        o.step = 7;
        o.m[0][1] = 0.25;
        o.v[1][4] = f32::MIN_POSITIVE;
        let (s2, o2) = decode(&encode(&s, Some(&o)).unwrap()).unwrap();
        assert!(s.bitwise_eq(&s2));
        assert!(o.bitwise_eq(&o2.unwrap()));
        let (s3, none) = decode(&encode(&s, None).unwrap()).unwrap();
        assert!(s.bitwise_eq(&s3) && none.is_none());
    }

    #[test]
    fn header_is_little_endian() {
        let b = encode(&store(), None).unwrap();
        assert_eq!(&b[..4], b"MMTC");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
    }

    #[test]
    fn rejects_bad_version_magic_and_truncation() {
        let mut b = encode(&store(), None).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[4] = 2;
        assert!(decode(&b).unwrap_err().to_string().contains("version 2"));
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let s = store();
        save(&p, &s, None).unwrap();
        assert!(load(&p).unwrap().0.bitwise_eq(&s));
    }
}
