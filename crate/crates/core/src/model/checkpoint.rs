//! `SE2CKPT1` | u32 config length | config JSON | u32 parameter count |
//! per parameter: u32 name length, name, u32 ndim, u32 dims, f32 data.
//! All integers and reals little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::engine::{Array, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SE2CKPT1";

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * model.n_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(&model.cfg)?;
    put_u32(&mut buf, cfg.len())?;
    buf.extend_from_slice(&cfg);
    put_u32(&mut buf, model.params.len())?;
    for (name, a) in model.params.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, a.shape().len())?;
        for &d in a.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in a.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let n = r.u32()?;
    let cfg: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::corrupt(path, format!("config header: {e}")))?;
    let mut model = Model::build(&cfg)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::corrupt(path, "parameter name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::corrupt(path, "parameter size overflows"))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::corrupt(path, "parameter size overflows"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        store.add(name, Array::new(shape, data)?).map_err(|_| Error::corrupt(path, "duplicate parameter name"))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    model.load_params(store)?;
    Ok(model)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in 32 bits")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::corrupt(self.path, "unexpected end of file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_config;
    use crate::model::ConvKind;

    fn f32_exact(m: &mut Model) {
        for a in m.params.values_mut() {
            for v in a.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut m = Model::build(&toy_config(ConvKind::Se2Trans)).unwrap();
        f32_exact(&mut m);
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        let q = dir.path().join("again.ckpt");
        save_checkpoint(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn corruption_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = Model::build(&toy_config(ConvKind::Se2Mlp)).unwrap();
        save_checkpoint(&m, &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptFile { .. })));

        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptFile { .. })));

        let mut extra = good.clone();
        extra.push(0);
        std::fs::write(&p, &extra).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptFile { .. })));

        // a config that no longer matches the stored parameters
        let n = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let mut cfg: ModelConfig = serde_json::from_slice(&good[12..12 + n]).unwrap();
        cfg.hidden_scalar += 1;
        let json = serde_json::to_vec(&cfg).unwrap();
        let mut swapped = good[..8].to_vec();
        swapped.extend_from_slice(&(json.len() as u32).to_le_bytes());
        swapped.extend_from_slice(&json);
        swapped.extend_from_slice(&good[12 + n..]);
        std::fs::write(&p, &swapped).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Mismatch(_))));

        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
    }
}
