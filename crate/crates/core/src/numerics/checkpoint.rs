//! Binary parameter file: `MUSR`, u32 version, then records of
//! (u16 name length, name, u8 rank, u32 extents, f32 values), all little-endian.

use std::io::{Read, Write};

use super::tensor::{Real, Tensor};
use super::NumericsError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MUSR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(w: &mut W, params: &[(String, &Tensor<T>)]) -> Result<(), NumericsError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in params {
        let name_len = u16::try_from(name.len())
            .map_err(|_| NumericsError::Format(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| NumericsError::Format("rank exceeds 255".into()))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| NumericsError::Format("extent exceeds u32".into()))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>, NumericsError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NumericsError::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| NumericsError::Format("parameter name is not UTF-8".into()))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        if self.pos + n > self.bytes.len() {
            return Err(NumericsError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
