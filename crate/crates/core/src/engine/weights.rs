//! Binary weights file.
//!
//! ```text
//! magic      4 bytes  "CVWT"
//! version    u32 LE   (1)
//! count      u32 LE   number of tensors
//! per tensor:
//!   name_len u16 LE, name (UTF-8, "<node>.<field>")
//!   dtype    u8       0 = f32, 1 = f64
//!   ndim     u8
//!   dims     ndim × u32 LE
//!   data     product(dims) little-endian values
//! crc32      u32 LE   optional; IEEE CRC-32 of every preceding byte
//! ```
//!
//! Tensors are written in (node, field) name order.

use std::path::Path;

use super::tensor::{DType, Element, Param, ParamStore};
use super::EngineError;

pub const MAGIC: &[u8; 4] = b"CVWT";
pub const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> EngineError {
    EngineError::Weights(msg.into())
}

pub fn encode<T: Element>(store: &ParamStore<T>, with_crc: bool) -> Result<Vec<u8>, EngineError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.tensor_count()).map_err(|_| err("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (node, field, p) in store.iter() {
        let name = format!("{node}.{field}");
        let len = u16::try_from(name.len()).map_err(|_| err(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(u8::try_from(p.dims.len()).map_err(|_| err("rank above 255"))?);
        for &d in &p.dims {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| err("dimension above u32"))?.to_le_bytes());
        }
        for &v in &p.data {
            v.put_le(&mut out);
        }
    }
    if with_crc {
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, EngineError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, EngineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a weights file, converting every tensor to `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>, EngineError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| err("tensor name is not UTF-8"))?;
        let (node, field) = name.rsplit_once('.').ok_or_else(|| err(format!("tensor name {name:?} lacks .field")))?;
        let dtype = DType::from_code(c.u8()?).ok_or_else(|| err(format!("{name}: unknown dtype")))?;
        let ndim = c.u8()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(dtype.width()).ok_or_else(|| err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(dtype.width())
            .map(|b| match dtype {
                DType::F32 => T::from_f64(f32::get_le(b) as f64),
                DType::F64 => T::from_f64(f64::get_le(b)),
            })
            .collect();
        store.insert(node, field, Param { dims, data });
    }
    match bytes.len() - c.pos {
        0 => {}
        4 => {
            let stored = c.u32()?;
            let actual = crc32fast::hash(&bytes[..bytes.len() - 4]);
            if stored != actual {
                return Err(err(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
            }
        }
        extra => return Err(err(format!("{extra} trailing bytes"))),
    }
    Ok(store)
}

pub fn save<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<(), EngineError> {
    std::fs::write(path, encode(store, true)?)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParamStore<T>, EngineError> {
    decode(&std::fs::read(path)?)
}
