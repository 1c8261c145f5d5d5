//! Versioned binary checkpoints.
//!
//! Layout, all integers u32 little-endian: magic `CADA`, format version,
//! config text length and bytes, entry count, then per entry the name length,
//! name, rank (4), four dimensions and the values as f32 little-endian.

use std::path::Path;

use super::Backbone;
use crate::config;
use crate::error::{Error, Result};
use crate::nn::{named_state, EntryMut, Module};
use crate::tensor::{Scalar, Shape};

pub const MAGIC: &[u8; 4] = b"CADA";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes<T: Scalar>(model: &Backbone<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let text = config::model_to_text(&model.config);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    let state = named_state(model);
    put_u32(&mut out, state.len() as u32);
    for (name, shape, values) in state {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 4);
        for d in shape.dims() {
            put_u32(&mut out, d as u32);
        }
        for v in values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Backbone<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing CADA magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let cfg = config::parse_model_text(&r.string()?)?;
    let mut model = Backbone::<T>::build_uninit(&cfg)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank != 4 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}, expected 4")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(shape.numel() * 4)?;
        let values: Vec<f32> = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        entries.push((name, shape, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut it = entries.into_iter();
    let mut err = None;
    model.visit_mut("", &mut |name, e| {
        if err.is_some() {
            return;
        }
        let (slot, shape): (&mut [T], Shape) = match e {
            EntryMut::Param(p) => {
                let s = p.value.shape();
                (p.value.data_mut(), s)
            }
            EntryMut::Buffer(b) => {
                let s = Shape::new(b.len(), 1, 1, 1);
                (b, s)
            }
        };
        match it.next() {
            Some((n, s, v)) if n == name && s == shape => {
                for (d, x) in slot.iter_mut().zip(v) {
                    *d = T::of(x as f64);
                }
            }
            Some((n, s, _)) => err = Some(Error::Checkpoint(format!("entry {n} {s} does not match {name} {shape}"))),
            None => err = Some(Error::Checkpoint(format!("missing entry {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if it.next().is_some() {
        return Err(Error::Checkpoint("more entries than the model has".into()));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Backbone<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Backbone<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
