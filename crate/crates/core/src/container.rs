//! The `DPSC` tensor container shared by checkpoints and raw datasets.
//!
//! Layout (little-endian throughout): magic `DPSC`, `u16` version, `u32`
//! tensor count, then per tensor a `u16` name length, UTF-8 name, `u8` dtype,
//! `u8` rank, `u32` extents and the raw payload.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"DPSC";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
/// Byte payloads, used for embedded metadata such as architecture text.
pub const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, bytes: Vec<u8> },
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::F32(t) => t.shape(),
            Payload::U8 { shape, .. } => shape,
        }
    }

    pub fn text(s: &str) -> Self {
        Payload::U8 {
            shape: vec![s.len()],
            bytes: s.as_bytes().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

impl Entry {
    pub fn new(name: impl Into<String>, payload: Payload) -> Self {
        Entry {
            name: name.into(),
            payload,
        }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{}`", e.name)));
        }
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {}", e.name.len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let shape = e.payload.shape();
        out.push(match e.payload {
            Payload::F32(_) => DTYPE_F32,
            Payload::U8 { .. } => DTYPE_U8,
        });
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Format("rank above 255".into()))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.payload {
            Payload::F32(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::U8 { shape, bytes } => {
                if bytes.len() != shape.iter().product::<usize>() {
                    return Err(Error::Format(format!("`{}` byte length disagrees with shape", e.name)));
                }
                out.extend_from_slice(bytes);
            }
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing DPSC magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}` extents overflow")))?;
        let payload = match dtype {
            DTYPE_F32 => {
                let bytes = r.take(
                    n.checked_mul(4)
                        .ok_or_else(|| Error::Format("payload overflow".into()))?,
                )?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Payload::F32(Tensor::new(shape, data)?)
            }
            DTYPE_U8 => Payload::U8 {
                bytes: r.take(n)?.to_vec(),
                shape,
            },
            other => return Err(Error::Format(format!("`{name}` has unknown dtype {other}"))),
        };
        entries.push(Entry { name, payload });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(entries)
}

/// Writes `bytes` next to `path` and renames into place, so readers never see
/// a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("{} has no file name", path.display()))))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    write_atomic(path, &encode(entries)?)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    decode(&fs::read(path)?)
}

/// Looks up an `f32` tensor by name.
pub fn find_f32<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Tensor<f32>> {
    match entries.iter().find(|e| e.name == name) {
        Some(Entry {
            payload: Payload::F32(t),
            ..
        }) => Ok(t),
        Some(_) => Err(Error::Format(format!("`{name}` is not a float tensor"))),
        None => Err(Error::Format(format!("missing tensor `{name}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&[Entry::new("w", Payload::F32(t))]).unwrap();
        let mut expect = b"DPSC".to_vec();
        expect.extend_from_slice(&[1, 0, 1, 0, 0, 0, 1, 0, b'w', 0, 1, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_damage() {
        let t = Tensor::new(vec![1], vec![3.0f32]).unwrap();
        let bytes = encode(&[Entry::new("a", Payload::F32(t))]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
