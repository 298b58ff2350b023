//! Binary tensor container shared by checkpoints, feature caches and
//! embedding files.
//!
//! ```text
//! magic "HVFW" | version u32 LE | count u32 LE
//! per entry: name_len u16 LE | name (UTF-8) | rank u8 | dims u64 LE * rank | f32 LE * numel
//! ```
//! Entries are written in lexicographic name order.

use std::io::{Read, Write};

use super::{numel, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HVFW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_container<W: Write>(mut w: W, entries: &[ContainerEntry]) -> Result<()> {
    let mut sorted: Vec<&ContainerEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    if sorted.windows(2).any(|p| p[0].name == p[1].name) {
        return Err(Error::Format("duplicate entry name".into()));
    }

    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(sorted.len()).map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for e in sorted {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.shape.len()).map_err(|_| Error::Format(format!("rank too large: {}", e.name)))?;
        if numel(&e.shape) != e.data.len() {
            return Err(Error::shape("write_container", &e.shape, &[e.data.len()]));
        }
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for d in &e.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.data.len() * 4);
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated while reading {what}")))?;
    Ok(buf)
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<ContainerEntry>> {
    let magic = read_exact(&mut r, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, 4, "count")?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, 2, "name length")?.try_into().unwrap());
        let name = String::from_utf8(read_exact(&mut r, len as usize, "name")?)
            .map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1, "rank")?[0];
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_exact(&mut r, 8, "dims")?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let n = numel(&shape);
        let raw = read_exact(&mut r, n * 4, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(ContainerEntry { name, shape, data });
    }
    Ok(out)
}

impl ParamStore {
    pub fn to_entries(&self) -> Vec<ContainerEntry> {
        self.sorted_ids()
            .map(|id| ContainerEntry {
                name: self.name(id).to_string(),
                shape: self.get(id).shape().to_vec(),
                data: self.get(id).to_vec(),
            })
            .collect()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_container(w, &self.to_entries())
    }

    /// Overwrites every parameter from `r`. Names and shapes must match exactly.
    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let entries = read_container(r)?;
        if entries.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                entries.len(),
                self.len()
            )));
        }
        for e in entries {
            let id = self
                .id(&e.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", e.name)))?;
            if self.get(id).shape() != e.shape.as_slice() {
                return Err(Error::shape("load", self.get(id).shape(), &e.shape));
            }
            self.set(id, e.data)?;
        }
        Ok(())
    }
}
