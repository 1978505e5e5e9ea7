//! Binary checkpoints for parameter stores.
//!
//! Layout (all little-endian):
//! ```text
//! magic   8 bytes  "SRLCKPT1"
//! u32     meta entry count
//!   per entry: u16 key length, key bytes, f64 value
//! u32     tensor count
//!   per tensor: u16 name length, name bytes, u8 group tag,
//!               u32 rows, u32 cols, rows*cols f64 values
//! ```
//! Values are stored as raw f64 bits, so a save/load round trip is
//! bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::nn::params::{ParamGroup, ParamStore};

const MAGIC: &[u8; 8] = b"SRLCKPT1";

fn group_tag(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::Model => 1,
        ParamGroup::Policy => 2,
        ParamGroup::Discriminator => 3,
        ParamGroup::Target => 4,
    }
}

fn tag_group(t: u8) -> Result<ParamGroup> {
    Ok(match t {
        0 => ParamGroup::Encoder,
        1 => ParamGroup::Model,
        2 => ParamGroup::Policy,
        3 => ParamGroup::Discriminator,
        4 => ParamGroup::Target,
        other => return Err(Error::Format(format!("unknown parameter group tag {other}"))),
    })
}

/// A loaded checkpoint: metadata scalars plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: Vec<(String, f64)>,
    pub tensors: Vec<(String, ParamGroup, Matrix)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<f64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Copy tensor values into `store`, matching by name. Every checkpoint
    /// tensor must exist in the store with the same shape and group; store
    /// tensors missing from the checkpoint are an error too, so a truncated
    /// or mismatched file cannot half-load.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::SpecMismatch {
                expected: format!("{} tensors in store", store.len()),
                got: format!("{} tensors in checkpoint", self.tensors.len()),
            });
        }
        for (name, group, value) in &self.tensors {
            let found = store
                .iter()
                .find(|(_, t)| &t.name == name)
                .map(|(id, t)| (id, t.group, t.value.rows, t.value.cols));
            let (id, sgroup, rows, cols) = match found {
                Some(f) => f,
                None => {
                    return Err(Error::SpecMismatch {
                        expected: format!("store parameter named {name}"),
                        got: "no such parameter".into(),
                    })
                }
            };
            if sgroup != *group || (rows, cols) != (value.rows, value.cols) {
                return Err(Error::SpecMismatch {
                    expected: format!("{name}: group {} shape {rows}x{cols}", sgroup.name()),
                    got: format!("group {} shape {}x{}", group.name(), value.rows, value.cols),
                });
            }
            store.get_mut(id).value.data.copy_from_slice(&value.data);
        }
        Ok(())
    }

    /// Subset of tensors whose name starts with `prefix`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<&(String, ParamGroup, Matrix)> {
        self.tensors.iter().filter(|(n, _, _)| n.starts_with(prefix)).collect()
    }
}

pub fn save(path: &Path, store: &ParamStore, meta: &[(String, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (key, value) in meta {
        write_str(&mut w, key)?;
        w.write_all(&value.to_le_bytes())?;
    }
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, t) in store.iter() {
        write_str(&mut w, &t.name)?;
        w.write_all(&[group_tag(t.group)])?;
        w.write_all(&(t.value.rows as u32).to_le_bytes())?;
        w.write_all(&(t.value.cols as u32).to_le_bytes())?;
        for v in &t.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let nmeta = read_u32(&mut r)? as usize;
    let mut meta = Vec::with_capacity(nmeta);
    for _ in 0..nmeta {
        let key = read_str(&mut r)?;
        meta.push((key, read_f64(&mut r)?));
    }
    let ntensors = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(ntensors);
    for _ in 0..ntensors {
        let name = read_str(&mut r)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let group = tag_group(tag[0])?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = vec![0.0; rows * cols];
        for v in &mut data {
            *v = read_f64(&mut r)?;
        }
        tensors.push((name, group, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(Checkpoint { meta, tensors })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Format(format!("string too long for checkpoint: {} bytes", bytes.len())));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf-8 in checkpoint string".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
