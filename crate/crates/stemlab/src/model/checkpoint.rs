//! Binary checkpoint / tensor-table container.
//!
//! Layout, all little-endian:
//!   magic "SJPA" | version u32 | config digest [32] | phase u8 | step u64 |
//!   flags u8 (bit0 optimizer table, bit1 ema table) | opt step u64 |
//!   tables (main, optional optimizer, optional ema), each:
//!     count u64, then per record: name len u64, UTF-8 name, rank u64,
//!     dims u64 x rank, payload f32 x numel
//!   sha256 of all table bytes [32]
//!
//! Round-trips are bit-exact; bad magic, version, digest, or truncation are
//! rejected with a diagnostic.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndgrad::ParamSet;

pub const MAGIC: &[u8; 4] = b"SJPA";
pub const VERSION: u32 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    /// 0 = none / plain container, 1 = contrastive phase, 2 = predictive phase.
    pub phase: u8,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
    pub opt_step: u64,
    pub opt: Option<Vec<NamedTensor>>,
    pub ema: Option<Vec<NamedTensor>>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tables = Vec::new();
        write_table(&mut tables, &self.tensors);
        if let Some(opt) = &self.opt {
            write_table(&mut tables, opt);
        }
        if let Some(ema) = &self.ema {
            write_table(&mut tables, ema);
        }
        let table_digest: [u8; 32] = Sha256::digest(&tables).into();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.push(self.phase);
        out.extend_from_slice(&self.step.to_le_bytes());
        let flags = (self.opt.is_some() as u8) | ((self.ema.is_some() as u8) << 1);
        out.push(flags);
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        out.extend_from_slice(&tables);
        out.extend_from_slice(&table_digest);
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Cursor {
            buf: &bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:02x?}, expected {:02x?}",
                path.display(),
                magic,
                MAGIC
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        let phase = r.take(1)?[0];
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let flags = r.take(1)?[0];
        let opt_step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());

        let tables_start = r.pos;
        let tensors = read_table(&mut r)?;
        let opt = if flags & 1 != 0 {
            Some(read_table(&mut r)?)
        } else {
            None
        };
        let ema = if flags & 2 != 0 {
            Some(read_table(&mut r)?)
        } else {
            None
        };
        let tables_end = r.pos;
        let stored = r.take(32)?;
        let computed: [u8; 32] = Sha256::digest(&bytes[tables_start..tables_end]).into();
        if stored != computed {
            return Err(Error::Format(format!(
                "{}: tensor table checksum mismatch",
                path.display()
            )));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after checksum",
                path.display(),
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_digest,
            phase,
            step,
            tensors,
            opt_step,
            opt,
            ema,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte offset {} (needed {} more)",
                self.path.display(),
                self.pos,
                self.pos + n - self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn write_table(out: &mut Vec<u8>, tensors: &[NamedTensor]) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_table(r: &mut Cursor) -> Result<Vec<NamedTensor>> {
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let name_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("{}: bad tensor name: {e}", r.path.display())))?;
        let rank = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok(tensors)
}

/// Snapshot a parameter set as named tensors (in registration order).
pub fn dump_params(set: &ParamSet) -> Vec<NamedTensor> {
    set.iter()
        .map(|p| (p.name().to_string(), p.shape().to_vec(), p.value()))
        .collect()
}

/// Load named tensors back into a parameter set; every parameter must be
/// present with a matching shape.
pub fn restore_params(set: &ParamSet, tensors: &[NamedTensor]) -> Result<()> {
    for p in set.iter() {
        let (_, shape, data) = tensors
            .iter()
            .find(|(n, _, _)| n == p.name())
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor `{}`", p.name())))?;
        if shape != p.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor `{}` has shape {:?}, expected {:?}",
                p.name(),
                shape,
                p.shape()
            )));
        }
        p.set_value(data.clone());
    }
    Ok(())
}

/// Digest of a config string, stored in checkpoint headers for provenance.
pub fn config_digest(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

/// File-level sha256, used for input provenance logs.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
