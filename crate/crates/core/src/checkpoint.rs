//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! b"LDML" | version: u32 | config digest: [u8; 32] | tensor count: u32
//! per tensor: name length: u32 | name: UTF-8 | rank: u32 | dims: u32 × rank | data: f32 × numel
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::model_digest;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"LDML";
pub const FORMAT_VERSION: u32 = 1;

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&model_digest(&model.config))?;
    let tensors = model.store.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Rebuilds a model for `config` and fills it from the checkpoint. Fails if
/// the stored digest does not match `config`, or if any tensor is missing,
/// extra, or misshapen.
pub fn read_checkpoint(config: &ModelConfig, r: impl Read) -> Result<Model> {
    let mut r = Reader { inner: r };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let stored = r.bytes(32, "config digest")?;
    let expected = model_digest(config);
    if stored != expected {
        return Err(Error::DigestMismatch {
            checkpoint: hex(&stored),
            config: hex(&expected),
        });
    }
    let mut model = Model::init(config, 0)?;
    let count = r.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model expects {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        if model.store.tensor(id).shape != shape {
            return Err(Error::Format(format!(
                "tensor {name}: shape {shape:?}, expected {:?}",
                model.store.tensor(id).shape
            )));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
        let numel: usize = shape.iter().product();
        let raw = r.bytes(4 * numel, &name)?;
        for (dst, c) in model.store.get_mut(id).iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", rest.len())));
    }
    Ok(model)
}

pub fn load_checkpoint(config: &ModelConfig, path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    read_checkpoint(config, bytes.as_slice())
}
