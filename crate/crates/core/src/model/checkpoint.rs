//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "EDGEDIS\0"
//! version  u32
//! header   u64 length + UTF-8 JSON {config, d_in, num_classes}
//! count    u32
//! count × { name: u32 length + UTF-8, group: u8, rows: u64, cols: u64, rows·cols × f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DisGnnModel, TrainConfig};
use crate::autodiff::{Matrix, ParamGroup};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EDGEDIS\0";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    d_in: usize,
    num_classes: usize,
}

fn group_tag(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Extractor => 0,
        ParamGroup::Classifier => 1,
        ParamGroup::Discriminator => 2,
    }
}

pub fn write_checkpoint(model: &DisGnnModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        d_in: model.d_in,
        num_classes: model.num_classes,
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, p) in model.store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[group_tag(p.group)])?;
        w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
        for x in p.value.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &DisGnnModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn vec(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }
}

/// Rebuilds the model from the stored configuration and fills in stored
/// values. Every parameter must match by name, group and shape.
pub fn read_checkpoint(r: impl Read) -> Result<DisGnnModel> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(&r.vec(header_len)?)?;
    let mut model = DisGnnModel::new(&header.config, header.d_in, header.num_classes)?;

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.vec(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let tag = r.bytes::<1>()?[0];
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let expected = model.store.get(id);
        if group_tag(expected.group) != tag || expected.value.shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored {rows}x{cols} (group {tag}), model expects {:?} (group {})",
                expected.value.shape(),
                group_tag(expected.group)
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(r.bytes()?));
        }
        *model.store.value_mut(id) = Matrix::from_vec(rows, cols, data)?;
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<DisGnnModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
