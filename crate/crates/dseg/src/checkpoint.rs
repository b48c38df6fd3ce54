//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "DSEG" | version u32 (=1) | arch u8 | spec fields (u32 each:
//!   in_channels, base_width, stage_widths[5], dense_units, attn_ratio,
//!   se_ratio, spatial_kernel, out_channels) | entry count u32 | entries.
//! Each entry: name length u16 | name bytes | trainable u8 | ndim u8 |
//! dims u32 each | f32 data.
//!
//! Entries are written in parameter-store insertion order, so
//! save -> load -> save is byte-identical.

use std::path::Path;

use crate::model::{build_model, Arch, Model, ModelError, ModelSpec, STAGES};

pub const MAGIC: &[u8; 4] = b"DSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at offset 0: expected \"DSEG\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (loader supports {VERSION})")]
    Version(u32),
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint entry {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint entry {0:?} does not exist in the rebuilt model")]
    UnknownEntry(String),
    #[error("checkpoint is missing {0} entries of the rebuilt model")]
    MissingEntries(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn arch_tag(a: Arch) -> u8 {
    match a {
        Arch::Proposed => 0,
        Arch::Unet => 1,
    }
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(arch_tag(model.spec.arch));
    let s = &model.spec;
    let fields = [
        s.in_channels,
        s.base_width,
        s.stage_widths[0],
        s.stage_widths[1],
        s.stage_widths[2],
        s.stage_widths[3],
        s.stage_widths[4],
        s.dense_units,
        s.attn_ratio,
        s.se_ratio,
        s.spatial_kernel,
        s.out_channels,
    ];
    for f in fields {
        buf.extend_from_slice(&(f as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, tensor, trainable) in model.params.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(trainable as u8);
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for d in &shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Model<f32>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let arch = match r.u8()? {
        0 => Arch::Proposed,
        1 => Arch::Unet,
        t => return Err(CheckpointError::Model(ModelError::Spec(format!("unknown arch tag {t}")))),
    };
    let mut fields = [0usize; 12];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let spec = ModelSpec {
        arch,
        in_channels: fields[0],
        base_width: fields[1],
        stage_widths: {
            let mut w = [0usize; STAGES];
            w.copy_from_slice(&fields[2..7]);
            w
        },
        dense_units: fields[7],
        attn_ratio: fields[8],
        se_ratio: fields[9],
        spatial_kernel: fields[10],
        out_channels: fields[11],
    };
    let model = build_model::<f32>(&spec, 0)?;
    let count = r.u32()? as usize;
    let mut loaded = 0usize;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let _trainable = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let tensor = model
            .params
            .get(&name)
            .map_err(|_| CheckpointError::UnknownEntry(name.clone()))?;
        if tensor.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: shape,
                expected: tensor.shape(),
            });
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensor.set_data(&data);
        loaded += 1;
    }
    if loaded != model.params.len() {
        return Err(CheckpointError::MissingEntries(model.params.len() - loaded));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, CheckpointError> {
    let buf = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode(&buf)
}
