//! `DCPW` weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "DCPW"                  4 bytes
//! version u32                   currently 1
//! ViTConfig                     8 × u32: image_size, patch_size, channels,
//!                               dim, depth, heads, mlp_ratio, pos_grid
//! param count u32
//! per parameter, in declaration order:
//!     rank u32, dims rank × u32, values f32 × prod(dims)
//! optional head section:
//!     tag "HEAD", rank u32, dims, values
//! ```
//!
//! Trainability flags are not stored; a loaded backbone is fully trainable.

use std::fs;
use std::path::Path;

use crate::diet::DietHead;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{BackboneParams, Param, ViTConfig};

const MAGIC: &[u8; 4] = b"DCPW";
const HEAD_TAG: &[u8; 4] = b"HEAD";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(backbone: &BackboneParams, head: Option<&DietHead>) -> Result<Vec<u8>> {
    let c = backbone.config();
    let mut out = Vec::with_capacity(64 + backbone.num_weights() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.dim,
        c.depth,
        c.heads,
        c.mlp_ratio,
        c.pos_grid,
    ] {
        put_u32(&mut out, fit_u32(v)?);
    }
    put_u32(&mut out, fit_u32(backbone.params().len())?);
    for p in backbone.params() {
        put_tensor(&mut out, &p.value)?;
    }
    if let Some(h) = head {
        out.extend_from_slice(HEAD_TAG);
        put_tensor(&mut out, &h.weight.value)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(BackboneParams, Option<DietHead>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected DCPW".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = ViTConfig {
        image_size: f[0],
        patch_size: f[1],
        channels: f[2],
        dim: f[3],
        depth: f[4],
        heads: f[5],
        mlp_ratio: f[6],
        pos_grid: f[7],
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
    let count = r.u32()? as usize;
    let values = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let backbone = BackboneParams::from_values(config, values)?;
    let head = if r.remaining() == 0 {
        None
    } else {
        if r.take(4)? != HEAD_TAG {
            return Err(Error::Checkpoint(format!("unknown section at offset {}", r.pos - 4)));
        }
        let w = r.tensor()?;
        if w.rank() != 2 || w.shape()[1] != backbone.config().dim {
            return Err(Error::Checkpoint(format!(
                "head shape {:?} does not match width {}",
                w.shape(),
                backbone.config().dim
            )));
        }
        Some(DietHead {
            weight: Param {
                name: "head.weight".into(),
                value: w,
                trainable: true,
                decay: true,
            },
        })
    };
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok((backbone, head))
}

pub fn save_checkpoint(path: &Path, backbone: &BackboneParams, head: Option<&DietHead>) -> Result<()> {
    fs::write(path, encode_checkpoint(backbone, head)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(BackboneParams, Option<DietHead>)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn fit_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, fit_u32(t.rank())?);
    for &d in t.shape() {
        put_u32(out, fit_u32(d)?);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(format!(
                "truncated at offset {}: need {n} more bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} at offset {}", self.pos - 4)));
        }
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
