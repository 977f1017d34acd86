//! Binary model checkpoints and cached teacher logits.
//!
//! Both layouts are little-endian and described in `docs/FORMATS.md`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::mlp::{Activation, Mlp, MlpSpec};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"MLTCKPT\0";
pub const LOGITS_MAGIC: &[u8; 8] = b"MLTLOGT\0";
pub const FORMAT_VERSION: u8 = 1;

struct Reader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                kind: self.kind,
                msg: format!("truncated at byte {}", self.pos),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(self.err("bad magic"));
        }
        let version = self.u8()?;
        if version != FORMAT_VERSION {
            return Err(self.err(&format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(&format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    fn err(&self, msg: &str) -> Error {
        Error::Format {
            kind: self.kind,
            msg: msg.to_string(),
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn encode_model(model: &Mlp<f32>) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(match spec.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.extend_from_slice(&spec.seed.to_le_bytes());
    out.extend_from_slice(&(spec.layer_widths.len() as u32).to_le_bytes());
    for &w in &spec.layer_widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Mlp<f32>> {
    let mut r = Reader {
        kind: "model checkpoint",
        bytes,
        pos: 0,
    };
    r.header(MODEL_MAGIC)?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(r.err(&format!("unknown activation code {other}"))),
    };
    let seed = r.u64()?;
    let n_widths = r.u32()? as usize;
    let widths = (0..n_widths)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(widths, activation, seed);
    spec.validate()?;
    let count = r.u64()? as usize;
    if count != spec.param_count() {
        return Err(r.err(&format!(
            "{count} parameters stored, widths imply {}",
            spec.param_count()
        )));
    }
    let params = r.f32s(count)?;
    r.finish()?;
    Mlp::from_parameters(&spec, &params)
}

pub fn save_model(model: &Mlp<f32>, path: &Path) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Mlp<f32>> {
    decode_model(&read_all(path)?)
}

/// Per-sample teacher logits plus the checksum of the teacher that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedLogits {
    pub classes: usize,
    pub teacher_checksum: u64,
    pub rows: Vec<Vec<f32>>,
}

pub fn encode_logits(cache: &CachedLogits) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(LOGITS_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(cache.classes as u32).to_le_bytes());
    out.extend_from_slice(&(cache.rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&cache.teacher_checksum.to_le_bytes());
    for row in &cache.rows {
        if row.len() != cache.classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{} logits per row", cache.classes),
                got: format!("{}", row.len()),
            });
        }
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_logits(bytes: &[u8]) -> Result<CachedLogits> {
    let mut r = Reader {
        kind: "cached logits",
        bytes,
        pos: 0,
    };
    r.header(LOGITS_MAGIC)?;
    let classes = r.u32()? as usize;
    let n = r.u64()? as usize;
    let teacher_checksum = r.u64()?;
    let flat = r.f32s(n.checked_mul(classes).ok_or_else(|| r.err("size overflow"))?)?;
    r.finish()?;
    let rows = if classes == 0 {
        vec![Vec::new(); n]
    } else {
        flat.chunks_exact(classes).map(<[f32]>::to_vec).collect()
    };
    Ok(CachedLogits {
        classes,
        teacher_checksum,
        rows,
    })
}

pub fn save_logits(cache: &CachedLogits, path: &Path) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_logits(cache)?)?;
    Ok(())
}

pub fn load_logits(path: &Path) -> Result<CachedLogits> {
    decode_logits(&read_all(path)?)
}
