//! `WLW1` weight files: magic, length-prefixed configuration text, shaped
//! little-endian f32 blobs, trailing CRC-32 of everything before it.

use std::path::Path;

use super::model::{ArchConfig, RegModel};
use super::{RegError, Result};

pub const FORMAT_MAGIC: &[u8; 4] = b"WLW1";

pub fn encode(model: &RegModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FORMAT_MAGIC);
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.net.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_weights(model: &RegModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(RegError::ChecksumMismatch)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RegModel> {
    let n = bytes.len().min(4);
    if bytes[..n] != FORMAT_MAGIC[..n] {
        return Err(RegError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(RegError::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(RegError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let cfg_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| RegError::ConfigMismatch("configuration block is not UTF-8".into()))?;
    let config = ArchConfig::from_text(text).map_err(|e| RegError::ConfigMismatch(e.to_string()))?;
    let mut model = RegModel::new(config, 0)?;
    let count = r.u32()? as usize;
    let expected = model.net.params().len();
    if count != expected {
        return Err(RegError::ConfigMismatch(format!("{count} blobs, configuration needs {expected}")));
    }
    let mut err = None;
    let mut idx = 0;
    model.net.for_each_param(&mut |p| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape != p.shape {
                return Err(RegError::ConfigMismatch(format!(
                    "blob {idx} has shape {shape:?}, expected {:?}",
                    p.shape
                )));
            }
            let raw = r.take(p.value.len() * 4)?;
            for (v, b) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if r.pos != body.len() {
        return Err(RegError::ConfigMismatch("trailing data after the last blob".into()));
    }
    Ok(model)
}

pub fn load_weights(path: &Path) -> Result<RegModel> {
    decode(&std::fs::read(path)?)
}

/// Loads a weight file and checks that it was saved with `expected`.
pub fn load_weights_expecting(path: &Path, expected: &ArchConfig) -> Result<RegModel> {
    let model = load_weights(path)?;
    if &model.config != expected {
        return Err(RegError::ConfigMismatch(format!(
            "file holds a {} model ({} filters), expected {} ({} filters)",
            model.config.arch, model.config.filters, expected.arch, expected.filters
        )));
    }
    Ok(model)
}
