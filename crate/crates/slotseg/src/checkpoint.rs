//! Versioned binary checkpoints: the full config as TOML, every named
//! parameter at its native precision, and the optimizer moments at f64.
//! Loading rebuilds the model through the normal constructor and then
//! overwrites tensor payloads, so a load is always a valid model.

use std::fs;
use std::path::Path;

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamId;
use crate::optim::AdamW;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

fn precision_tag<S: Scalar>() -> u8 {
    match S::name() {
        "f32" => 0,
        _ => 1,
    }
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>, opt: &AdamW) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(precision_tag::<S>());
    out.extend_from_slice(&opt.step.to_le_bytes());
    out.extend_from_slice(&(model.grid.0 as u32).to_le_bytes());
    out.extend_from_slice(&(model.grid.1 as u32).to_le_bytes());

    let cfg = model.cfg.to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    out.extend_from_slice(&(model.ps.len() as u32).to_le_bytes());
    for p in 0..model.ps.len() {
        let pid = ParamId(p);
        let name = model.ps.name(pid).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let t = model.ps.tensor(pid);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match precision_tag::<S>() {
            0 => {
                for &v in &t.data {
                    out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            _ => {
                for &v in &t.data {
                    out.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
    }
    for bank in [&opt.m, &opt.v] {
        for per_param in bank {
            for &v in per_param {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                offset: self.pos as u64,
                detail: format!(
                    "truncated reading {what}: wanted {n} bytes, {} remain",
                    self.data.len() - self.pos
                ),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }
}

/// Reads only the precision tag, so a caller can dispatch to the right
/// scalar type before a full load.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let data = fs::read(path)?;
    let mut c = Cursor {
        data: &data,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(c.fail("bad magic, not a checkpoint"));
    }
    let version = c.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(c.fail(format!("unsupported version {version}")));
    }
    match c.take(1, "precision")?[0] {
        0 => Ok(Precision::F32),
        1 => Ok(Precision::F64),
        b => Err(c.fail(format!("unknown precision tag {b}"))),
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Model<S>, AdamW)> {
    let data = fs::read(path)?;
    let mut c = Cursor {
        data: &data,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(c.fail("bad magic, not a checkpoint"));
    }
    let version = c.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let tag = c.take(1, "precision")?[0];
    if tag != precision_tag::<S>() {
        return Err(c.fail(format!(
            "checkpoint precision tag {tag} does not match requested {}",
            S::name()
        )));
    }
    let step = c.u64("step")?;
    let grid = (c.u32("grid rows")?, c.u32("grid cols")?);
    let cfg_len = c.u32("config length")?;
    let cfg_text = std::str::from_utf8(c.take(cfg_len, "config")?)
        .map_err(|_| c.fail("config is not utf8"))?;
    let cfg = RunConfig::from_toml(cfg_text)?;

    let mut model = Model::<S>::init(cfg, grid)?;
    let count = c.u32("parameter count")?;
    if count != model.ps.len() {
        return Err(c.fail(format!(
            "{count} stored parameters but the config builds {}",
            model.ps.len()
        )));
    }
    for p in 0..count {
        let pid = ParamId(p);
        let name_len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| c.fail("parameter name is not utf8"))?;
        if name != model.ps.name(pid) {
            return Err(c.fail(format!(
                "parameter {p} is {name:?} on disk but {:?} in the model",
                model.ps.name(pid)
            )));
        }
        let ndims = c.u32("dimension count")?;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(c.u32("extent")?);
        }
        if shape != model.ps.tensor(pid).shape {
            return Err(c.fail(format!(
                "parameter {name:?} has shape {shape:?} on disk, expected {:?}",
                model.ps.tensor(pid).shape
            )));
        }
        let len = model.ps.tensor(pid).len();
        let dst = &mut model.ps.tensor_mut(pid).data;
        match tag {
            0 => {
                let bytes = c.take(4 * len, "payload")?;
                for (j, ch) in bytes.chunks_exact(4).enumerate() {
                    dst[j] = S::from_f64(
                        f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64
                    );
                }
            }
            _ => {
                let bytes = c.take(8 * len, "payload")?;
                for (j, ch) in bytes.chunks_exact(8).enumerate() {
                    dst[j] = S::from_f64(f64::from_le_bytes(ch.try_into().expect("8 bytes")));
                }
            }
        }
    }

    let mut opt = AdamW::new(&model.ps, model.cfg.weight_decay);
    opt.step = step;
    for bank in [&mut opt.m, &mut opt.v] {
        for per_param in bank.iter_mut() {
            let bytes = c.take(8 * per_param.len(), "moments")?;
            for (j, ch) in bytes.chunks_exact(8).enumerate() {
                per_param[j] = f64::from_le_bytes(ch.try_into().expect("8 bytes"));
            }
        }
    }
    if c.pos != data.len() {
        return Err(c.fail(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok((model, opt))
}
