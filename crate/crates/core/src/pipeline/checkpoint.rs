//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "EMODIFF\0"
//! version  u32
//! kind     u32 length + UTF-8
//! step     u64
//! config   u64 length + UTF-8 TOML echo of the run config
//! count    u32
//! count × { name: u32 length + UTF-8, tensor }
//! ```
//!
//! Tensors use the rank/shape/f64 encoding of [`Tensor::write_to`].
//! Optimizer moments are stored as `adam.m.<i>` and `adam.v.<i>`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Module, Tensor};

pub const MAGIC: &[u8; 8] = b"EMODIFF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> std::io::Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

impl Checkpoint {
    /// Captures the parameters of `module` and, if given, the optimizer moments.
    pub fn capture<M: Module + ?Sized>(kind: &str, step: u64, config: &str, module: &M, opt: Option<&Adam>) -> Self {
        let mut tensors = module.named_values();
        if let Some(opt) = opt {
            let (m, v) = opt.moments();
            for (tag, bufs) in [("m", m), ("v", v)] {
                for (i, b) in bufs.iter().enumerate() {
                    tensors.push((format!("adam.{tag}.{i}"), Tensor::from_vec(b.clone())));
                }
            }
        }
        Checkpoint {
            kind: kind.to_string(),
            step,
            config: config.to_string(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_str(w, &self.kind)?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let kind_len = read_u32(r)? as usize;
        let kind = read_string(r, kind_len)?;
        let step = read_u64(r)?;
        let cfg_len = read_u64(r)? as usize;
        if cfg_len > 1 << 24 {
            return Err(invalid("config echo too long".into()));
        }
        let config = read_string(r, cfg_len)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            if n > 4096 {
                return Err(invalid("tensor name too long".into()));
            }
            let name = read_string(r, n)?;
            tensors.push((name, Tensor::read_from(r)?));
        }
        Ok(Checkpoint {
            kind,
            step,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut slice = bytes.as_slice();
        let ck = Self::read_from(&mut slice).map_err(|e| Error::format(path, e.to_string()))?;
        if !slice.is_empty() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(ck)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Copies stored parameters into `module`, which must have exactly the
    /// same names and shapes.
    pub fn restore<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        let params: Vec<&(String, Tensor)> = self.tensors.iter().filter(|(n, _)| !n.starts_with("adam.")).collect();
        let expected = module.named_values();
        if expected.len() != params.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} parameter tensors, model has {}",
                params.len(),
                expected.len()
            )));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(&params) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor {got_name} {:?} does not match model tensor {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        module.set_values(&values);
        Ok(())
    }

    /// Rebuilds the optimizer with the stored moments and step counter.
    pub fn restore_adam(&self, cfg: AdamConfig) -> Adam {
        let pick = |tag: &str| -> Vec<Vec<f64>> {
            let prefix = format!("adam.{tag}.");
            self.tensors
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(_, t)| t.data().to_vec())
                .collect()
        };
        Adam::restore(cfg, self.step, pick("m"), pick("v"))
    }
}
