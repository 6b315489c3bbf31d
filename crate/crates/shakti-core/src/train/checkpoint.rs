//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "SKVL"
//! version      u32
//! config digest u64     (fnv1a64 of the canonical config JSON)
//! stage        u32
//! step         u64
//! seed         u64
//! n_tensors    u32
//! tensor * n:  name_len u32, name bytes, ndim u32, dims u64*, data f32*
//! has_opt      u8
//! if 1:        opt_t u64, then per tensor (same order): m f32*, v f32*
//! checksum     u64      (fnv1a64 of every preceding byte)
//! ```
//!
//! Weights are stored as 32-bit reals; loading into a 32-bit model is
//! bit-exact.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::model::VlmModel;
use crate::rng::fnv1a64;
use crate::tensor::Element;
use crate::train::optim::{AdamW, AdamWConfig};

pub const MAGIC: [u8; 4] = *b"SKVL";
pub const VERSION: u32 = 1;

pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub struct CheckpointFile {
    pub version: u32,
    pub config_digest: u64,
    pub stage: u32,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorBlob>,
    /// `(adam step count, per-tensor (m, v) in tensor order)`.
    pub optimizer: Option<(u64, Vec<(Vec<f32>, Vec<f32>)>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s<E: Element>(buf: &mut Vec<u8>, data: &[E]) {
    for v in data {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
}

/// Serialize model weights (and optionally optimizer state) to `path`.
pub fn save_checkpoint<E: Element>(
    path: &Path,
    model: &VlmModel<E>,
    opt: Option<&AdamW<E>>,
    stage: u32,
    step: u64,
    seed: u64,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, model.cfg.digest());
    put_u32(&mut buf, stage);
    put_u64(&mut buf, step);
    put_u64(&mut buf, seed);

    let mut n = 0u32;
    model.visit_params(&mut |_| n += 1);
    put_u32(&mut buf, n);
    model.visit_params(&mut |p| {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.shape.len() as u32);
        for &d in &p.shape {
            put_u64(&mut buf, d as u64);
        }
        put_f32s(&mut buf, &p.data);
    });

    match opt {
        Some(o) => {
            buf.push(1);
            put_u64(&mut buf, o.t);
            for (m, v) in o.moments_in_order(|f| model.visit_params(f)) {
                put_f32s(&mut buf, &m);
                put_f32s(&mut buf, &v);
            }
        }
        None => buf.push(0),
    }

    let checksum = fnv1a64(&buf);
    put_u64(&mut buf, checksum);
    std::fs::write(path, &buf)?;
    Ok(())
}

struct Rd<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.b.len() {
            return Err(CheckpointError::Truncated {
                what,
                needed: self.at + n - self.b.len(),
            });
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse a checkpoint file, verifying structure and the trailing checksum.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path)?;
    Ok(parse_checkpoint(&bytes)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<CheckpointFile, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated {
            what: "magic",
            needed: 4 - bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated {
            what: "header",
            needed: 12 - bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    // Everything before the trailing checksum is the body.
    if bytes.len() < 8 + 8 {
        return Err(CheckpointError::Truncated {
            what: "checksum trailer",
            needed: 16 - bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 8];
    let mut rd = Rd { b: body, at: 8 };

    let config_digest = rd.u64("config digest")?;
    let stage = rd.u32("stage")?;
    let step = rd.u64("step")?;
    let seed = rd.u64("seed")?;
    let n = rd.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = rd.u32("tensor name length")? as usize;
        let name_bytes = rd.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Malformed {
                what: "tensor name",
                msg: e.to_string(),
            })?
            .to_string();
        let ndim = rd.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd.u64("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = rd.f32s(numel, "tensor data")?;
        tensors.push(TensorBlob { name, shape, data });
    }
    let optimizer = match rd.u8("optimizer flag")? {
        0 => None,
        1 => {
            let t = rd.u64("optimizer step")?;
            let mut moments = Vec::with_capacity(tensors.len());
            for tb in &tensors {
                let m = rd.f32s(tb.data.len(), "optimizer m")?;
                let v = rd.f32s(tb.data.len(), "optimizer v")?;
                moments.push((m, v));
            }
            Some((t, moments))
        }
        other => {
            return Err(CheckpointError::Malformed {
                what: "optimizer flag",
                msg: format!("expected 0 or 1, got {other}"),
            })
        }
    };
    if rd.at != body.len() {
        return Err(CheckpointError::Malformed {
            what: "body",
            msg: format!("{} unexpected trailing bytes", body.len() - rd.at),
        });
    }
    let found = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(body);
    if found != computed {
        return Err(CheckpointError::ChecksumMismatch { found, computed });
    }
    Ok(CheckpointFile {
        version,
        config_digest,
        stage,
        step,
        seed,
        tensors,
        optimizer,
    })
}

impl CheckpointFile {
    /// Load the stored weights into `model`. The stored config digest must
    /// match the model's; every model parameter must be present with the
    /// right element count, and no extra tensors may remain.
    pub fn apply_to<E: Element>(&self, model: &mut VlmModel<E>) -> Result<()> {
        let expected = model.cfg.digest();
        if self.config_digest != expected {
            return Err(CheckpointError::ConfigDigestMismatch {
                found: self.config_digest,
                expected,
            }
            .into());
        }
        let mut by_name: HashMap<&str, &TensorBlob> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problem: Option<CheckpointError> = None;
        let mut used = 0usize;
        model.visit_params_mut(&mut |p| {
            if problem.is_some() {
                return;
            }
            match by_name.remove(p.name.as_str()) {
                None => {
                    problem = Some(CheckpointError::MissingTensor {
                        name: p.name.clone(),
                    });
                }
                Some(tb) if tb.data.len() != p.numel() => {
                    problem = Some(CheckpointError::TensorShapeMismatch {
                        name: p.name.clone(),
                        found: tb.data.len(),
                        expected: p.numel(),
                    });
                }
                Some(tb) => {
                    used += 1;
                    *p.data_mut() = tb.data.iter().map(|&f| E::c(f as f64)).collect();
                }
            }
        });
        if let Some(e) = problem {
            return Err(e.into());
        }
        if !by_name.is_empty() {
            let mut extra: Vec<&str> = by_name.keys().copied().collect();
            extra.sort_unstable();
            return Err(CheckpointError::Malformed {
                what: "tensors",
                msg: format!("checkpoint holds tensors unknown to the model: {extra:?}"),
            }
            .into());
        }
        let _ = used;
        Ok(())
    }

    /// Rebuild the optimizer (if the file carries moments) against `model`.
    pub fn restore_optimizer<E: Element>(
        &self,
        model: &VlmModel<E>,
        cfg: AdamWConfig,
    ) -> Result<Option<AdamW<E>>> {
        let Some((t, moments)) = &self.optimizer else {
            return Ok(None);
        };
        let blobs: Vec<(Vec<E>, Vec<E>)> = moments
            .iter()
            .map(|(m, v)| {
                (
                    m.iter().map(|&f| E::c(f as f64)).collect(),
                    v.iter().map(|&f| E::c(f as f64)).collect(),
                )
            })
            .collect();
        Ok(Some(AdamW::restore(
            cfg,
            *t,
            |f| model.visit_params(f),
            &blobs,
        )?))
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.iter().map(|t| t.data.len() as u64).sum()
    }
}
