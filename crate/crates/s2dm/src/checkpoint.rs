//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic         8 bytes  "S2DMCKPT"
//! version       u32      1
//! kind          u8       0 frame denoiser, 1 flow-sequence model
//! mode          u8       0 shared noise, 1 per-frame noise, 255 not applicable
//! config digest 32 bytes SHA-256 of the canonical config text
//! config text   u32 length + UTF-8 bytes (canonical form)
//! schedule      u64 T, f64 beta_start, f64 beta_end
//! steps done    u64
//! adam          u64 step, f64 lr
//! layout        u32 count, then per segment: u16 name length, name, u64 offset, u64 length
//! tensors       u64 count n, then n f32 parameters, n f32 first moments, n f32 second moments
//! checksum      32 bytes SHA-256 of every preceding byte
//! ```
//!
//! The checksum doubles as the checkpoint's digest in manifests.

use std::path::Path;

use sha2::{Digest, Sha256};

use s2dm_core::nn::ParamLayout;
use s2dm_core::sector::NoiseMode;
use s2dm_core::Adam;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"S2DMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Frame,
    Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Training noise mode; `None` for the flow-sequence model.
    pub mode: Option<NoiseMode>,
    pub config: ExperimentConfig,
    pub steps_done: usize,
    pub layout: Vec<(String, usize, usize)>,
    pub adam: Adam<f32>,
    pub params: Vec<f32>,
}

pub fn layout_table(layout: &ParamLayout) -> Vec<(String, usize, usize)> {
    layout
        .segments()
        .iter()
        .map(|s| (s.name.clone(), s.offset, s.len))
        .collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            ModelKind::Frame => 0,
            ModelKind::Sequence => 1,
        });
        out.push(match self.mode {
            Some(NoiseMode::Shared) => 0,
            Some(NoiseMode::PerFrame) => 1,
            None => 255,
        });
        out.extend_from_slice(&self.config.digest());
        let text = self.config.canonical();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let s = &self.config.schedule;
        out.extend_from_slice(&(s.steps as u64).to_le_bytes());
        out.extend_from_slice(&s.beta_start.to_le_bytes());
        out.extend_from_slice(&s.beta_end.to_le_bytes());
        out.extend_from_slice(&(self.steps_done as u64).to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&self.adam.lr.to_le_bytes());
        out.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for (name, offset, len) in &self.layout {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(*offset as u64).to_le_bytes());
            out.extend_from_slice(&(*len as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for tensor in [&self.params, &self.adam.m, &self.adam.v] {
            for v in tensor.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err("checksum mismatch (file is corrupt or truncated)".into());
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = match r.u8()? {
            0 => ModelKind::Frame,
            1 => ModelKind::Sequence,
            k => return Err(format!("unknown model kind {k}")),
        };
        let mode = match r.u8()? {
            0 => Some(NoiseMode::Shared),
            1 => Some(NoiseMode::PerFrame),
            255 => None,
            m => return Err(format!("unknown noise mode {m}")),
        };
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let text_len = r.u32()? as usize;
        let text =
            std::str::from_utf8(r.take(text_len)?).map_err(|_| "config text is not UTF-8")?;
        let config = ExperimentConfig::parse(text).map_err(|e| format!("embedded config: {e}"))?;
        if config.digest() != digest {
            return Err("embedded config does not match its digest".into());
        }
        let (steps, beta_start, beta_end) = (r.u64()? as usize, r.f64()?, r.f64()?);
        let s = &config.schedule;
        if (steps, beta_start, beta_end) != (s.steps, s.beta_start, s.beta_end) {
            return Err("stored schedule disagrees with the embedded config".into());
        }
        let steps_done = r.u64()? as usize;
        let adam_step = r.u64()?;
        let lr = r.f64()?;
        let segments = r.u32()? as usize;
        let mut layout = Vec::with_capacity(segments);
        for _ in 0..segments {
            let n = r.u16()? as usize;
            let name =
                String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "segment name is not UTF-8")?;
            layout.push((name, r.u64()? as usize, r.u64()? as usize));
        }
        let n = r.u64()? as usize;
        if n.checked_mul(12) != Some(body.len() - r.pos) {
            return Err(format!("tensor section does not hold 3 x {n} floats"));
        }
        let params = r.f32s(n)?;
        let mut adam = Adam::new(n, lr);
        adam.step = adam_step;
        adam.m = r.f32s(n)?;
        adam.v = r.f32s(n)?;
        Ok(Checkpoint {
            kind,
            mode,
            config,
            steps_done,
            layout,
            adam,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<String> {
        let bytes = self.encode();
        crate::fsutil::write_atomic(path, &bytes)?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    /// Loads a checkpoint and its digest.
    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let ckpt = Self::decode(&bytes).map_err(|m| CliError::checkpoint(path, m))?;
        Ok((ckpt, hex::encode(&bytes[bytes.len() - 32..])))
    }

    /// Fails unless the stored layout equals `expected` segment by segment.
    pub fn check_layout(&self, expected: &ParamLayout, path: &Path) -> CliResult<()> {
        if self.layout != layout_table(expected) || self.params.len() != expected.total() {
            return Err(CliError::checkpoint(
                path,
                "parameter layout does not match the configured model",
            ));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| "unexpected end of file".to_string())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K], String> {
        Ok(self.take(K)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, String> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, String> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, String> {
        self.array().map(f64::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, String> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
