//! Two-branch model checkpoints and the SSCK file format.
//!
//! Layout (little-endian): magic `SSCK`, u16 version, u32 length + JSON
//! encoder config, u8 mode, u32 patch side, then per branch: u8 role,
//! u32 in_channels, u32 tensor count and a table of (u16 name length,
//! name, u8 trainable, u8 ndim, u32 dims, f32 data). A train-meta block
//! (u64 steps, f64 final loss, u64 seed) closes the file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::{BranchParams, EncoderConfig, Role};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::raster::validate_patch_side;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Training regime: same-sensor pairs (online/target with EMA) or
/// cross-sensor pairs (two independent modality branches).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Homogeneous,
    Heterogeneous,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Homogeneous => "homogeneous",
            Mode::Heterogeneous => "heterogeneous",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(Mode::Homogeneous),
            "heterogeneous" => Ok(Mode::Heterogeneous),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainMeta {
    pub steps: u64,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: EncoderConfig,
    /// Online branch (homogeneous) or modality-A branch (heterogeneous).
    pub branch1: BranchParams,
    /// Target branch (homogeneous) or modality-B branch (heterogeneous).
    pub branch2: BranchParams,
    pub mode: Mode,
    pub patch_side: usize,
    pub train_meta: TrainMeta,
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        validate_patch_side(self.patch_side).map_err(|e| Error::Corruption(e.to_string()))?;
        let corrupt = |msg: String| Err(Error::Corruption(msg));
        for b in [&self.branch1, &self.branch2] {
            if b.config != self.config.with_in_channels(b.in_channels()) {
                return corrupt(format!("{:?} branch config differs from checkpoint config", b.role));
            }
            b.validate_layout()?;
        }
        match self.mode {
            Mode::Homogeneous => {
                if !self.branch1.has_predictor() {
                    return corrupt("homogeneous checkpoint: online branch lacks a predictor".into());
                }
                if self.branch2.has_predictor() {
                    return corrupt("homogeneous checkpoint: target branch carries a predictor".into());
                }
                if self.branch1.in_channels() != self.branch2.in_channels()
                    || !self.branch1.encoder.same_layout(&self.branch2.encoder)
                    || !self.branch1.projector.same_layout(&self.branch2.projector)
                {
                    return corrupt("homogeneous checkpoint: online and target shapes differ".into());
                }
            }
            Mode::Heterogeneous => {
                if self.branch1.has_predictor() || self.branch2.has_predictor() {
                    return corrupt("heterogeneous checkpoint: branches must not carry predictors".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.push(match self.mode {
            Mode::Homogeneous => 0,
            Mode::Heterogeneous => 1,
        });
        out.extend_from_slice(&(self.patch_side as u32).to_le_bytes());
        for branch in [&self.branch1, &self.branch2] {
            write_branch(&mut out, branch);
        }
        out.extend_from_slice(&self.train_meta.steps.to_le_bytes());
        out.extend_from_slice(&self.train_meta.final_loss.to_le_bytes());
        out.extend_from_slice(&self.train_meta.seed.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic, not an SSCK checkpoint".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config: EncoderConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::Format(format!("config block: {e}")))?;
        let mode = match r.u8()? {
            0 => Mode::Homogeneous,
            1 => Mode::Heterogeneous,
            m => return Err(Error::Format(format!("unknown mode code {m}"))),
        };
        let patch_side = r.u32()? as usize;
        let branch1 = read_branch(&mut r, &config)?;
        let branch2 = read_branch(&mut r, &config)?;
        let train_meta = TrainMeta {
            steps: r.u64()?,
            final_loss: f64::from_le_bytes(r.take(8)?.try_into().unwrap()),
            seed: r.u64()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let ckpt = ModelCheckpoint {
            config,
            branch1,
            branch2,
            mode,
            patch_side,
            train_meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn write_branch(out: &mut Vec<u8>, branch: &BranchParams) {
    out.push(branch.role.code());
    out.extend_from_slice(&(branch.in_channels() as u32).to_le_bytes());
    let count: usize = branch.collections().map(ParamSet::len).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in branch.collections().flat_map(ParamSet::iter) {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_branch(r: &mut Reader<'_>, config: &EncoderConfig) -> Result<BranchParams> {
    let role_code = r.u8()?;
    let role = Role::from_code(role_code)
        .ok_or_else(|| Error::Format(format!("unknown branch role code {role_code}")))?;
    let in_channels = r.u32()? as usize;
    let count = r.u32()? as usize;
    let (mut encoder, mut projector, mut predictor) = (ParamSet::new(), ParamSet::new(), None::<ParamSet>);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let target = if name.starts_with("encoder.") {
            &mut encoder
        } else if name.starts_with("projector.") {
            &mut projector
        } else if name.starts_with("predictor.") {
            predictor.get_or_insert_with(ParamSet::new)
        } else {
            return Err(Error::Corruption(format!("tensor {name:?} belongs to no head")));
        };
        target.push(name, shape, data, trainable);
    }
    Ok(BranchParams {
        role,
        config: config.with_in_channels(in_channels),
        encoder,
        projector,
        predictor,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Validates and writes atomically.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.validate()?;
    fsutil::write_atomic(path.as_ref(), &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
