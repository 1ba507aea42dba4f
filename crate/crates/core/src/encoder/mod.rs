//! Residual patch encoder with projection and predictor heads.
//!
//! A branch maps a batch of `bands x p x p` patches to unit-norm
//! `embed_dim` vectors: residual backbone, global average pooling, a
//! two-layer projector, and (online branches only) a two-layer predictor
//! with batch normalization. Outputs are always l2-normalized after the
//! last head applied.

mod checkpoint;
pub mod layers;
mod network;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Patch;

pub use checkpoint::{load_checkpoint, save_checkpoint, Mode, ModelCheckpoint, TrainMeta};
pub use layers::Tensor;
pub use network::{BranchNet, ForwardCache};
pub use params::{Param, ParamSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Stride of the first block in each stage.
    pub stage_strides: Vec<usize>,
    pub stem_kernel: usize,
    pub embed_dim: usize,
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Small CPU-friendly configuration: three stages of two blocks.
    pub fn desk(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            stage_strides: vec![1, 2, 2],
            stem_kernel: 3,
            embed_dim: 64,
            projector_hidden: 128,
            predictor_hidden: 128,
            seed: 0,
        }
    }

    /// ResNet-34 stage layout (3, 4, 6, 3 blocks; 64..512 channels) with
    /// the third and fourth stages kept at stride 1 for small patches.
    pub fn resnet34(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            stage_strides: vec![1, 2, 1, 1],
            stem_kernel: 7,
            embed_dim: 128,
            projector_hidden: 512,
            predictor_hidden: 512,
            seed: 0,
        }
    }

    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be at least 1".into());
        }
        if self.embed_dim < 2 {
            return fail(format!("embed_dim must be at least 2, got {}", self.embed_dim));
        }
        if self.widths.is_empty()
            || self.widths.len() != self.blocks_per_stage.len()
            || self.widths.len() != self.stage_strides.len()
        {
            return fail(format!(
                "widths ({}), blocks_per_stage ({}) and stage_strides ({}) must be non-empty and equally long",
                self.widths.len(),
                self.blocks_per_stage.len(),
                self.stage_strides.len()
            ));
        }
        if self.widths.contains(&0) || self.blocks_per_stage.contains(&0) || self.stage_strides.contains(&0) {
            return fail("stage widths, block counts and strides must be positive".into());
        }
        if self.stem_kernel % 2 == 0 {
            return fail(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        if self.projector_hidden == 0 || self.predictor_hidden == 0 {
            return fail("head hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Which side of the two-branch model a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Online,
    Target,
    ModalityA,
    ModalityB,
}

impl Role {
    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Online => 0,
            Role::Target => 1,
            Role::ModalityA => 2,
            Role::ModalityB => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Role::Online,
            1 => Role::Target,
            2 => Role::ModalityA,
            3 => Role::ModalityB,
            _ => return None,
        })
    }

    /// Random stream for backbone and projector. Online and target share
    /// one so a mean-teacher pair starts from identical weights.
    fn body_stream(self) -> u64 {
        match self {
            Role::Online | Role::Target => 1,
            Role::ModalityA => 3,
            Role::ModalityB => 4,
        }
    }
}

/// All values of one branch: backbone, projector and optional predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub role: Role,
    pub config: EncoderConfig,
    pub encoder: ParamSet,
    pub projector: ParamSet,
    pub predictor: Option<ParamSet>,
}

impl BranchParams {
    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn collections(&self) -> impl Iterator<Item = &ParamSet> {
        [Some(&self.encoder), Some(&self.projector), self.predictor.as_ref()]
            .into_iter()
            .flatten()
    }

    pub fn collections_mut(&mut self) -> impl Iterator<Item = &mut ParamSet> {
        [Some(&mut self.encoder), Some(&mut self.projector), self.predictor.as_mut()]
            .into_iter()
            .flatten()
    }

    pub fn all_finite(&self) -> bool {
        self.collections().all(ParamSet::all_finite)
    }

    pub fn trainable_count(&self) -> usize {
        self.collections().map(ParamSet::trainable_count).sum()
    }

    /// Gradient accumulator with this branch's layout.
    pub fn zeros_like(&self) -> Self {
        BranchParams {
            role: self.role,
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            projector: self.projector.zeros_like(),
            predictor: self.predictor.as_ref().map(ParamSet::zeros_like),
        }
    }

    /// Checks the stored tensors against the layout implied by `config`.
    pub fn validate_layout(&self) -> Result<()> {
        self.config.validate()?;
        let (_, enc, proj, pred) = BranchNet::layouts(&self.config, self.has_predictor());
        let pred_mismatch = match (&pred, &self.predictor) {
            (Some(l), Some(p)) => l.mismatch(p),
            _ => None,
        };
        if let Some(msg) = enc
            .mismatch(&self.encoder)
            .or_else(|| proj.mismatch(&self.projector))
            .or(pred_mismatch)
        {
            return Err(Error::Corruption(format!("{:?} branch: {msg}", self.role)));
        }
        Ok(())
    }
}

/// Creates a seeded branch. Online and target branches from one config
/// have identical backbone and projector weights; only the online branch
/// gets a predictor.
pub fn init_branch(config: &EncoderConfig, role: Role) -> Result<BranchParams> {
    config.validate()?;
    let mut body_rng = ChaCha8Rng::seed_from_u64(config.seed);
    body_rng.set_stream(role.body_stream());
    let mut pred_rng = ChaCha8Rng::seed_from_u64(config.seed);
    pred_rng.set_stream(2);

    let mut enc = params::Initializer {
        params: ParamSet::new(),
        rng: &mut body_rng,
    };
    let backbone_net = network::Backbone::declare(&mut enc, config);
    let encoder = enc.params;
    let mut proj = params::Initializer {
        params: ParamSet::new(),
        rng: &mut body_rng,
    };
    network::Mlp::declare(
        &mut proj,
        "projector",
        backbone_net.out_channels,
        config.projector_hidden,
        config.embed_dim,
        false,
    );
    let projector = proj.params;
    let predictor = (role == Role::Online).then(|| {
        let mut pred = params::Initializer {
            params: ParamSet::new(),
            rng: &mut pred_rng,
        };
        network::Mlp::declare(
            &mut pred,
            "predictor",
            config.embed_dim,
            config.predictor_hidden,
            config.embed_dim,
            true,
        );
        pred.params
    });
    Ok(BranchParams {
        role,
        config: config.clone(),
        encoder,
        projector,
        predictor,
    })
}

/// A batch of equally sized patches in `N x C x H x W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub n: usize,
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl PatchBatch {
    pub fn new(n: usize, channels: usize, side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * channels * side * side {
            return Err(Error::Shape(format!(
                "batch of {n} x {channels} x {side} x {side} needs {} values, got {}",
                n * channels * side * side,
                data.len()
            )));
        }
        Ok(PatchBatch {
            n,
            channels,
            side,
            data,
        })
    }

    pub fn from_patches(patches: &[Patch]) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Shape("empty patch batch".into()))?;
        let (channels, side) = (first.bands, first.side);
        let mut data = Vec::with_capacity(patches.len() * channels * side * side);
        for p in patches {
            if p.bands != channels || p.side != side {
                return Err(Error::Shape(format!(
                    "mixed patch shapes in batch: {}x{} vs {}x{}",
                    p.bands, p.side, channels, side
                )));
            }
            data.extend_from_slice(&p.pixels);
        }
        PatchBatch::new(patches.len(), channels, side, data)
    }

    pub fn concat(&self, other: &PatchBatch) -> Result<Self> {
        if self.channels != other.channels || self.side != other.side {
            return Err(Error::Shape("cannot concatenate batches of different shapes".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        PatchBatch::new(self.n + other.n, self.channels, self.side, data)
    }

    /// Rearranges into the `C x N x H x W` activation layout.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.side * self.side;
        let mut t = Tensor::zeros(self.channels, self.n, self.side, self.side);
        for ni in 0..self.n {
            for c in 0..self.channels {
                let src = &self.data[(ni * self.channels + c) * hw..][..hw];
                t.data[(c * self.n + ni) * hw..][..hw].copy_from_slice(src);
            }
        }
        t
    }
}

/// Row-major `rows x cols` matrix of feature vectors, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// From a `D x N` tensor (columns are samples).
    pub fn from_columns(t: &Tensor) -> Self {
        let (d, n) = (t.c, t.n);
        let mut data = vec![0.0f32; d * n];
        for i in 0..d {
            for j in 0..n {
                data[j * d + i] = t.data[i * n + j];
            }
        }
        FeatureMatrix { rows: n, cols: d, data }
    }

    /// Back to a `D x N` tensor.
    pub fn to_columns(&self) -> Tensor {
        let mut t = Tensor::zeros(self.cols, self.rows, 1, 1);
        for j in 0..self.rows {
            for i in 0..self.cols {
                t.data[i * self.rows + j] = self.data[j * self.cols + i];
            }
        }
        t
    }
}

fn check_encode_args(params: &BranchParams, batch: &PatchBatch, use_predictor: bool) -> Result<()> {
    if batch.channels != params.in_channels() {
        return Err(Error::Shape(format!(
            "{:?} branch expects {} channels, batch has {}",
            params.role,
            params.in_channels(),
            batch.channels
        )));
    }
    if batch.n == 0 {
        return Err(Error::Shape("empty patch batch".into()));
    }
    if use_predictor && !params.has_predictor() {
        return Err(Error::Contract(format!(
            "{:?} branch has no predictor head",
            params.role
        )));
    }
    Ok(())
}

/// Evaluation-mode features for a batch: one unit-norm row per patch.
pub fn encode_batch(params: &BranchParams, batch: &PatchBatch, use_predictor: bool) -> Result<FeatureMatrix> {
    check_encode_args(params, batch, use_predictor)?;
    let net = BranchNet::for_params(params);
    Ok(FeatureMatrix::from_columns(
        &net.forward_eval(params, &batch.to_tensor(), use_predictor),
    ))
}

pub fn encode(params: &BranchParams, patches: &[Patch], use_predictor: bool) -> Result<FeatureMatrix> {
    encode_batch(params, &PatchBatch::from_patches(patches)?, use_predictor)
}
