//! Training loops for both regimes.
//!
//! Same-sensor pairs train an online branch (with predictor) to regress the
//! projection of a slowly moving target branch, which tracks the online
//! weights by an exponential moving average. Cross-sensor pairs train two
//! independent modality branches with the symmetric contrastive loss over
//! in-batch negatives.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{format_date, Archive, Split};
use crate::encoder::{
    init_branch, BranchNet, BranchParams, EncoderConfig, FeatureMatrix, Mode, ModelCheckpoint, PatchBatch, Role,
    Tensor, TrainMeta,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::losses::{byol_loss_with_grad, in_batch_symmetric_loss_with_grad, Embeddings};
use crate::raster::{standardize_bands, validate_patch_side, ReflectPadded};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub patch_side: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub beta: f64,
    pub ema_tau: f64,
    pub seed: u64,
    pub patches_per_image: usize,
    /// Modality of both views (same-sensor) or of branch 1 (cross-sensor).
    pub modality_a: String,
    /// Modality of branch 2 in cross-sensor mode.
    pub modality_b: String,
    /// Network shape. `in_channels` is replaced by each branch's band count
    /// and the initialization seed by `seed`.
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    pub fn homogeneous(modality: &str, patch_side: usize) -> Self {
        TrainConfig {
            mode: Mode::Homogeneous,
            patch_side,
            batch_size: 32,
            steps: 500,
            learning_rate: 1e-3,
            temperature: 0.1,
            beta: 0.5,
            ema_tau: 0.99,
            seed: 0,
            patches_per_image: 4,
            modality_a: modality.to_string(),
            modality_b: modality.to_string(),
            encoder: EncoderConfig::desk(1),
        }
    }

    pub fn heterogeneous(modality_a: &str, modality_b: &str, patch_side: usize) -> Self {
        TrainConfig {
            mode: Mode::Heterogeneous,
            modality_b: modality_b.to_string(),
            ..TrainConfig::homogeneous(modality_a, patch_side)
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_patch_side(self.patch_side)?;
        let param = |msg: String| Err(Error::Parameter(msg));
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return param(format!("ema_tau must lie in [0, 1], got {}", self.ema_tau));
        }
        if self.batch_size == 0 || (self.mode == Mode::Heterogeneous && self.batch_size < 2) {
            return param(format!(
                "batch size {} too small for {} training",
                self.batch_size, self.mode
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return param(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0) {
            return param(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.beta >= 0.0) {
            return param(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.patches_per_image == 0 {
            return param("patches_per_image must be at least 1".into());
        }
        Ok(())
    }
}

/// `tau * target + (1 - tau) * online` on every trainable encoder and
/// projector parameter. Batch-norm running statistics and any predictor on
/// the target are left as they are.
pub fn ema_update(target: &BranchParams, online: &BranchParams, tau: f64) -> Result<BranchParams> {
    let mut out = target.clone();
    ema_update_in_place(&mut out, online, tau)?;
    Ok(out)
}

pub fn ema_update_in_place(target: &mut BranchParams, online: &BranchParams, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter(format!("EMA rate must lie in [0, 1], got {tau}")));
    }
    if !target.encoder.same_layout(&online.encoder) || !target.projector.same_layout(&online.projector) {
        return Err(Error::Contract("EMA between branches of different shapes".into()));
    }
    let keep = tau;
    let take = 1.0 - tau;
    for (t_set, o_set) in [
        (&mut target.encoder, &online.encoder),
        (&mut target.projector, &online.projector),
    ] {
        for (t, o) in t_set.iter_mut().zip(o_set.iter()) {
            if !t.trainable {
                continue;
            }
            for (phi, &theta) in t.data.iter_mut().zip(&o.data) {
                *phi = (keep * *phi as f64 + take * theta as f64) as f32;
            }
        }
    }
    Ok(())
}

/// Adam with bias correction over the trainable parameters of one branch.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &BranchParams, lr: f64) -> Self {
        let shapes: Vec<Vec<f32>> = params
            .collections()
            .flat_map(|s| s.iter())
            .map(|p| vec![0.0; if p.trainable { p.data.len() } else { 0 }])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step(&mut self, params: &mut BranchParams, grads: &BranchParams) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr / c1) as f32;
        let c2_sqrt_inv = (1.0 / c2.sqrt()) as f32;
        let eps = self.eps as f32;
        let pairs = params
            .collections_mut()
            .flat_map(|s| s.iter_mut())
            .zip(grads.collections().flat_map(|s| s.iter()));
        for (((p, g), m), v) in pairs.zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for (((x, &gx), mx), vx) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mx = b1 * *mx + (1.0 - b1) * gx;
                *vx = b2 * *vx + (1.0 - b2) * gx * gx;
                *x -= step * *mx / (vx.sqrt() * c2_sqrt_inv + eps);
            }
        }
    }
}

/// Where a training pair came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMeta {
    pub scene: String,
    pub first_modality: String,
    pub second_modality: String,
    pub first_date: chrono::NaiveDate,
    pub second_date: chrono::NaiveDate,
    pub row: usize,
    pub col: usize,
}

/// Co-located patch pairs: row `i` of `first` and `second` show the same
/// ground location in two acquisitions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub first: PatchBatch,
    pub second: PatchBatch,
    pub meta: Vec<PairMeta>,
}

/// Precomputed standardized, padded training images and the acquisition
/// pairs eligible for sampling.
pub struct PairSampler<'a> {
    archive: &'a Archive,
    config: TrainConfig,
    padded: Vec<Vec<Option<ReflectPadded>>>,
    candidates: Vec<Vec<(usize, usize)>>,
    bands: (usize, usize),
}

impl<'a> PairSampler<'a> {
    pub fn new(archive: &'a Archive, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if archive.scenes.is_empty() {
            return Err(Error::Data("archive has no scenes".into()));
        }
        let (ma, mb) = (config.modality_a.as_str(), config.modality_b.as_str());
        let bands_a = archive
            .bands_of(ma)
            .ok_or_else(|| Error::Data(format!("archive has no {ma} acquisitions")))?;
        let bands_b = archive
            .bands_of(mb)
            .ok_or_else(|| Error::Data(format!("archive has no {mb} acquisitions")))?;
        let mut candidates = Vec::with_capacity(archive.scenes.len());
        for scene in &archive.scenes {
            let train = |m: &str| -> Vec<(usize, &crate::archive::Acquisition)> {
                scene
                    .acquisitions
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.modality == m && a.split == Split::Train)
                    .collect()
            };
            let pairs: Vec<(usize, usize)> = match config.mode {
                Mode::Homogeneous => {
                    let idx: Vec<usize> = train(ma).into_iter().map(|(i, _)| i).collect();
                    if idx.len() < 2 {
                        return Err(Error::Data(format!(
                            "scene {}: {} training dates of {ma}, need at least 2",
                            scene.scene_id,
                            idx.len()
                        )));
                    }
                    idx.iter()
                        .flat_map(|&i| idx.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
                        .collect()
                }
                Mode::Heterogeneous => {
                    let seconds = train(mb);
                    let pairs: Vec<(usize, usize)> = train(ma)
                        .into_iter()
                        .filter_map(|(i, a)| {
                            seconds
                                .iter()
                                .find(|(_, b)| same_month(a.date, b.date))
                                .map(|&(j, _)| (i, j))
                        })
                        .collect();
                    if pairs.is_empty() {
                        return Err(Error::Data(format!(
                            "scene {}: no {ma}/{mb} training acquisitions in a shared month",
                            scene.scene_id
                        )));
                    }
                    pairs
                }
            };
            candidates.push(pairs);
        }
        let pad = config.patch_side / 2;
        let padded = archive
            .scenes
            .iter()
            .zip(&candidates)
            .map(|(scene, pairs)| {
                let used: std::collections::BTreeSet<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
                (0..scene.acquisitions.len())
                    .map(|k| {
                        if used.contains(&k) {
                            let std = standardize_bands(&scene.acquisitions[k].raster.to_f32())?;
                            Ok(Some(ReflectPadded::new(&std, pad)))
                        } else {
                            Ok(None)
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairSampler {
            archive,
            config: config.clone(),
            padded,
            candidates,
            bands: (bands_a, bands_b),
        })
    }

    /// Band counts of the first and second view.
    pub fn bands(&self) -> (usize, usize) {
        self.bands
    }

    /// `batch_size` pairs drawn as groups of up to `patches_per_image`
    /// random locations per sampled acquisition pair; scenes are drawn
    /// uniformly.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> PairBatch {
        let cfg = &self.config;
        let p = cfg.patch_side;
        let (na, nb) = (self.bands.0 * p * p, self.bands.1 * p * p);
        let b = cfg.batch_size;
        let mut first = vec![0.0f32; b * na];
        let mut second = vec![0.0f32; b * nb];
        let mut meta = Vec::with_capacity(b);
        let mut filled = 0;
        while filled < b {
            let s = rng.random_range(0..self.archive.scenes.len());
            let scene = &self.archive.scenes[s];
            let (i, j) = self.candidates[s][rng.random_range(0..self.candidates[s].len())];
            let (a1, a2) = (&scene.acquisitions[i], &scene.acquisitions[j]);
            let (p1, p2) = (
                self.padded[s][i].as_ref().expect("sampled acquisitions are padded"),
                self.padded[s][j].as_ref().expect("sampled acquisitions are padded"),
            );
            let (h, w) = (a1.raster.height(), a1.raster.width());
            for _ in 0..cfg.patches_per_image.min(b - filled) {
                let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
                p1.copy_window(r, c, p, &mut first[filled * na..(filled + 1) * na]);
                p2.copy_window(r, c, p, &mut second[filled * nb..(filled + 1) * nb]);
                meta.push(PairMeta {
                    scene: scene.scene_id.clone(),
                    first_modality: a1.modality.clone(),
                    second_modality: a2.modality.clone(),
                    first_date: a1.date,
                    second_date: a2.date,
                    row: r,
                    col: c,
                });
                filled += 1;
            }
        }
        PairBatch {
            first: PatchBatch::new(b, self.bands.0, p, first).expect("sized above"),
            second: PatchBatch::new(b, self.bands.1, p, second).expect("sized above"),
            meta,
        }
    }
}

fn same_month(a: chrono::NaiveDate, b: chrono::NaiveDate) -> bool {
    use chrono::Datelike;
    (a.year(), a.month()) == (b.year(), b.month())
}

/// One batch drawn with a fresh sampler; deterministic in `rng`.
pub fn sample_pairs(archive: &Archive, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
    Ok(PairSampler::new(archive, config)?.sample(rng))
}

/// Trained checkpoint and the per-step loss series.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Means of the first and last 10% of the loss series (at least one
    /// step each).
    pub fn window_means(&self) -> Option<(f64, f64)> {
        window_means(&self.losses, 0.1)
    }
}

pub fn window_means(losses: &[f64], fraction: f64) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let k = ((losses.len() as f64 * fraction).round() as usize).clamp(1, losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..k]), mean(&losses[losses.len() - k..])))
}

/// `step<TAB>loss` per line.
pub fn write_loss_log(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let text: String = losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l}\n")).collect();
    write_atomic(path.as_ref(), text.as_bytes())
}

fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100);
    rng
}

fn embeddings(t: &Tensor) -> Embeddings {
    Embeddings::from(&FeatureMatrix::from_columns(t))
}

fn non_finite(step: usize, lr: f64, loss: f64) -> Error {
    Error::NonFinite { step, lr, loss }
}

fn finish(
    config: &TrainConfig,
    branch1: BranchParams,
    branch2: BranchParams,
    losses: Vec<f64>,
) -> Result<TrainOutcome> {
    if !branch1.all_finite() || !branch2.all_finite() {
        return Err(non_finite(losses.len(), config.learning_rate, f64::NAN));
    }
    let checkpoint = ModelCheckpoint {
        config: branch1.config.clone(),
        branch1,
        branch2,
        mode: config.mode,
        patch_side: config.patch_side,
        train_meta: TrainMeta {
            steps: losses.len() as u64,
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            seed: config.seed,
        },
    };
    checkpoint.validate()?;
    Ok(TrainOutcome { checkpoint, losses })
}

/// Encoder shape for a branch reading `bands` channels.
pub fn branch_config(config: &TrainConfig, bands: usize) -> EncoderConfig {
    let mut enc = config.encoder.with_in_channels(bands);
    enc.seed = config.seed;
    enc
}

fn require_mode(config: &TrainConfig, mode: Mode) -> Result<()> {
    if config.mode != mode {
        return Err(Error::Config(format!("config is for {} training, not {mode}", config.mode)));
    }
    Ok(())
}

/// Same-sensor training from freshly initialized online/target branches.
pub fn train_homogeneous(archive: &Archive, config: &TrainConfig) -> Result<TrainOutcome> {
    require_mode(config, Mode::Homogeneous)?;
    let bands = archive
        .bands_of(&config.modality_a)
        .ok_or_else(|| Error::Data(format!("archive has no {} acquisitions", config.modality_a)))?;
    let enc = branch_config(config, bands);
    train_homogeneous_from(
        archive,
        config,
        init_branch(&enc, Role::Online)?,
        init_branch(&enc, Role::Target)?,
    )
}

/// Same-sensor training from given branches. Each step regresses the
/// online prediction of each view onto the target projection of the other
/// view, takes an Adam step on the online branch, then moves the target
/// towards it.
pub fn train_homogeneous_from(
    archive: &Archive,
    config: &TrainConfig,
    mut online: BranchParams,
    mut target: BranchParams,
) -> Result<TrainOutcome> {
    require_mode(config, Mode::Homogeneous)?;
    let sampler = PairSampler::new(archive, config)?;
    let mut rng = sampling_rng(config.seed);
    let online_net = BranchNet::for_params(&online);
    let target_net = BranchNet::for_params(&target);
    let mut adam = Adam::new(&online, config.learning_rate);
    let mut grads = online.zeros_like();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.sample(&mut rng);
        let views = batch.first.concat(&batch.second)?;
        let swapped = batch.second.concat(&batch.first)?;
        let (q, cache) = online_net.forward_train(&mut online, views.to_tensor(), true);
        let (t, _) = target_net.forward_train(&mut target, swapped.to_tensor(), false);
        let (loss, dq) = byol_loss_with_grad(&embeddings(&q), &embeddings(&t))?;
        if !loss.is_finite() {
            return Err(non_finite(step, config.learning_rate, loss));
        }
        grads.collections_mut().for_each(|s| s.fill_zero());
        online_net.backward(&online, &cache, &dq.to_features().to_columns(), &mut grads);
        adam.step(&mut online, &grads);
        ema_update_in_place(&mut target, &online, config.ema_tau)?;
        losses.push(loss);
    }
    finish(config, online, target, losses)
}

/// Cross-sensor training from freshly initialized modality branches.
pub fn train_heterogeneous(archive: &Archive, config: &TrainConfig) -> Result<TrainOutcome> {
    require_mode(config, Mode::Heterogeneous)?;
    let bands = |m: &str| {
        archive
            .bands_of(m)
            .ok_or_else(|| Error::Data(format!("archive has no {m} acquisitions")))
    };
    let a = init_branch(&branch_config(config, bands(&config.modality_a)?), Role::ModalityA)?;
    let b = init_branch(&branch_config(config, bands(&config.modality_b)?), Role::ModalityB)?;
    train_heterogeneous_from(archive, config, a, b)
}

/// Cross-sensor training from given branches: symmetric contrastive loss
/// over in-batch candidates, an independent Adam step on each branch.
pub fn train_heterogeneous_from(
    archive: &Archive,
    config: &TrainConfig,
    mut branch_a: BranchParams,
    mut branch_b: BranchParams,
) -> Result<TrainOutcome> {
    require_mode(config, Mode::Heterogeneous)?;
    let sampler = PairSampler::new(archive, config)?;
    let mut rng = sampling_rng(config.seed);
    let (net_a, net_b) = (BranchNet::for_params(&branch_a), BranchNet::for_params(&branch_b));
    let mut adam_a = Adam::new(&branch_a, config.learning_rate);
    let mut adam_b = Adam::new(&branch_b, config.learning_rate);
    let (mut grads_a, mut grads_b) = (branch_a.zeros_like(), branch_b.zeros_like());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.sample(&mut rng);
        let (za, cache_a) = net_a.forward_train(&mut branch_a, batch.first.to_tensor(), false);
        let (zb, cache_b) = net_b.forward_train(&mut branch_b, batch.second.to_tensor(), false);
        let (loss, dza, dzb) =
            in_batch_symmetric_loss_with_grad(&embeddings(&za), &embeddings(&zb), config.temperature, config.beta)?;
        if !loss.is_finite() {
            return Err(non_finite(step, config.learning_rate, loss));
        }
        grads_a.collections_mut().for_each(|s| s.fill_zero());
        grads_b.collections_mut().for_each(|s| s.fill_zero());
        net_a.backward(&branch_a, &cache_a, &dza.to_features().to_columns(), &mut grads_a);
        net_b.backward(&branch_b, &cache_b, &dzb.to_features().to_columns(), &mut grads_b);
        adam_a.step(&mut branch_a, &grads_a);
        adam_b.step(&mut branch_b, &grads_b);
        losses.push(loss);
    }
    finish(config, branch_a, branch_b, losses)
}

/// Dispatches on `config.mode`.
pub fn train(archive: &Archive, config: &TrainConfig) -> Result<TrainOutcome> {
    match config.mode {
        Mode::Homogeneous => train_homogeneous(archive, config),
        Mode::Heterogeneous => train_heterogeneous(archive, config),
    }
}

/// Human-readable description of a pair, for logs.
pub fn describe_pair(m: &PairMeta) -> String {
    format!(
        "scene {} ({}, {}) {} {} vs {} {}",
        m.scene,
        m.row,
        m.col,
        m.first_modality,
        format_date(m.first_date),
        m.second_modality,
        format_date(m.second_date)
    )
}
