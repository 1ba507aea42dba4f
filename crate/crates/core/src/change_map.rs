//! Change intensity maps: per-pixel feature regression error between two
//! co-registered images, its standardization, and fusion across scales.
//!
//! For each evaluated pixel the `p x p` patch around it is embedded by
//! both branches and the score is `e = ||T1 - T2||^2`. With several
//! replicate models per scale the features are averaged before the
//! distance is taken.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{BranchNet, BranchParams, FeatureMatrix, Mode, ModelCheckpoint, PatchBatch};
use crate::error::{Error, Result};
use crate::fsutil::{sidecar_path, KeyValues};
use crate::raster::{read_raster, validate_patch_side, write_raster, Raster, ReflectPadded};

pub const DEFAULT_INFER_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapState {
    Raw,
    Standardized,
    Fused,
}

impl fmt::Display for MapState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapState::Raw => "raw",
            MapState::Standardized => "standardized",
            MapState::Fused => "fused",
        })
    }
}

impl FromStr for MapState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(MapState::Raw),
            "standardized" => Ok(MapState::Standardized),
            "fused" => Ok(MapState::Fused),
            other => Err(Error::Format(format!("unknown map state {other:?}"))),
        }
    }
}

/// Mean and standard deviation removed by [`standardize_map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width` values.
    pub values: Vec<f32>,
    pub state: MapState,
    pub stats: Option<MapStats>,
    /// Patch sides that contributed, ascending.
    pub scales: Vec<usize>,
    pub stride: usize,
}

impl IntensityMap {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.width + c]
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new_f32(self.width, self.height, 1, self.values.clone()).expect("map dimensions are consistent")
    }

    fn metadata(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("state", self.state);
        if let Some(s) = self.stats {
            kv.push("e_mu", s.mean);
            kv.push("e_sigma", s.std);
        }
        kv.push(
            "scales",
            self.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.push("stride", self.stride);
        kv
    }
}

/// Anything that maps a batch of patches to unit-norm feature rows.
pub trait PatchEmbedder {
    fn in_channels(&self) -> usize;
    fn describe(&self) -> String;
    fn embed(&self, batch: &PatchBatch) -> Result<FeatureMatrix>;
}

/// One branch of a trained model in evaluation mode.
pub struct BranchEmbedder<'a> {
    params: &'a BranchParams,
    net: BranchNet,
    use_predictor: bool,
}

impl<'a> BranchEmbedder<'a> {
    pub fn new(params: &'a BranchParams, use_predictor: bool) -> Result<Self> {
        if use_predictor && !params.has_predictor() {
            return Err(Error::Contract(format!("{:?} branch has no predictor head", params.role)));
        }
        Ok(BranchEmbedder {
            params,
            net: BranchNet::for_params(params),
            use_predictor,
        })
    }

    /// The two feature paths of a checkpoint: online with predictor and
    /// target for same-sensor models, the two modality branches otherwise.
    pub fn pair(ckpt: &'a ModelCheckpoint) -> Result<(Self, Self)> {
        let use_pred = ckpt.mode == Mode::Homogeneous;
        Ok((
            BranchEmbedder::new(&ckpt.branch1, use_pred)?,
            BranchEmbedder::new(&ckpt.branch2, false)?,
        ))
    }
}

impl PatchEmbedder for BranchEmbedder<'_> {
    fn in_channels(&self) -> usize {
        self.params.in_channels()
    }

    fn describe(&self) -> String {
        format!("{:?} branch", self.params.role)
    }

    fn embed(&self, batch: &PatchBatch) -> Result<FeatureMatrix> {
        if batch.channels != self.in_channels() {
            return Err(Error::Shape(format!(
                "{} expects {} channels, batch has {}",
                self.describe(),
                self.in_channels(),
                batch.channels
            )));
        }
        let out = self.net.forward_eval(self.params, &batch.to_tensor(), self.use_predictor);
        Ok(FeatureMatrix::from_columns(&out))
    }
}

/// Options for dense map evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    pub patch_side: usize,
    pub stride: usize,
    pub batch_size: usize,
}

impl MapOptions {
    pub fn new(patch_side: usize, stride: usize) -> Self {
        MapOptions {
            patch_side,
            stride,
            batch_size: DEFAULT_INFER_BATCH,
        }
    }
}

fn check_inputs(
    first: &dyn PatchEmbedder,
    second: &dyn PatchEmbedder,
    img1: &Raster,
    img2: &Raster,
) -> Result<()> {
    if !img1.same_size(img2) {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            img1.width(),
            img1.height(),
            img2.width(),
            img2.height()
        )));
    }
    for (emb, img, which) in [(first, img1, "first"), (second, img2, "second")] {
        if emb.in_channels() != img.bands() {
            return Err(Error::Contract(format!(
                "{} ({which} image) expects {} bands, image has {}",
                emb.describe(),
                emb.in_channels(),
                img.bands()
            )));
        }
    }
    Ok(())
}

/// Index of the evaluated row/column nearest to `i` on a stride-`s` grid.
fn nearest_on_grid(i: usize, s: usize, n: usize) -> usize {
    let last = (n - 1) / s * s;
    ((i + s / 2) / s * s).min(last)
}

/// Dense raw map from an ensemble of `(first, second)` embedder pairs
/// sharing one patch side. Each image is embedded by its side of every
/// pair; features are averaged across pairs before the squared distance.
pub fn intensity_map_from_embedders(
    members: &[(&dyn PatchEmbedder, &dyn PatchEmbedder)],
    img1: &Raster,
    img2: &Raster,
    opts: MapOptions,
) -> Result<IntensityMap> {
    validate_patch_side(opts.patch_side)?;
    if opts.stride == 0 {
        return Err(Error::Parameter("stride must be at least 1".into()));
    }
    if members.is_empty() {
        return Err(Error::Contract("no models to evaluate".into()));
    }
    for (a, b) in members {
        check_inputs(*a, *b, img1, img2)?;
    }
    let (w, h, p, s) = (img1.width(), img1.height(), opts.patch_side, opts.stride);
    let pad1 = ReflectPadded::new(&img1.to_f32(), p / 2);
    let pad2 = ReflectPadded::new(&img2.to_f32(), p / 2);
    let grid: Vec<(usize, usize)> = (0..h)
        .step_by(s)
        .flat_map(|r| (0..w).step_by(s).map(move |c| (r, c)))
        .collect();

    let mut values = vec![0.0f32; w * h];
    let inv_members = 1.0 / members.len() as f64;
    for chunk in grid.chunks(opts.batch_size.max(1)) {
        let b1 = gather(&pad1, chunk, p);
        let b2 = gather(&pad2, chunk, p);
        let mut t1: Option<Vec<f64>> = None;
        let mut t2: Option<Vec<f64>> = None;
        for (e1, e2) in members {
            accumulate(&mut t1, &e1.embed(&b1)?);
            accumulate(&mut t2, &e2.embed(&b2)?);
        }
        let (t1, t2) = (t1.unwrap(), t2.unwrap());
        let d = t1.len() / chunk.len();
        if t2.len() != t1.len() {
            return Err(Error::Contract("the two branches produce different feature sizes".into()));
        }
        for (k, &(r, c)) in chunk.iter().enumerate() {
            let e: f64 = (0..d)
                .map(|i| {
                    let diff = (t1[k * d + i] - t2[k * d + i]) * inv_members;
                    diff * diff
                })
                .sum();
            values[r * w + c] = e as f32;
        }
    }
    if s > 1 {
        let evaluated = values.clone();
        for r in 0..h {
            let rr = nearest_on_grid(r, s, h);
            for c in 0..w {
                values[r * w + c] = evaluated[rr * w + nearest_on_grid(c, s, w)];
            }
        }
    }
    Ok(IntensityMap {
        width: w,
        height: h,
        values,
        state: MapState::Raw,
        stats: None,
        scales: vec![p],
        stride: s,
    })
}

fn gather(padded: &ReflectPadded, pixels: &[(usize, usize)], p: usize) -> PatchBatch {
    let per = padded.bands() * p * p;
    let mut data = vec![0.0f32; pixels.len() * per];
    for (k, &(r, c)) in pixels.iter().enumerate() {
        padded.copy_window(r, c, p, &mut data[k * per..(k + 1) * per]);
    }
    PatchBatch::new(pixels.len(), padded.bands(), p, data).expect("batch sized from its pixels")
}

fn accumulate(sum: &mut Option<Vec<f64>>, f: &FeatureMatrix) {
    match sum {
        None => *sum = Some(f.data.iter().map(|&x| x as f64).collect()),
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(&f.data) {
                *a += x as f64;
            }
        }
    }
}

/// Raw map of one checkpoint: `img1` goes through branch1, `img2`
/// through branch2.
pub fn compute_intensity_map(ckpt: &ModelCheckpoint, img1: &Raster, img2: &Raster, stride: usize) -> Result<IntensityMap> {
    compute_ensemble_map(std::slice::from_ref(ckpt), img1, img2, MapOptions::new(ckpt.patch_side, stride))
}

/// Raw map of replicate checkpoints of one patch side.
pub fn compute_ensemble_map(
    ckpts: &[ModelCheckpoint],
    img1: &Raster,
    img2: &Raster,
    opts: MapOptions,
) -> Result<IntensityMap> {
    for c in ckpts {
        if c.patch_side != opts.patch_side {
            return Err(Error::Contract(format!(
                "checkpoint patch side {} differs from requested {}",
                c.patch_side, opts.patch_side
            )));
        }
    }
    let embedders = ckpts.iter().map(BranchEmbedder::pair).collect::<Result<Vec<_>>>()?;
    let members: Vec<(&dyn PatchEmbedder, &dyn PatchEmbedder)> = embedders
        .iter()
        .map(|(a, b)| (a as &dyn PatchEmbedder, b as &dyn PatchEmbedder))
        .collect();
    intensity_map_from_embedders(&members, img1, img2, opts)
}

/// `(e - mean) / std` over the whole map; a constant map becomes zeros
/// with `std = 0` recorded.
pub fn standardize_map(m: &IntensityMap) -> Result<IntensityMap> {
    if m.state != MapState::Raw {
        return Err(Error::State(format!("standardize expects a raw map, got {}", m.state)));
    }
    if m.values.is_empty() {
        return Err(Error::Contract("empty map".into()));
    }
    let n = m.values.len() as f64;
    let mean = m.values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = m.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let constant = m.values.iter().all(|&v| v == m.values[0]);
    let std = if constant { 0.0 } else { var.sqrt() };
    let values = if constant {
        vec![0.0; m.values.len()]
    } else {
        m.values.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    };
    Ok(IntensityMap {
        values,
        state: MapState::Standardized,
        stats: Some(MapStats { mean, std }),
        ..m.clone()
    })
}

/// Pixelwise mean of standardized maps. Each pixel is summed in sorted
/// order so the result does not depend on the order of `maps`.
pub fn fuse_scales(maps: &[IntensityMap]) -> Result<IntensityMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("fusion of an empty map list".into()))?;
    for m in maps {
        if m.width != first.width || m.height != first.height {
            return Err(Error::Contract(format!(
                "cannot fuse {}x{} with {}x{} map",
                m.width, m.height, first.width, first.height
            )));
        }
        if m.state != MapState::Standardized {
            return Err(Error::Contract(format!("fusion expects standardized maps, got {}", m.state)));
        }
    }
    let k = maps.len() as f64;
    let mut scratch = vec![0.0f32; maps.len()];
    let values = (0..first.values.len())
        .map(|i| {
            for (s, m) in scratch.iter_mut().zip(maps) {
                *s = m.values[i];
            }
            scratch.sort_by(f32::total_cmp);
            (scratch.iter().map(|&v| v as f64).sum::<f64>() / k) as f32
        })
        .collect();
    let mut scales: Vec<usize> = maps.iter().flat_map(|m| m.scales.iter().copied()).collect();
    scales.sort_unstable();
    scales.dedup();
    Ok(IntensityMap {
        width: first.width,
        height: first.height,
        values,
        state: MapState::Fused,
        stats: None,
        scales,
        stride: maps.iter().map(|m| m.stride).max().unwrap_or(1),
    })
}

/// Writes a 1-band float raster and its `.meta` sidecar.
pub fn write_map(m: &IntensityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_raster(&m.to_raster(), path)?;
    m.metadata().write(&sidecar_path(path))
}

pub fn read_map(path: impl AsRef<Path>) -> Result<IntensityMap> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    if raster.bands() != 1 {
        return Err(Error::Format(format!("{} has {} bands, maps have 1", path.display(), raster.bands())));
    }
    let meta = KeyValues::read(&sidecar_path(path))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Format(format!("{}: sidecar lacks {k}", path.display())))
    };
    let number = |k: &str| -> Result<f64> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad {k}", path.display())))
    };
    let state: MapState = field("state")?.parse()?;
    let stats = match (meta.get("e_mu"), meta.get("e_sigma")) {
        (Some(_), Some(_)) => Some(MapStats {
            mean: number("e_mu")?,
            std: number("e_sigma")?,
        }),
        _ => None,
    };
    let scales = field("scales")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("bad scale {s:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    Ok(IntensityMap {
        width: raster.width(),
        height: raster.height(),
        values: raster.as_f32()?.to_vec(),
        state,
        stats,
        scales,
        stride: number("stride")? as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_branch, EncoderConfig, Role, TrainMeta};
    use crate::raster::extract_patch;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Flattens the patch and scales it to unit length.
    struct Flatten {
        channels: usize,
    }

    impl PatchEmbedder for Flatten {
        fn in_channels(&self) -> usize {
            self.channels
        }

        fn describe(&self) -> String {
            "flatten".into()
        }

        fn embed(&self, batch: &PatchBatch) -> Result<FeatureMatrix> {
            let cols = batch.channels * batch.side * batch.side;
            let mut data = batch.data.clone();
            for row in data.chunks_mut(cols) {
                let n = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                row.iter_mut().for_each(|x| *x /= n);
            }
            Ok(FeatureMatrix { rows: batch.n, cols, data })
        }
    }

    fn tiny_config(c: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels: c,
            widths: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            stage_strides: vec![1, 2],
            stem_kernel: 3,
            embed_dim: 6,
            projector_hidden: 8,
            predictor_hidden: 8,
            seed: 5,
        }
    }

    fn homogeneous_ckpt(c: usize, p: usize) -> ModelCheckpoint {
        let cfg = tiny_config(c);
        ModelCheckpoint {
            config: cfg.clone(),
            branch1: init_branch(&cfg, Role::Online).unwrap(),
            branch2: init_branch(&cfg, Role::Target).unwrap(),
            mode: Mode::Homogeneous,
            patch_side: p,
            train_meta: TrainMeta::default(),
        }
    }

    fn random_raster(w: usize, h: usize, bands: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new_f32(w, h, bands, (0..w * h * bands).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn raw_map(values: Vec<f32>, w: usize, h: usize) -> IntensityMap {
        IntensityMap {
            width: w,
            height: h,
            values,
            state: MapState::Raw,
            stats: None,
            scales: vec![8],
            stride: 1,
        }
    }

    #[test]
    fn identical_features_give_zero_map() {
        let img = random_raster(12, 10, 2, 1);
        let f = Flatten { channels: 2 };
        let m = intensity_map_from_embedders(&[(&f, &f)], &img, &img, MapOptions::new(4, 1)).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        assert_eq!((m.width, m.height), (12, 10));
    }

    #[test]
    fn map_bounded_and_sized() {
        let ckpt = homogeneous_ckpt(3, 8);
        let (a, b) = (random_raster(13, 11, 3, 2), random_raster(13, 11, 3, 3));
        let m = compute_intensity_map(&ckpt, &a, &b, 1).unwrap();
        assert_eq!(m.values.len(), 13 * 11);
        assert!(m.values.iter().all(|&v| (0.0..=4.0 + 1e-5).contains(&v)));
    }

    #[test]
    fn strided_map_agrees_on_subgrid() {
        let ckpt = homogeneous_ckpt(2, 8);
        let (a, b) = (random_raster(17, 14, 2, 4), random_raster(17, 14, 2, 5));
        let full = compute_intensity_map(&ckpt, &a, &b, 1).unwrap();
        let coarse = compute_intensity_map(&ckpt, &a, &b, 4).unwrap();
        for r in (0..14).step_by(4) {
            for c in (0..17).step_by(4) {
                assert_eq!(full.get(r, c), coarse.get(r, c));
            }
        }
        // every pixel copies some evaluated pixel
        for &v in &coarse.values {
            assert!(full.values.contains(&v));
        }
    }

    #[test]
    fn batch_size_does_not_change_output() {
        let ckpt = homogeneous_ckpt(2, 4);
        let (a, b) = (random_raster(9, 7, 2, 6), random_raster(9, 7, 2, 7));
        let mut opts = MapOptions::new(4, 1);
        let big = compute_ensemble_map(std::slice::from_ref(&ckpt), &a, &b, opts).unwrap();
        opts.batch_size = 5;
        let small = compute_ensemble_map(std::slice::from_ref(&ckpt), &a, &b, opts).unwrap();
        // eval-mode forward is per sample, so only gemm blocking can differ
        for (x, y) in big.values.iter().zip(&small.values) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn matches_per_pixel_loop_and_cosine_form() {
        let ckpt = homogeneous_ckpt(2, 8);
        let (a, b) = (random_raster(10, 9, 2, 8), random_raster(10, 9, 2, 9));
        let m = compute_intensity_map(&ckpt, &a, &b, 1).unwrap();
        for r in 0..9 {
            for c in 0..10 {
                let t1 = crate::encoder::encode(&ckpt.branch1, &[extract_patch(&a, r, c, 8).unwrap()], true).unwrap();
                let t2 = crate::encoder::encode(&ckpt.branch2, &[extract_patch(&b, r, c, 8).unwrap()], false).unwrap();
                let dist: f64 = t1.data.iter().zip(&t2.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                let cos: f64 = t1.data.iter().zip(&t2.data).map(|(x, y)| (x * y) as f64).sum();
                assert!((m.get(r, c) as f64 - dist).abs() <= 1e-5);
                assert!((dist - (2.0 - 2.0 * cos)).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn swapping_images_and_branches_is_symmetric() {
        let cfg = tiny_config(2);
        let ckpt = ModelCheckpoint {
            config: cfg.clone(),
            branch1: init_branch(&cfg, Role::ModalityA).unwrap(),
            branch2: init_branch(&cfg, Role::ModalityB).unwrap(),
            mode: Mode::Heterogeneous,
            patch_side: 4,
            train_meta: TrainMeta::default(),
        };
        let swapped = ModelCheckpoint {
            branch1: ckpt.branch2.clone(),
            branch2: ckpt.branch1.clone(),
            ..ckpt.clone()
        };
        let (a, b) = (random_raster(8, 8, 2, 10), random_raster(8, 8, 2, 11));
        let m1 = compute_intensity_map(&ckpt, &a, &b, 1).unwrap();
        let m2 = compute_intensity_map(&swapped, &b, &a, 1).unwrap();
        assert_eq!(m1.values, m2.values);
    }

    #[test]
    fn input_contract_errors() {
        let ckpt = homogeneous_ckpt(2, 4);
        let a = random_raster(8, 8, 2, 1);
        let wrong_bands = random_raster(8, 8, 3, 1);
        let wrong_size = random_raster(9, 8, 2, 1);
        let err = compute_intensity_map(&ckpt, &a, &wrong_bands, 1).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("Target")), "{err}");
        assert!(matches!(compute_intensity_map(&ckpt, &a, &wrong_size, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn standardize_examples() {
        let m = standardize_map(&raw_map(vec![1.0, 2.0, 3.0, 6.0], 2, 2)).unwrap();
        let mean: f64 = m.values.iter().map(|&v| v as f64).sum::<f64>() / 4.0;
        let var: f64 = m.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(m.stats.unwrap().mean, 3.0);
        let c = standardize_map(&raw_map(vec![0.7; 6], 3, 2)).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
        assert_eq!(c.stats.unwrap().std, 0.0);
        assert!(matches!(standardize_map(&m), Err(Error::State(_))));
    }

    #[test]
    fn fuse_examples() {
        let m = standardize_map(&raw_map(vec![1.0, 2.0, 3.0, 6.0], 2, 2)).unwrap();
        assert_eq!(fuse_scales(std::slice::from_ref(&m)).unwrap().values, m.values);
        let neg = IntensityMap {
            values: m.values.iter().map(|v| -v).collect(),
            scales: vec![16],
            ..m.clone()
        };
        let f = fuse_scales(&[m.clone(), neg]).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
        assert_eq!(f.scales, vec![8, 16]);
        assert_eq!(f.state, MapState::Fused);
        assert!(matches!(fuse_scales(&[]), Err(Error::Contract(_))));
        let other = standardize_map(&raw_map(vec![1.0, 2.0, 3.0], 3, 1)).unwrap();
        assert!(matches!(fuse_scales(&[m, other]), Err(Error::Contract(_))));
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = standardize_map(&raw_map(vec![1.0, 2.0, 3.0, 6.0, 0.5, 0.25], 3, 2)).unwrap();
        let path = dir.path().join("map.rsrb");
        write_map(&m, &path).unwrap();
        assert_eq!(read_map(&path).unwrap(), m);
        let text = std::fs::read_to_string(dir.path().join("map.meta")).unwrap();
        for key in ["state=", "e_mu=", "e_sigma=", "scales=", "stride="] {
            assert!(text.contains(key));
        }
    }

    proptest! {
        #[test]
        fn standardize_affine_invariant(
            vals in prop::collection::vec(0.0f32..4.0, 16),
            a in 0.5f32..10.0,
            b in -2.0f32..2.0,
        ) {
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let base = standardize_map(&raw_map(vals.clone(), 4, 4)).unwrap();
            prop_assume!(base.stats.unwrap().std > 0.5);
            let moved = standardize_map(&raw_map(vals.iter().map(|v| a * v + b).collect(), 4, 4)).unwrap();
            for (x, y) in base.values.iter().zip(&moved.values) {
                prop_assert!((x - y).abs() <= 1e-5, "{} vs {}", x, y);
            }
        }

        #[test]
        fn fuse_permutation_invariant(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<IntensityMap> = (0..k)
                .map(|i| {
                    let mut m = standardize_map(&raw_map((0..20).map(|_| rng.random_range(0.0..4.0)).collect(), 5, 4)).unwrap();
                    m.scales = vec![8 * (i + 1)];
                    m
                })
                .collect();
            let mut shuffled = maps.clone();
            shuffled.reverse();
            shuffled.rotate_left(seed as usize % k);
            prop_assert_eq!(fuse_scales(&maps).unwrap(), fuse_scales(&shuffled).unwrap());
        }
    }
}
