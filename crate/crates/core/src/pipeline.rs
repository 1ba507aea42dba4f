//! Stage functions behind the command-line tool.
//!
//! Every stage reads only what earlier stages wrote under the archive and
//! output directories, so each one can be rerun on its own.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.txt                      effective configuration
//! <out>/models/p<p>_r<k>.ssck           one checkpoint per scale and replicate
//! <out>/models/p<p>_r<k>.loss.tsv       its training loss series
//! <out>/maps/scene_<id>/map_p<p>.rsrb   standardized map per scale (+ .meta)
//! <out>/maps/scene_<id>/fused.rsrb      fused map (+ .meta)
//! <out>/maps/scene_<id>/mask.rsrb       binary change mask (+ .meta)
//! <out>/metrics/scene_<id>.json         per-scene metric report
//! <out>/metrics.json                    pooled report, per-scene AUC
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;

use crate::archive::{Archive, TestPair};
use crate::change_map::{
    compute_ensemble_map, fuse_scales, read_map, standardize_map, write_map, IntensityMap, MapOptions,
};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, Mode, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::fsutil::{sidecar_path, write_atomic, KeyValues};
use crate::metrics::{compute_metrics, confusion_counts, roc_auc, ConfusionCounts, MetricReport};
use crate::raster::{read_raster, standardize_bands, write_raster, Raster};
use crate::synthgen::{generate_archive, ChangeShape, Modality, SynthConfig};
use crate::threshold::{
    binarize, decide_threshold, opposite_min_threshold, rosin_threshold, ThresholdDecision, ThresholdMethod,
    DEFAULT_BINS,
};
use crate::trainer::{train, write_loss_log, TrainConfig};

/// How the change threshold is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdChoice {
    Auto,
    Min,
    Rosin,
}

impl fmt::Display for ThresholdChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdChoice::Auto => "auto",
            ThresholdChoice::Min => "min",
            ThresholdChoice::Rosin => "rosin",
        })
    }
}

impl FromStr for ThresholdChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ThresholdChoice::Auto),
            "min" | "opposite_min" => Ok(ThresholdChoice::Min),
            "rosin" => Ok(ThresholdChoice::Rosin),
            other => Err(Error::Config(format!("unknown threshold method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Patch sides, one model family each.
    pub scales: Vec<usize>,
    /// Models trained per scale and averaged at inference.
    pub replicates: usize,
    /// Training settings; `patch_side` is set per scale.
    pub train: TrainConfig,
    pub archive: PathBuf,
    pub out: PathBuf,
    pub stride: usize,
    pub threshold: ThresholdChoice,
    pub bins: usize,
    /// Archive generation; its seed is tied to `train.seed`.
    pub synth: SynthConfig,
}

fn default_scales(mode: Mode) -> Vec<usize> {
    match mode {
        Mode::Homogeneous => vec![8, 16, 24],
        Mode::Heterogeneous => vec![8, 16],
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn new(mode: Mode) -> Self {
        let train = match mode {
            Mode::Homogeneous => TrainConfig::homogeneous(Modality::PseudoOptical.name(), 8),
            Mode::Heterogeneous => {
                TrainConfig::heterogeneous(Modality::PseudoOptical.name(), Modality::PseudoSar.name(), 8)
            }
        };
        PipelineConfig {
            scales: default_scales(mode),
            replicates: 1,
            synth: SynthConfig {
                seed: train.seed,
                ..SynthConfig::default()
            },
            train,
            archive: PathBuf::from("archive"),
            out: PathBuf::from("out"),
            stride: 1,
            threshold: ThresholdChoice::Auto,
            bins: DEFAULT_BINS,
        }
    }

    pub fn mode(&self) -> Mode {
        self.train.mode
    }

    /// Sets one key. Changing `mode` also resets the scales to that mode's
    /// default, so list `scales` after `mode`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "mode" => {
                let mode: Mode = v.parse().map_err(|_| Error::Config(format!("mode: unknown {v:?}")))?;
                if mode != t.mode {
                    t.mode = mode;
                    self.scales = default_scales(mode);
                }
            }
            "scales" => self.scales = parse_list(key, v)?,
            "replicates" => self.replicates = parse_value(key, v)?,
            "steps" => t.steps = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "learning_rate" => t.learning_rate = parse_value(key, v)?,
            "temperature" => t.temperature = parse_value(key, v)?,
            "beta" => t.beta = parse_value(key, v)?,
            "ema_tau" => t.ema_tau = parse_value(key, v)?,
            "seed" => {
                t.seed = parse_value(key, v)?;
                self.synth.seed = t.seed;
            }
            "patches_per_image" => t.patches_per_image = parse_value(key, v)?,
            "modality_a" => t.modality_a = v.to_string(),
            "modality_b" => t.modality_b = v.to_string(),
            "encoder" => {
                t.encoder = match v {
                    "desk" => EncoderConfig::desk(1),
                    "resnet34" => EncoderConfig::resnet34(1),
                    other => return Err(Error::Config(format!("encoder: unknown preset {other:?}"))),
                }
            }
            "widths" => t.encoder.widths = parse_list(key, v)?,
            "blocks_per_stage" => t.encoder.blocks_per_stage = parse_list(key, v)?,
            "stage_strides" => t.encoder.stage_strides = parse_list(key, v)?,
            "stem_kernel" => t.encoder.stem_kernel = parse_value(key, v)?,
            "embed_dim" => t.encoder.embed_dim = parse_value(key, v)?,
            "projector_hidden" => t.encoder.projector_hidden = parse_value(key, v)?,
            "predictor_hidden" => t.encoder.predictor_hidden = parse_value(key, v)?,
            "archive" => self.archive = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "stride" => self.stride = parse_value(key, v)?,
            "threshold_method" => self.threshold = v.parse()?,
            "bins" => self.bins = parse_value(key, v)?,
            "synth_scenes" => self.synth.n_scenes = parse_value(key, v)?,
            "synth_dates" => self.synth.n_dates = parse_value(key, v)?,
            "synth_size" => self.synth.size = parse_value(key, v)?,
            "synth_modalities" => {
                self.synth.modalities = parse_list::<String>(key, v)?
                    .iter()
                    .map(|m| m.parse::<Modality>().map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "change_objects" => self.synth.change.n_objects = parse_value(key, v)?,
            "change_size_min" => self.synth.change.size_range.0 = parse_value(key, v)?,
            "change_size_max" => self.synth.change.size_range.1 = parse_value(key, v)?,
            "change_magnitude" => self.synth.change.magnitude = parse_value(key, v)?,
            "change_shape" => {
                self.synth.change.shape = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mode = match kv.get("mode") {
            Some(m) => m.parse().map_err(|_| Error::Config(format!("mode: unknown {m:?}")))?,
            None => Mode::Homogeneous,
        };
        let mut cfg = PipelineConfig::new(mode);
        for (k, v) in &kv.0 {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::read(path)?)
    }

    /// Every key, in an order `parse` accepts.
    pub fn to_key_values(&self) -> KeyValues {
        let t = &self.train;
        let e = &t.encoder;
        let s = &self.synth;
        let mut kv = KeyValues::default();
        kv.push("mode", t.mode);
        kv.push("scales", join(&self.scales));
        kv.push("replicates", self.replicates);
        kv.push("steps", t.steps);
        kv.push("batch_size", t.batch_size);
        kv.push("learning_rate", t.learning_rate);
        kv.push("temperature", t.temperature);
        kv.push("beta", t.beta);
        kv.push("ema_tau", t.ema_tau);
        kv.push("seed", t.seed);
        kv.push("patches_per_image", t.patches_per_image);
        kv.push("modality_a", &t.modality_a);
        kv.push("modality_b", &t.modality_b);
        kv.push("widths", join(&e.widths));
        kv.push("blocks_per_stage", join(&e.blocks_per_stage));
        kv.push("stage_strides", join(&e.stage_strides));
        kv.push("stem_kernel", e.stem_kernel);
        kv.push("embed_dim", e.embed_dim);
        kv.push("projector_hidden", e.projector_hidden);
        kv.push("predictor_hidden", e.predictor_hidden);
        kv.push("archive", self.archive.display());
        kv.push("out", self.out.display());
        kv.push("stride", self.stride);
        kv.push("threshold_method", self.threshold);
        kv.push("bins", self.bins);
        kv.push("synth_scenes", s.n_scenes);
        kv.push("synth_dates", s.n_dates);
        kv.push("synth_size", s.size);
        kv.push("synth_modalities", join(&s.modalities.iter().map(|m| m.name()).collect::<Vec<_>>()));
        kv.push("change_objects", s.change.n_objects);
        kv.push("change_size_min", s.change.size_range.0);
        kv.push("change_size_max", s.change.size_range.1);
        kv.push("change_magnitude", s.change.magnitude);
        kv.push(
            "change_shape",
            match s.change.shape {
                ChangeShape::Square => "square",
                ChangeShape::Rect => "rect",
            },
        );
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        for &p in &self.scales {
            self.scale_config(p, 0).validate()?;
        }
        self.train.encoder.with_in_channels(1).validate()
    }

    /// Training settings for replicate `r` of patch side `p`.
    pub fn scale_config(&self, p: usize, r: usize) -> TrainConfig {
        TrainConfig {
            patch_side: p,
            seed: replicate_seed(self.train.seed, p, r),
            ..self.train.clone()
        }
    }

    /// Modalities of the two images of a test pair.
    pub fn pair_modalities(&self) -> (&str, &str) {
        match self.mode() {
            Mode::Homogeneous => (&self.train.modality_a, &self.train.modality_a),
            Mode::Heterogeneous => (&self.train.modality_a, &self.train.modality_b),
        }
    }

    pub fn model_path(&self, p: usize, r: usize) -> PathBuf {
        self.out.join("models").join(format!("p{p}_r{r}.ssck"))
    }

    pub fn loss_path(&self, p: usize, r: usize) -> PathBuf {
        self.out.join("models").join(format!("p{p}_r{r}.loss.tsv"))
    }

    pub fn scene_dir(&self, scene: &str) -> PathBuf {
        self.out.join("maps").join(format!("scene_{scene}"))
    }

    pub fn scale_map_path(&self, scene: &str, p: usize) -> PathBuf {
        self.scene_dir(scene).join(format!("map_p{p}.rsrb"))
    }

    pub fn fused_path(&self, scene: &str) -> PathBuf {
        self.scene_dir(scene).join("fused.rsrb")
    }

    pub fn mask_path(&self, scene: &str) -> PathBuf {
        self.scene_dir(scene).join("mask.rsrb")
    }

    pub fn scene_metrics_path(&self, scene: &str) -> PathBuf {
        self.out.join("metrics").join(format!("scene_{scene}.json"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.json")
    }
}

/// Seed of replicate `r` at patch side `p`, a splitmix hash of the run seed.
pub fn replicate_seed(seed: u64, p: usize, r: usize) -> u64 {
    let mut z = seed
        .wrapping_add((p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((r as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the synthetic archive at `cfg.archive`.
pub fn run_synth(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let archive = generate_archive(&cfg.synth)?;
    archive.save(&cfg.archive)?;
    Ok(vec![cfg.archive.join(crate::archive::MANIFEST_NAME)])
}

fn load_archive(cfg: &PipelineConfig) -> Result<Archive> {
    Archive::load(&cfg.archive)
}

/// Trains every (scale, replicate) model; writes checkpoints and loss logs.
pub fn run_train(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let archive = load_archive(cfg)?;
    let mut out = Vec::new();
    for &p in &cfg.scales {
        for r in 0..cfg.replicates {
            let outcome = train(&archive, &cfg.scale_config(p, r))?;
            let (model, loss) = (cfg.model_path(p, r), cfg.loss_path(p, r));
            save_checkpoint(&outcome.checkpoint, &model)?;
            write_loss_log(&loss, &outcome.losses)?;
            out.push(model);
            out.push(loss);
        }
    }
    Ok(out)
}

fn load_models(cfg: &PipelineConfig, p: usize) -> Result<Vec<ModelCheckpoint>> {
    (0..cfg.replicates)
        .map(|r| {
            let path = cfg.model_path(p, r);
            if !path.exists() {
                return Err(Error::Data(format!("missing checkpoint {}", path.display())));
            }
            let ckpt = load_checkpoint(&path)?;
            if ckpt.mode != cfg.mode() {
                return Err(Error::Contract(format!(
                    "{} holds a {} model, config asks for {}",
                    path.display(),
                    ckpt.mode,
                    cfg.mode()
                )));
            }
            Ok(ckpt)
        })
        .collect()
}

/// Standardized per-scale maps of one test pair and their fusion.
pub fn infer_pair(
    cfg: &PipelineConfig,
    models: &[(usize, Vec<ModelCheckpoint>)],
    pair: &TestPair<'_>,
) -> Result<(Vec<IntensityMap>, IntensityMap)> {
    let img1 = standardize_bands(&pair.first.raster.to_f32())?;
    let img2 = standardize_bands(&pair.second.raster.to_f32())?;
    let maps = models
        .iter()
        .map(|(p, ckpts)| {
            let opts = MapOptions::new(*p, cfg.stride);
            standardize_map(&compute_ensemble_map(ckpts, &img1, &img2, opts)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_scales(&maps)?;
    Ok((maps, fused))
}

/// Writes per-scale and fused maps for every held-out pair.
pub fn run_infer(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let archive = load_archive(cfg)?;
    let models = cfg
        .scales
        .iter()
        .map(|&p| Ok((p, load_models(cfg, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let (m1, m2) = cfg.pair_modalities();
    let mut out = Vec::new();
    for pair in archive.test_pairs(m1, m2)? {
        let scene = &pair.scene.scene_id;
        let (maps, fused) = infer_pair(cfg, &models, &pair)?;
        for ((p, _), m) in models.iter().zip(&maps) {
            let path = cfg.scale_map_path(scene, *p);
            write_map(m, &path)?;
            out.push(path);
        }
        let path = cfg.fused_path(scene);
        write_map(&fused, &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Threshold for a fused map under the configured strategy.
pub fn choose_threshold(m: &IntensityMap, choice: ThresholdChoice, bins: usize) -> Result<ThresholdDecision> {
    match choice {
        ThresholdChoice::Auto => decide_threshold(m, bins),
        ThresholdChoice::Min => {
            let t = opposite_min_threshold(m)?;
            Ok(ThresholdDecision {
                t_min: t,
                t_rosin: f64::NAN,
                chosen: t,
                method: ThresholdMethod::OppositeMin,
            })
        }
        ThresholdChoice::Rosin => {
            let t = rosin_threshold(m, bins)?;
            Ok(ThresholdDecision {
                t_min: opposite_min_threshold(m)?,
                t_rosin: t,
                chosen: t,
                method: ThresholdMethod::Rosin,
            })
        }
    }
}

/// Binarizes every fused map; the mask sidecar records the decision.
pub fn run_threshold(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let archive = load_archive(cfg)?;
    let mut out = Vec::new();
    for scene in &archive.scenes {
        let fused_path = cfg.fused_path(&scene.scene_id);
        if !fused_path.exists() {
            return Err(Error::Data(format!("missing fused map {}", fused_path.display())));
        }
        let fused = read_map(&fused_path)?;
        let d = choose_threshold(&fused, cfg.threshold, cfg.bins)?;
        let mask_path = cfg.mask_path(&scene.scene_id);
        write_raster(&binarize(&fused, d.chosen), &mask_path)?;
        let mut kv = KeyValues::default();
        kv.push("t_min", d.t_min);
        kv.push("t_rosin", d.t_rosin);
        kv.push("chosen", d.chosen);
        kv.push("method", d.method);
        let meta = sidecar_path(&mask_path);
        kv.write(&meta)?;
        out.push(mask_path);
        out.push(meta);
    }
    Ok(out)
}

/// Report for a predicted mask against a reference mask.
pub fn evaluate_masks(pred: &Raster, gt: &Raster) -> Result<MetricReport> {
    compute_metrics(&confusion_counts(pred, gt)?)
}

/// Per-scene reports plus pooled counts and fused-map AUC in `metrics.json`.
pub fn run_eval(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let archive = load_archive(cfg)?;
    let (m1, m2) = cfg.pair_modalities();
    let mut out = Vec::new();
    let mut pooled = ConfusionCounts::default();
    let mut scenes = Vec::new();
    for pair in archive.test_pairs(m1, m2)? {
        let scene = &pair.scene.scene_id;
        let mask_path = cfg.mask_path(scene);
        if !mask_path.exists() {
            return Err(Error::Data(format!("missing mask {}", mask_path.display())));
        }
        let mask = read_raster(&mask_path)?;
        let gt = &pair.truth.mask;
        let counts = confusion_counts(&mask, gt)?;
        let report = compute_metrics(&counts)?;
        pooled = pooled + counts;
        let fused = read_map(cfg.fused_path(scene))?;
        let auc = roc_auc(&fused.values, gt.as_u8()?)?;
        let path = cfg.scene_metrics_path(scene);
        write_atomic(&path, report.to_json().as_bytes())?;
        out.push(path);
        scenes.push(json!({
            "scene": scene,
            "auc": auc,
            "metrics": serde_json::from_str::<serde_json::Value>(&report.to_json()).expect("valid report json"),
        }));
    }
    let pooled_report = compute_metrics(&pooled)?;
    let doc = json!({
        "pooled": serde_json::from_str::<serde_json::Value>(&pooled_report.to_json()).expect("valid report json"),
        "scenes": scenes,
    });
    let path = cfg.metrics_path();
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&path, text.as_bytes())?;
    out.push(path);
    Ok(out)
}

/// Records the effective configuration next to the outputs.
pub fn write_config(cfg: &PipelineConfig) -> Result<PathBuf> {
    let path = cfg.out.join("config.txt");
    cfg.to_key_values().write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_mode() {
        assert_eq!(PipelineConfig::new(Mode::Homogeneous).scales, vec![8, 16, 24]);
        assert_eq!(PipelineConfig::new(Mode::Heterogeneous).scales, vec![8, 16]);
        let cfg = PipelineConfig::parse("mode = heterogeneous\n").unwrap();
        assert_eq!(cfg.scales, vec![8, 16]);
        assert_eq!(cfg.pair_modalities(), ("pseudo_optical", "pseudo_sar"));
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = PipelineConfig::new(Mode::Heterogeneous);
        cfg.set("scales", "4, 12").unwrap();
        cfg.set("seed", "11").unwrap();
        cfg.set("widths", "4,8").unwrap();
        cfg.set("blocks_per_stage", "1,1").unwrap();
        cfg.set("stage_strides", "1,2").unwrap();
        cfg.set("threshold_method", "rosin").unwrap();
        cfg.set("synth_modalities", "pseudo_optical,pseudo_sar").unwrap();
        let back = PipelineConfig::parse(&cfg.to_key_values().render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.synth.seed, 11);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        assert!(matches!(PipelineConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("steps = many"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("threshold_method = otsu"), Err(Error::Config(_))));
        let mut cfg = PipelineConfig::new(Mode::Homogeneous);
        cfg.scales.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn replicate_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = [(8, 0), (8, 1), (16, 0), (16, 1)]
            .iter()
            .map(|&(p, r)| replicate_seed(7, p, r))
            .collect();
        assert_eq!(seeds.len(), 4);
        assert_eq!(replicate_seed(7, 8, 0), replicate_seed(7, 8, 0));
    }
}
