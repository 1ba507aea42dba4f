//! Deterministic synthetic archives: a latent field per scene, two
//! sensor-like renderings of it with date-dependent nuisance variation, and
//! planted object changes with exact masks.

use std::fmt;
use std::str::FromStr;

use chrono::{Months, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::archive::{Acquisition, Archive, GroundTruth, SceneSeries, Split};
use crate::error::{Error, Result};
use crate::raster::{reflect_index, Raster};

pub const MIN_BASE_SIZE: usize = 32;
const OPTICAL_NOISE_SIGMA: f64 = 0.02;
const SPECKLE_LOOKS: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_CHANGED_FRACTION: f64 = 0.25;

/// Square latent field with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Field {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.size + c]
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of value noise: random lattice values over `cells x cells`
/// cells with a random sub-cell offset, smoothly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let (oy, ox): (f64, f64) = (rng.random(), rng.random());
    let scale = cells as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let y = r as f64 * scale + oy;
        let (y0, fy) = (y.floor() as usize, smoothstep(y.fract()));
        for c in 0..size {
            let x = c as f64 * scale + ox;
            let (x0, fx) = (x.floor() as usize, smoothstep(x.fract()));
            let at = |i: usize, j: usize| lattice[i * n + j];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Three octaves of value noise (2, 4 and 8 cells across, amplitudes 1,
/// 1/2, 1/4), rescaled to `[0, 1]`.
pub fn generate_base(seed: u64, size: usize) -> Result<Field> {
    if size < MIN_BASE_SIZE {
        return Err(Error::Parameter(format!("base size must be at least {MIN_BASE_SIZE}, got {size}")));
    }
    let mut acc = vec![0.0f64; size * size];
    for (octave, (cells, amp)) in [(2usize, 1.0f64), (4, 0.5), (8, 0.25)].into_iter().enumerate() {
        let mut rng = rng_for(seed, octave as u64);
        for (a, v) in acc.iter_mut().zip(value_noise(&mut rng, size, cells)) {
            *a += amp * v;
        }
    }
    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    Ok(Field {
        size,
        data: acc.iter().map(|&v| (((v - lo) / span) as f32).clamp(0.0, 1.0)).collect(),
    })
}

/// Separable box blur with reflected borders.
fn box_blur(data: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let k = (2 * radius + 1) as f64;
    let r = radius as isize;
    let mut tmp = vec![0.0; data.len()];
    for row in 0..size {
        for col in 0..size {
            tmp[row * size + col] = (-r..=r)
                .map(|d| data[row * size + reflect_index(col as isize + d, size)])
                .sum::<f64>()
                / k;
        }
    }
    let mut out = vec![0.0; data.len()];
    for row in 0..size {
        for col in 0..size {
            out[row * size + col] = (-r..=r)
                .map(|d| tmp[reflect_index(row as isize + d, size) * size + col])
                .sum::<f64>()
                / k;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    PseudoOptical,
    PseudoSar,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::PseudoOptical => "pseudo_optical",
            Modality::PseudoSar => "pseudo_sar",
        }
    }

    pub fn bands(self) -> usize {
        match self {
            Modality::PseudoOptical => 4,
            Modality::PseudoSar => 2,
        }
    }

    /// Day of month on which this sensor acquires.
    fn acquisition_day(self) -> u32 {
        match self {
            Modality::PseudoOptical => 5,
            Modality::PseudoSar => 17,
        }
    }

    fn code(self) -> u64 {
        match self {
            Modality::PseudoOptical => 1,
            Modality::PseudoSar => 2,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo_optical" | "optical" => Ok(Modality::PseudoOptical),
            "pseudo_sar" | "sar" => Ok(Modality::PseudoSar),
            other => Err(Error::Parameter(format!("unknown modality {other:?}"))),
        }
    }
}

/// Optical band = a*base + b*base^2 + c*smooth(base) + d.
const OPTICAL_MIX: [[f64; 4]; 4] = [
    [0.8, 0.3, 0.2, 0.1],
    [0.5, -0.4, 0.6, 0.2],
    [-0.9, 0.1, -0.3, 0.9],
    [1.0, -0.2, -0.3, 0.3],
];

/// Per-band sensitivity to seasonal and illumination effects. Every date
/// scales this one spectral direction, so irrelevant variation moves all
/// bands together.
const SEASONAL_RESPONSE: [f64; 4] = [0.2, 0.25, 0.15, 0.2];

/// Smooth date-dependent nuisance field, centered on zero.
fn seasonal_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    value_noise(rng, size, 2).into_iter().map(|v| v - 0.5).collect()
}

fn widen(base: &Field) -> Vec<f64> {
    base.data.iter().map(|&v| v as f64).collect()
}

fn render_optical(base: &Field, date_seed: u64) -> Vec<f32> {
    let size = base.size;
    let b = widen(base);
    let smooth = box_blur(&b, size, 2);
    let mut rng = rng_for(date_seed, 10);
    let season = seasonal_field(&mut rng, size);
    let noise = Normal::new(0.0, OPTICAL_NOISE_SIGMA).expect("valid sigma");
    let mut out = Vec::with_capacity(4 * size * size);
    let amplitude: f64 = rng.random_range(0.4..1.0);
    let shift: f64 = rng.random_range(-0.25..0.25);
    for (coef, response) in OPTICAL_MIX.iter().zip(SEASONAL_RESPONSE) {
        let gain = amplitude * response;
        let offset = shift * response;
        for i in 0..size * size {
            let v = coef[0] * b[i] + coef[1] * b[i] * b[i] + coef[2] * smooth[i] + coef[3]
                + gain * season[i]
                + offset
                + noise.sample(&mut rng);
            out.push(v as f32);
        }
    }
    out
}

/// Linear-power pseudo-SAR backscatter before log compression: an
/// exponential of the latent field times mean-1 gamma speckle.
pub fn sar_intensity(base: &Field, date_seed: u64) -> Vec<f32> {
    let size = base.size;
    let b = widen(base);
    let smooth = box_blur(&b, size, 3);
    let mut rng = rng_for(date_seed, 20);
    let season = seasonal_field(&mut rng, size);
    let moisture: f64 = rng.random_range(-0.1..0.1);
    let speckle = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).expect("valid gamma");
    let mut out = Vec::with_capacity(2 * size * size);
    for band in 0..2 {
        for i in 0..size * size {
            let log_sigma0 = match band {
                0 => 2.5 * b[i] - 1.0 + 0.4 * season[i] + moisture,
                _ => 1.5 * (1.0 - b[i]).powi(2) + 0.8 * smooth[i] - 0.5 + 0.2 * season[i],
            };
            out.push((log_sigma0.exp() * speckle.sample(&mut rng)) as f32);
        }
    }
    out
}

/// Renders the latent field as one acquisition of `modality`.
pub fn modality_transform(base: &Field, modality: Modality, date_seed: u64) -> Raster {
    let data = match modality {
        Modality::PseudoOptical => render_optical(base, date_seed),
        Modality::PseudoSar => sar_intensity(base, date_seed).into_iter().map(f32::ln).collect(),
    };
    Raster::new_f32(base.size, base.size, modality.bands(), data).expect("rendered size matches base")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeShape {
    Square,
    Rect,
}

impl FromStr for ChangeShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ChangeShape::Square),
            "rect" => Ok(ChangeShape::Rect),
            other => Err(Error::Parameter(format!("unknown change shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangeSpec {
    pub n_objects: usize,
    /// Inclusive side-length range in pixels.
    pub size_range: (usize, usize),
    /// Shift in units of each band's standard deviation.
    pub magnitude: f64,
    pub shape: ChangeShape,
}

impl Default for ChangeSpec {
    fn default() -> Self {
        ChangeSpec {
            n_objects: 4,
            size_range: (8, 16),
            magnitude: 2.0,
            shape: ChangeShape::Square,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.top < o.top + o.height
            && o.top < self.top + self.height
            && self.left < o.left + o.width
            && o.left < self.left + self.width
    }
}

fn place_objects(w: usize, h: usize, spec: &ChangeSpec, seed: u64) -> Result<Vec<Rect>> {
    let (lo, hi) = spec.size_range;
    if lo == 0 || lo > hi {
        return Err(Error::Spec(format!("invalid size range {lo}..={hi}")));
    }
    if spec.n_objects > 0 && (hi > w || hi > h) {
        return Err(Error::Spec(format!("objects up to {hi} px do not fit a {w}x{h} raster")));
    }
    let mut rng = rng_for(seed, 30);
    let mut placed: Vec<Rect> = Vec::with_capacity(spec.n_objects);
    for k in 0..spec.n_objects {
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let height = rng.random_range(lo..=hi);
            let width = match spec.shape {
                ChangeShape::Square => height,
                ChangeShape::Rect => rng.random_range(lo..=hi),
            };
            let cand = Rect {
                top: rng.random_range(0..=h - height),
                left: rng.random_range(0..=w - width),
                height,
                width,
            };
            if placed.iter().all(|p| !p.overlaps(&cand)) {
                found = Some(cand);
                break;
            }
        }
        placed.push(found.ok_or_else(|| {
            Error::Spec(format!(
                "could not place object {} of {} without overlap in {PLACEMENT_ATTEMPTS} attempts",
                k + 1,
                spec.n_objects
            ))
        })?);
    }
    let area: usize = placed.iter().map(|r| r.width * r.height).sum();
    if area as f64 > MAX_CHANGED_FRACTION * (w * h) as f64 {
        return Err(Error::Spec(format!(
            "planted objects cover {area} of {} pixels, more than a quarter",
            w * h
        )));
    }
    Ok(placed)
}

/// Shifts every band inside each planted object by `magnitude` band
/// standard deviations. The shift follows the latent field: each band
/// moves in the direction it responds to a higher latent value, scaled by
/// -1 where the region is bright, so the object looks like a different
/// land cover (darker where bright, brighter where dark). Object geometry
/// depends only on the raster size and `seed`.
pub fn plant_changes(raster: &Raster, base: &Field, spec: &ChangeSpec, seed: u64) -> Result<(Raster, Raster)> {
    let (w, h) = (raster.width(), raster.height());
    if (base.size, base.size) != (w, h) {
        return Err(Error::Contract(format!(
            "latent field is {0}x{0}, raster is {w}x{h}",
            base.size
        )));
    }
    let objects = place_objects(w, h, spec, seed)?;
    let mut out = raster.to_f32();
    let bands = out.bands();
    let source = raster.to_f32();
    let n = (w * h) as f64;
    let base_mean = base.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (stds, responses): (Vec<f64>, Vec<f64>) = (0..bands)
        .map(|b| {
            let band = source.band_f32(b).expect("float raster");
            let mean = band.iter().map(|&x| x as f64).sum::<f64>() / n;
            let std = (band.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            let cov: f64 = band
                .iter()
                .zip(&base.data)
                .map(|(&x, &l)| (x as f64 - mean) * (l as f64 - base_mean))
                .sum();
            (std, if cov < 0.0 { -1.0 } else { 1.0 })
        })
        .unzip();
    let mut mask = vec![0u8; w * h];
    let data = out.as_f32_mut()?;
    for obj in &objects {
        let cells = || (obj.top..obj.top + obj.height).flat_map(|r| (obj.left..obj.left + obj.width).map(move |c| (r, c)));
        let region_mean = cells().map(|(r, c)| base.get(r, c) as f64).sum::<f64>() / (obj.width * obj.height) as f64;
        let sign = if region_mean > 0.5 { -1.0 } else { 1.0 };
        for (r, c) in cells() {
            mask[r * w + c] = 1;
            for (b, (std, response)) in stds.iter().zip(&responses).enumerate() {
                data[(b * h + r) * w + c] += (sign * response * spec.magnitude * std) as f32;
            }
        }
    }
    Ok((out, Raster::new_u8(w, h, 1, mask)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_dates: usize,
    pub size: usize,
    pub modalities: Vec<Modality>,
    pub change: ChangeSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_scenes: 4,
            n_dates: 8,
            size: 64,
            modalities: vec![Modality::PseudoOptical, Modality::PseudoSar],
            change: ChangeSpec::default(),
        }
    }
}

/// Acquisition date of the `i`-th image of a modality: one per month
/// from January 2020.
pub fn acquisition_date(modality: Modality, i: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, modality.acquisition_day())
        .expect("valid start date")
        .checked_add_months(Months::new(i as u32))
        .expect("date in range")
}

/// Builds the archive. Every scene gets `n_dates` acquisitions per
/// modality with only nuisance variation, except the last date, where
/// changes are planted (same objects for every modality) and which is held
/// out as the test split. The ground truth spans the last two dates of the
/// first listed modality.
pub fn generate_archive(cfg: &SynthConfig) -> Result<Archive> {
    if cfg.n_dates < 2 {
        return Err(Error::Parameter(format!("need at least 2 dates, got {}", cfg.n_dates)));
    }
    if cfg.n_scenes == 0 {
        return Err(Error::Parameter("need at least one scene".into()));
    }
    if cfg.modalities.is_empty() {
        return Err(Error::Parameter("need at least one modality".into()));
    }
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for s in 0..cfg.n_scenes {
        let scene_seed = mix(cfg.seed, s as u64 + 1);
        let base = generate_base(scene_seed, cfg.size)?;
        let change_seed = mix(scene_seed, 0xC0DE);
        let mut acquisitions = Vec::new();
        let mut truth_mask = None;
        for &m in &cfg.modalities {
            for d in 0..cfg.n_dates {
                let date_seed = mix(mix(scene_seed, m.code()), d as u64 + 1);
                let mut raster = modality_transform(&base, m, date_seed);
                let last = d + 1 == cfg.n_dates;
                if last {
                    let (changed, mask) = plant_changes(&raster, &base, &cfg.change, change_seed)?;
                    raster = changed;
                    truth_mask.get_or_insert(mask);
                }
                acquisitions.push(Acquisition {
                    date: acquisition_date(m, d),
                    modality: m.name().to_string(),
                    raster,
                    split: if last { Split::Test } else { Split::Train },
                });
            }
        }
        acquisitions.sort_by(|a, b| (&a.modality, a.date).cmp(&(&b.modality, b.date)));
        let first = cfg.modalities[0];
        scenes.push(SceneSeries {
            scene_id: format!("{s:03}"),
            acquisitions,
            ground_truth: vec![GroundTruth {
                before: acquisition_date(first, cfg.n_dates - 2),
                after: acquisition_date(first, cfg.n_dates - 1),
                mask: truth_mask.expect("at least one modality"),
            }],
        });
    }
    Ok(Archive { scenes })
}
