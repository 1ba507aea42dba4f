//! Turning a fused change map into a binary mask.
//!
//! Two candidate thresholds are computed: the negated minimum of the
//! standardized map, and Rosin's unimodal threshold (the histogram bin
//! farthest from the line joining the histogram peak to its last nonzero
//! bin). [`select_threshold`] keeps the first when the two are close
//! relative to their mean and the second otherwise.

use std::fmt;
use std::str::FromStr;

use crate::change_map::{IntensityMap, MapState};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const DEFAULT_BINS: usize = 256;
pub const MIN_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMethod {
    OppositeMin,
    Rosin,
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMethod::OppositeMin => "opposite_min",
            ThresholdMethod::Rosin => "rosin",
        })
    }
}

impl FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opposite_min" | "min" => Ok(ThresholdMethod::OppositeMin),
            "rosin" => Ok(ThresholdMethod::Rosin),
            other => Err(Error::Config(format!("unknown threshold method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdDecision {
    pub t_min: f64,
    pub t_rosin: f64,
    pub chosen: f64,
    pub method: ThresholdMethod,
}

fn check_thresholdable(m: &IntensityMap) -> Result<()> {
    if m.state == MapState::Raw {
        return Err(Error::State("thresholding expects a standardized or fused map".into()));
    }
    if m.values.is_empty() {
        return Err(Error::Contract("empty map".into()));
    }
    Ok(())
}

/// `-min(values)`.
pub fn opposite_min_threshold(m: &IntensityMap) -> Result<f64> {
    check_thresholdable(m)?;
    let min = m.values.iter().copied().fold(f32::INFINITY, f32::min);
    Ok(-(min as f64))
}

/// Equal-width histogram over `[min, max]` of the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f32], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Parameter("histogram needs at least one bin".into()));
        }
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
        if values.is_empty() || !(max > min) {
            return Err(Error::Degenerate("histogram of a constant or empty map".into()));
        }
        let mut counts = vec![0u64; bins];
        let scale = bins as f64 / (max - min);
        for &v in values {
            let i = (((v as f64 - min) * scale).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Histogram { min, max, counts })
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.bin_width()
    }
}

/// Index of the bin with the largest perpendicular distance to the line
/// from the (first) peak bin to the last nonzero bin, searched strictly
/// between the two; the first such bin wins ties.
///
/// Normalizing either axis scales every distance to the fixed line by the
/// same factor, so the search uses raw bin indices and counts. All
/// products stay below 2^53 for counts under 2^40, making the comparison
/// exact.
pub fn rosin_bin(counts: &[u64]) -> Result<usize> {
    let peak_count = counts.iter().copied().max().unwrap_or(0);
    if peak_count == 0 {
        return Err(Error::Degenerate("empty histogram".into()));
    }
    let peak = counts.iter().position(|&c| c == peak_count).unwrap();
    let end = counts.iter().rposition(|&c| c > 0).unwrap();
    if end < peak + 2 {
        return Err(Error::Degenerate(
            "no bins between the histogram peak and its tail".into(),
        ));
    }
    let (x0, y0) = (peak as f64, peak_count as f64);
    let (x1, y1) = (end as f64, counts[end] as f64);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let mut best = (peak + 1, -1.0f64);
    for (i, &c) in counts.iter().enumerate().take(end).skip(peak + 1) {
        let cross = (dx * (y0 - c as f64) - (x0 - i as f64) * dy).abs();
        if cross > best.1 {
            best = (i, cross);
        }
    }
    Ok(best.0)
}

/// Rosin's threshold: the center of the bin returned by [`rosin_bin`].
pub fn rosin_threshold(m: &IntensityMap, bins: usize) -> Result<f64> {
    check_thresholdable(m)?;
    if bins < MIN_BINS {
        return Err(Error::Parameter(format!("at least {MIN_BINS} bins required, got {bins}")));
    }
    let hist = Histogram::build(&m.values, bins)?;
    Ok(hist.bin_center(rosin_bin(&hist.counts)?))
}

/// Keeps `t_min` when the two candidates differ by less than half their
/// mean, `t_rosin` otherwise (including whenever the mean is not
/// positive).
pub fn select_threshold(t_min: f64, t_rosin: f64) -> ThresholdDecision {
    let avg = (t_min + t_rosin) / 2.0;
    let use_min = avg > 0.0 && (t_min - t_rosin).abs() < 0.5 * avg;
    ThresholdDecision {
        t_min,
        t_rosin,
        chosen: if use_min { t_min } else { t_rosin },
        method: if use_min {
            ThresholdMethod::OppositeMin
        } else {
            ThresholdMethod::Rosin
        },
    }
}

/// Both candidates and the selection rule. A map whose histogram has no
/// usable Rosin corner falls back to the opposite-minimum threshold.
pub fn decide_threshold(m: &IntensityMap, bins: usize) -> Result<ThresholdDecision> {
    let t_min = opposite_min_threshold(m)?;
    match rosin_threshold(m, bins) {
        Ok(t_rosin) => Ok(select_threshold(t_min, t_rosin)),
        Err(Error::Degenerate(_)) => Ok(ThresholdDecision {
            t_min,
            t_rosin: f64::NAN,
            chosen: t_min,
            method: ThresholdMethod::OppositeMin,
        }),
        Err(e) => Err(e),
    }
}

/// 1 where the value exceeds `t`, else 0.
pub fn binarize(m: &IntensityMap, t: f64) -> Raster {
    let mask = m.values.iter().map(|&v| (v as f64 > t) as u8).collect();
    Raster::new_u8(m.width, m.height, 1, mask).expect("map dimensions are consistent")
}
