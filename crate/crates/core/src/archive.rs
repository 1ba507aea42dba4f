//! Multi-date, multi-modality image archives and their on-disk layout.
//!
//! ```text
//! <root>/manifest.tsv                  scene, modality, date, path, split
//! <root>/scene_<id>/<modality>_<date>.rsrb
//! <root>/scene_<id>/gt_<d1>_<d2>.rsrb  change mask between d1 and d2
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::raster::{read_raster, write_raster, Raster};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub date: NaiveDate,
    pub modality: String,
    pub raster: Raster,
    pub split: Split,
}

/// Reference change mask between two dates of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub before: NaiveDate,
    pub after: NaiveDate,
    pub mask: Raster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSeries {
    pub scene_id: String,
    /// Sorted by (modality, date).
    pub acquisitions: Vec<Acquisition>,
    pub ground_truth: Vec<GroundTruth>,
}

impl SceneSeries {
    pub fn of_modality<'a>(&'a self, modality: &'a str) -> impl Iterator<Item = &'a Acquisition> + 'a {
        self.acquisitions.iter().filter(move |a| a.modality == modality)
    }

    /// Acquisition of `modality` in the calendar month of `date`.
    pub fn in_month(&self, modality: &str, date: NaiveDate) -> Option<&Acquisition> {
        self.acquisitions
            .iter()
            .filter(|a| a.modality == modality)
            .find(|a| a.date.year() == date.year() && a.date.month() == date.month())
    }

    fn dims(&self) -> Option<(usize, usize)> {
        self.acquisitions
            .first()
            .map(|a| (a.raster.width(), a.raster.height()))
    }
}

/// An evaluation pair: the acquisitions a change map is computed from and
/// the reference mask.
#[derive(Debug, Clone, Copy)]
pub struct TestPair<'a> {
    pub scene: &'a SceneSeries,
    pub first: &'a Acquisition,
    pub second: &'a Acquisition,
    pub truth: &'a GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub scenes: Vec<SceneSeries>,
}

pub fn format_date(d: NaiveDate) -> String {
    d.format(DATE_FORMAT).to_string()
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, DATE_FORMAT).map_err(|e| Error::Format(format!("bad date {s:?}: {e}")))
}

impl Archive {
    /// Checks shared scene dimensions, fixed per-modality band counts and
    /// binary ground truth.
    pub fn validate(&self) -> Result<()> {
        let mut bands: BTreeMap<&str, usize> = BTreeMap::new();
        for scene in &self.scenes {
            let Some((w, h)) = scene.dims() else {
                return Err(Error::Data(format!("scene {} has no acquisitions", scene.scene_id)));
            };
            for a in &scene.acquisitions {
                if (a.raster.width(), a.raster.height()) != (w, h) {
                    return Err(Error::Data(format!(
                        "scene {}: {} {} is {}x{}, scene is {w}x{h}",
                        scene.scene_id,
                        a.modality,
                        format_date(a.date),
                        a.raster.width(),
                        a.raster.height()
                    )));
                }
                let expected = *bands.entry(&a.modality).or_insert(a.raster.bands());
                if expected != a.raster.bands() {
                    return Err(Error::Data(format!(
                        "scene {}: {} has {} bands, elsewhere {expected}",
                        scene.scene_id,
                        a.modality,
                        a.raster.bands()
                    )));
                }
            }
            for gt in &scene.ground_truth {
                if (gt.mask.width(), gt.mask.height()) != (w, h) || !gt.mask.is_binary_mask() {
                    return Err(Error::Data(format!(
                        "scene {}: ground truth {}..{} is not a {w}x{h} binary mask",
                        scene.scene_id,
                        format_date(gt.before),
                        format_date(gt.after)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<String> {
        let mut m: Vec<String> = self
            .scenes
            .iter()
            .flat_map(|s| s.acquisitions.iter().map(|a| a.modality.clone()))
            .collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn bands_of(&self, modality: &str) -> Option<usize> {
        self.scenes
            .iter()
            .flat_map(|s| s.of_modality(modality))
            .map(|a| a.raster.bands())
            .next()
    }

    /// Held-out pairs: for every ground-truth mask, the `first` modality
    /// image in the month of its earlier date and the `second` modality
    /// image in the month of its later date.
    pub fn test_pairs(&self, first: &str, second: &str) -> Result<Vec<TestPair<'_>>> {
        let mut out = Vec::new();
        for scene in &self.scenes {
            for truth in &scene.ground_truth {
                let find = |m: &str, d: NaiveDate| {
                    scene.in_month(m, d).ok_or_else(|| {
                        Error::Data(format!(
                            "scene {}: no {m} acquisition in the month of {}",
                            scene.scene_id,
                            format_date(d)
                        ))
                    })
                };
                out.push(TestPair {
                    scene,
                    first: find(first, truth.before)?,
                    second: find(second, truth.after)?,
                    truth,
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        self.validate()?;
        let mut manifest = String::from("# scene\tmodality\tdate\tpath\tsplit\n");
        for scene in &self.scenes {
            let dir = PathBuf::from(format!("scene_{}", scene.scene_id));
            for a in &scene.acquisitions {
                let rel = dir.join(format!("{}_{}.rsrb", a.modality, format_date(a.date)));
                write_raster(&a.raster, root.join(&rel))?;
                manifest.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    scene.scene_id,
                    a.modality,
                    format_date(a.date),
                    rel.display(),
                    a.split
                ));
            }
            for gt in &scene.ground_truth {
                let name = format!("gt_{}_{}.rsrb", format_date(gt.before), format_date(gt.after));
                write_raster(&gt.mask, root.join(&dir).join(name))?;
            }
        }
        write_atomic(&root.join(MANIFEST_NAME), manifest.as_bytes())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let manifest_path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut scenes: BTreeMap<String, SceneSeries> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [scene_id, modality, date, path, split] = fields[..] else {
                return Err(Error::Format(format!(
                    "{} line {}: expected 5 tab-separated fields",
                    manifest_path.display(),
                    lineno + 1
                )));
            };
            let acq = Acquisition {
                date: parse_date(date)?,
                modality: modality.to_string(),
                raster: read_raster(root.join(path))?,
                split: split.parse()?,
            };
            scenes
                .entry(scene_id.to_string())
                .or_insert_with(|| SceneSeries {
                    scene_id: scene_id.to_string(),
                    acquisitions: Vec::new(),
                    ground_truth: Vec::new(),
                })
                .acquisitions
                .push(acq);
        }
        for scene in scenes.values_mut() {
            scene
                .acquisitions
                .sort_by(|a, b| (&a.modality, a.date).cmp(&(&b.modality, b.date)));
            let dir = root.join(format!("scene_{}", scene.scene_id));
            let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut names: Vec<String> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.starts_with("gt_") && n.ends_with(".rsrb"))
                .collect();
            names.sort();
            for name in names {
                let stem = &name["gt_".len()..name.len() - ".rsrb".len()];
                let (d1, d2) = stem
                    .split_once('_')
                    .ok_or_else(|| Error::Format(format!("bad ground-truth file name {name:?}")))?;
                scene.ground_truth.push(GroundTruth {
                    before: parse_date(d1)?,
                    after: parse_date(d2)?,
                    mask: read_raster(dir.join(&name))?,
                });
            }
        }
        let archive = Archive {
            scenes: scenes.into_values().collect(),
        };
        archive.validate()?;
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acq(date: &str, modality: &str, bands: usize, split: Split) -> Acquisition {
        Acquisition {
            date: parse_date(date).unwrap(),
            modality: modality.into(),
            raster: Raster::new_f32(4, 3, bands, vec![0.5; 12 * bands]).unwrap(),
            split,
        }
    }

    fn small() -> Archive {
        Archive {
            scenes: vec![SceneSeries {
                scene_id: "000".into(),
                acquisitions: vec![
                    acq("2020-01-05", "opt", 4, Split::Train),
                    acq("2020-02-05", "opt", 4, Split::Test),
                    acq("2020-01-17", "sar", 2, Split::Train),
                    acq("2020-02-17", "sar", 2, Split::Test),
                ],
                ground_truth: vec![GroundTruth {
                    before: parse_date("2020-01-05").unwrap(),
                    after: parse_date("2020-02-05").unwrap(),
                    mask: Raster::new_u8(4, 3, 1, vec![0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0]).unwrap(),
                }],
            }],
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = small();
        a.save(dir.path()).unwrap();
        assert!(dir.path().join("scene_000/opt_2020-02-05.rsrb").exists());
        assert!(dir.path().join("scene_000/gt_2020-01-05_2020-02-05.rsrb").exists());
        assert_eq!(Archive::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn test_pairs_match_by_month() {
        let a = small();
        let pairs = a.test_pairs("opt", "sar").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(format_date(pairs[0].first.date), "2020-01-05");
        assert_eq!(format_date(pairs[0].second.date), "2020-02-17");
        assert!(matches!(a.test_pairs("opt", "lidar"), Err(Error::Data(_))));
    }

    #[test]
    fn validation_catches_band_and_size_mismatch() {
        let mut a = small();
        a.scenes[0].acquisitions[1].raster = Raster::new_f32(4, 3, 3, vec![0.0; 36]).unwrap();
        assert!(matches!(a.validate(), Err(Error::Data(_))));
        let mut b = small();
        b.scenes[0].acquisitions[2].raster = Raster::new_f32(5, 3, 2, vec![0.0; 30]).unwrap();
        assert!(matches!(b.validate(), Err(Error::Data(_))));
    }
}
