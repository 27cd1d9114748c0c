//! On-disk dataset layout written by `generate`.
//!
//! A dataset directory holds `manifest.json` plus one raster file per study
//! under `rasters/`. Raster files are little-endian binary:
//!
//! ```text
//! magic     4 bytes  b"FSRG"
//! version   u32      1
//! rows      u32
//! cols      u32
//! channels  u32
//! spacing   f64 * 3  x, y, slice thickness in mm
//! values    f64 * channels * rows * cols   channel after channel, row-major
//! ```
//!
//! Study rasters carry three channels: DWI, ADC and the 0/1 lesion mask.
//! Prediction rasters carry a single channel; voxels above 0.5 count as
//! lesion.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::metrics::{LesionCategory, Spacing};
use crate::synth::{CenterDataset, CenterProfile, PhantomStudy};

const RASTER_MAGIC: &[u8; 4] = b"FSRG";
const RASTER_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 3 * 8;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RASTER_DIR: &str = "rasters";

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub spacing: Spacing,
    pub channels: Vec<Grid<f64>>,
}

impl Raster {
    pub fn dims(&self) -> (usize, usize) {
        self.channels.first().map_or((0, 0), Grid::dims)
    }

    /// Channel `index` thresholded at 0.5.
    pub fn mask(&self, index: usize) -> Option<Mask> {
        self.channels.get(index).map(|g| g.map(|&v| v > 0.5))
    }
}

pub fn encode_raster(raster: &Raster) -> Vec<u8> {
    let (rows, cols) = raster.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + raster.channels.len() * rows * cols * 8);
    buf.extend_from_slice(RASTER_MAGIC);
    for v in [
        RASTER_VERSION,
        rows as u32,
        cols as u32,
        raster.channels.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [raster.spacing.x, raster.spacing.y, raster.spacing.slice] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for ch in &raster.channels {
        for v in ch.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<Raster> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated raster header"));
    }
    if &bytes[..4] != RASTER_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != RASTER_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let (rows, cols, n_ch) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let spacing = Spacing::new(f64_at(20), f64_at(28), f64_at(36));
    if !spacing.is_valid() {
        return Err(Error::format(path, "spacing must be positive"));
    }
    let plane = rows * cols;
    let expected = HEADER_LEN + n_ch * plane * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let channels = (0..n_ch)
        .map(|c| {
            let start = HEADER_LEN + c * plane * 8;
            let data = bytes[start..start + plane * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Grid::from_vec(rows, cols, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Raster { spacing, channels })
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, encode_raster(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

pub fn study_raster(study: &PhantomStudy) -> Raster {
    Raster {
        spacing: study.spacing,
        channels: vec![
            study.dwi.clone(),
            study.adc.clone(),
            study.gt_mask.map(|&m| if m { 1.0 } else { 0.0 }),
        ],
    }
}

pub fn mask_raster(mask: &Mask, spacing: Spacing) -> Raster {
    Raster {
        spacing,
        channels: vec![mask.map(|&m| if m { 1.0 } else { 0.0 })],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub patient_id: String,
    pub center_id: u32,
    pub split: Split,
    pub category: LesionCategory,
    /// Path relative to the dataset directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterEntry {
    pub profile: CenterProfile,
    pub digest: String,
    pub studies: Vec<StudyEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub centers: Vec<CenterEntry>,
}

impl Manifest {
    pub fn studies(&self) -> impl Iterator<Item = &StudyEntry> {
        self.centers.iter().flat_map(|c| c.studies.iter())
    }
}

pub fn raster_file_name(patient_id: &str) -> String {
    format!("{RASTER_DIR}/{patient_id}.raster")
}

pub fn write_dataset(dir: &Path, datasets: &[CenterDataset]) -> Result<Manifest> {
    let raster_dir = dir.join(RASTER_DIR);
    fs::create_dir_all(&raster_dir).map_err(|e| Error::io(&raster_dir, e))?;
    let mut centers = Vec::with_capacity(datasets.len());
    for d in datasets {
        let mut studies = Vec::new();
        for (split, list) in [(Split::Train, &d.train), (Split::Test, &d.test)] {
            for s in list {
                let file = raster_file_name(&s.patient_id);
                write_raster(&dir.join(&file), &study_raster(s))?;
                studies.push(StudyEntry {
                    patient_id: s.patient_id.clone(),
                    center_id: s.center_id,
                    split,
                    category: s.category,
                    file,
                });
            }
        }
        centers.push(CenterEntry {
            profile: d.profile.clone(),
            digest: d.digest(),
            studies,
        });
    }
    let manifest = Manifest {
        format: "fedstroke-dataset".into(),
        version: 1,
        centers,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_study(dir: &Path, entry: &StudyEntry) -> Result<PhantomStudy> {
    let path: PathBuf = dir.join(&entry.file);
    let raster = read_raster(&path)?;
    if raster.channels.len() != 3 {
        return Err(Error::format(&path, "study rasters need 3 channels"));
    }
    let gt_mask = raster.mask(2).expect("three channels");
    let mut channels = raster.channels.into_iter();
    Ok(PhantomStudy {
        dwi: channels.next().unwrap(),
        adc: channels.next().unwrap(),
        gt_mask,
        spacing: raster.spacing,
        patient_id: entry.patient_id.clone(),
        center_id: entry.center_id,
        category: entry.category,
    })
}

/// Loads every center back from a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Vec<CenterDataset>> {
    let manifest = read_manifest(dir)?;
    manifest
        .centers
        .iter()
        .map(|c| {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for entry in &c.studies {
                let study = read_study(dir, entry)?;
                match entry.split {
                    Split::Train => train.push(study),
                    Split::Test => test.push(study),
                }
            }
            Ok(CenterDataset {
                profile: c.profile.clone(),
                train,
                test,
            })
        })
        .collect()
}
