use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::io::{read_mask, read_series};
use crate::data::volume::{BinaryMask3D, VolumeSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SERIES_SUFFIX: &str = ".series.mvf";
pub const MASK_SUFFIX: &str = ".mask.mvf";

/// One subject: a (phase-averaged) series and its liver mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub series: VolumeSeries,
    pub mask: BinaryMask3D,
}

impl Case {
    pub fn new(id: impl Into<String>, series: VolumeSeries, mask: BinaryMask3D) -> Result<Self> {
        if series.spatial_dims() != mask.dims() {
            return Err(Error::shape(format!(
                "series spatial dims {:?} differ from mask dims {:?}",
                series.spatial_dims(),
                mask.dims()
            )));
        }
        Ok(Case {
            id: id.into(),
            series,
            mask,
        })
    }
}

/// A 2D training sample: all phases of one axial slice and the mask slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub case_id: String,
    pub z: usize,
    /// `[1, P, H, W]`.
    pub phases: Tensor<f32>,
    /// `[1, 1, H, W]` with values in {0, 1}.
    pub mask: Tensor<f32>,
}

/// Cuts a case into axial slices, in Z order.
pub fn extract_slices(case_id: &str, series: &VolumeSeries, mask: &BinaryMask3D) -> Result<Vec<SliceSample>> {
    let [t, z, y, x] = series.dims();
    if [z, y, x] != mask.dims() {
        return Err(Error::shape(format!(
            "series spatial dims {:?} differ from mask dims {:?}",
            [z, y, x],
            mask.dims()
        )));
    }
    (0..z)
        .map(|zi| {
            let mut phases = Vec::with_capacity(t * y * x);
            for ti in 0..t {
                phases.extend_from_slice(series.slice(ti, zi));
            }
            Ok(SliceSample {
                case_id: case_id.to_string(),
                z: zi,
                phases: Tensor::new(vec![1, t, y, x], phases)?,
                mask: Tensor::new(
                    vec![1, 1, y, x],
                    mask.slice(zi).iter().map(|&v| v as f32).collect(),
                )?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded random partition of case ids into train/validation/test.
pub fn split_dataset(ids: &[String], seed: u64, counts: SplitCounts) -> Result<DatasetSplit> {
    let total = counts.train + counts.val + counts.test;
    if total != ids.len() {
        return Err(Error::invalid(format!(
            "split counts {}+{}+{} = {total} do not match {} cases",
            counts.train,
            counts.val,
            counts.test,
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(counts.train + counts.val);
    let val = shuffled.split_off(counts.train);
    Ok(DatasetSplit {
        train: shuffled,
        val,
        test,
    })
}

pub fn series_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{SERIES_SUFFIX}"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{MASK_SUFFIX}"))
}

/// Case ids of every `<id>.series.mvf` in `dir`, sorted.
pub fn list_case_ids(dir: &Path) -> Result<Vec<String>> {
    list_with_suffix(dir, SERIES_SUFFIX)
}

/// Ids of every `<id>.mask.mvf` in `dir`, sorted.
pub fn list_mask_ids(dir: &Path) -> Result<Vec<String>> {
    list_with_suffix(dir, MASK_SUFFIX)
}

fn list_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            if let Some(id) = name.strip_suffix(suffix) {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every series/mask pair in `dir`, sorted by case id.
pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    let ids = list_case_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "no *{SERIES_SUFFIX} files in {}",
            dir.display()
        )));
    }
    ids.into_iter()
        .map(|id| {
            let series = read_series(series_path(dir, &id))?;
            let mask = read_mask(mask_path(dir, &id))?;
            Case::new(id, series, mask)
        })
        .collect()
}
