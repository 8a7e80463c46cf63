//! Raw little-endian volume files with a JSON sidecar.
//!
//! `name.mvf` holds the voxels, `name.mvf.json` the header:
//! `{"dims": [...], "spacing_mm": [x, y, z], "dtype": "f32" | "u8",
//!   "axis_order": "t,z,y,x" | "z,y,x", "byte_order": "little"}`.
//! Layout is row-major with X fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::volume::{BinaryMask3D, ProbabilityMap, VolumeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    dims: Vec<usize>,
    spacing_mm: [f64; 3],
    dtype: String,
    axis_order: String,
    #[serde(default = "little")]
    byte_order: String,
}

fn little() -> String {
    "little".to_string()
}

/// A volume of either kind read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Series(VolumeSeries),
    Mask(BinaryMask3D),
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_pair(path: &Path, sidecar: &Sidecar, bytes: &[u8]) -> Result<()> {
    let header = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, header + "\n").map_err(|e| Error::io(&side, e))
}

fn read_pair(path: &Path) -> Result<(Sidecar, Vec<u8>)> {
    let side = sidecar_path(path);
    let header = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&header).map_err(|e| Error::format(&side, e.to_string()))?;
    if sidecar.byte_order != "little" {
        return Err(Error::format(
            &side,
            format!("unsupported byte order `{}`", sidecar.byte_order),
        ));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let elem = match sidecar.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => {
            return Err(Error::format(&side, format!("unknown dtype `{other}`")));
        }
    };
    let expected_axes = match sidecar.dims.len() {
        4 => "t,z,y,x",
        3 => "z,y,x",
        n => return Err(Error::format(&side, format!("expected 3 or 4 dims, got {n}"))),
    };
    if sidecar.axis_order != expected_axes {
        return Err(Error::format(
            &side,
            format!(
                "axis order `{}` does not match {} dims",
                sidecar.axis_order,
                sidecar.dims.len()
            ),
        ));
    }
    let expected = sidecar.dims.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for dims {:?} ({}), found {}",
                sidecar.dims,
                sidecar.dtype,
                bytes.len()
            ),
        ));
    }
    Ok((sidecar, bytes))
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_from(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_series(series: &VolumeSeries, path: impl AsRef<Path>) -> Result<()> {
    let sidecar = Sidecar {
        dims: series.dims().to_vec(),
        spacing_mm: series.spacing_mm(),
        dtype: "f32".into(),
        axis_order: "t,z,y,x".into(),
        byte_order: little(),
    };
    write_pair(path.as_ref(), &sidecar, &f32_bytes(series.data()))
}

pub fn write_mask(mask: &BinaryMask3D, path: impl AsRef<Path>) -> Result<()> {
    let sidecar = Sidecar {
        dims: mask.dims().to_vec(),
        spacing_mm: mask.spacing_mm(),
        dtype: "u8".into(),
        axis_order: "z,y,x".into(),
        byte_order: little(),
    };
    write_pair(path.as_ref(), &sidecar, mask.data())
}

pub fn write_probability(map: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let sidecar = Sidecar {
        dims: map.dims().to_vec(),
        spacing_mm: map.spacing_mm(),
        dtype: "f32".into(),
        axis_order: "z,y,x".into(),
        byte_order: little(),
    };
    write_pair(path.as_ref(), &sidecar, &f32_bytes(map.data()))
}

/// Reads a float volume (series, or a 3D volume as a one-phase series) or a
/// `u8` mask, depending on the sidecar dtype.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (sidecar, bytes) = read_pair(path)?;
    let d = &sidecar.dims;
    match sidecar.dtype.as_str() {
        "f32" => {
            let dims = if d.len() == 4 {
                [d[0], d[1], d[2], d[3]]
            } else {
                [1, d[0], d[1], d[2]]
            };
            VolumeSeries::new(dims, sidecar.spacing_mm, f32_from(&bytes))
                .map(Volume::Series)
                .map_err(|e| Error::format(path, e.to_string()))
        }
        _ => {
            if d.len() != 3 {
                return Err(Error::format(path, "masks must be 3-dimensional"));
            }
            BinaryMask3D::new([d[0], d[1], d[2]], sidecar.spacing_mm, bytes)
                .map(Volume::Mask)
                .map_err(|e| Error::format(path, e.to_string()))
        }
    }
}

pub fn read_series(path: impl AsRef<Path>) -> Result<VolumeSeries> {
    let path = path.as_ref();
    match read_volume(path)? {
        Volume::Series(s) => Ok(s),
        Volume::Mask(_) => Err(Error::format(path, "expected an f32 series, found a u8 mask")),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask3D> {
    let path = path.as_ref();
    match read_volume(path)? {
        Volume::Mask(m) => Ok(m),
        Volume::Series(_) => Err(Error::format(path, "expected a u8 mask, found an f32 volume")),
    }
}

pub fn read_probability(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let series = read_series(path)?;
    if series.num_phases() != 1 {
        return Err(Error::format(path, "expected a 3D probability volume"));
    }
    ProbabilityMap::new(series.spatial_dims(), series.spacing_mm(), series.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn series_round_trip_is_bit_exact(
            t in 1usize..4, z in 1usize..4, y in 1usize..5, x in 1usize..5,
            seed in any::<u32>(),
        ) {
            let n = t * z * y * x;
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u64 * 2654435761 + i as u64 * 40503) as u32 & 0x7f7f_ffff))
                .collect();
            let s = VolumeSeries::new([t, z, y, x], [1.543, 1.543, 2.0], data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.mvf");
            write_series(&s, &p).unwrap();
            let back = read_series(&p).unwrap();
            prop_assert_eq!(back.dims(), s.dims());
            prop_assert_eq!(back.spacing_mm(), s.spacing_mm());
            let same = back.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn mask_round_trip() {
        let m = BinaryMask3D::new([2, 2, 3], [1.0, 1.5, 2.0], vec![0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mvf");
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        assert!(matches!(read_volume(&p).unwrap(), Volume::Mask(_)));
        assert!(read_series(&p).is_err());
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let s = VolumeSeries::new([1, 1, 2, 2], [1.0; 3], vec![1.0; 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvf");
        write_series(&s, &p).unwrap();
        fs::write(&p, [0u8; 10]).unwrap();
        let msg = read_series(&p).unwrap_err().to_string();
        assert!(msg.contains("expected 16 bytes") && msg.contains("found 10"), "{msg}");
    }

    #[test]
    fn mask_with_value_two_is_rejected() {
        let m = BinaryMask3D::new([1, 1, 2], [1.0; 3], vec![0, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mvf");
        write_mask(&m, &p).unwrap();
        fs::write(&p, [0u8, 2u8]).unwrap();
        assert!(read_mask(&p).is_err());
    }

    #[test]
    fn missing_sidecar_and_unknown_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvf");
        fs::write(&p, [0u8; 4]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Io { .. })));
        fs::write(
            sidecar_path(&p),
            r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"dtype":"i16","axis_order":"z,y,x"}"#,
        )
        .unwrap();
        let msg = read_volume(&p).unwrap_err().to_string();
        assert!(msg.contains("unknown dtype"), "{msg}");
    }
}
