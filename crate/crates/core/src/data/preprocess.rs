use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::volume::VolumeSeries;
use crate::error::{Error, Result};

/// Contiguous, ordered, disjoint acquisition ranges covering `0..T`, one per
/// breath hold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreathHoldGrouping {
    ranges: Vec<Range<usize>>,
}

impl BreathHoldGrouping {
    pub fn new(ranges: Vec<Range<usize>>, num_acquisitions: usize) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::invalid("breath-hold grouping is empty"));
        }
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(Error::invalid(format!(
                    "breath-hold ranges must be non-empty and contiguous from 0; got {ranges:?}"
                )));
            }
            next = r.end;
        }
        if next != num_acquisitions {
            return Err(Error::invalid(format!(
                "breath-hold ranges cover 0..{next}, series has {num_acquisitions} acquisitions"
            )));
        }
        Ok(BreathHoldGrouping { ranges })
    }

    /// Groups consecutive acquisitions by the given per-hold counts.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            ranges.push(start..start + s);
            start += s;
        }
        Self::new(ranges, start)
    }

    pub fn identity(num_acquisitions: usize) -> Result<Self> {
        Self::from_sizes(&vec![1; num_acquisitions])
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn num_acquisitions(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

/// Voxelwise mean over the acquisitions of each breath hold.
pub fn average_breath_holds(series: &VolumeSeries, grouping: &BreathHoldGrouping) -> Result<VolumeSeries> {
    let t = series.num_phases();
    if grouping.num_acquisitions() != t {
        return Err(Error::invalid(format!(
            "grouping covers {} acquisitions, series has {t}",
            grouping.num_acquisitions()
        )));
    }
    let [_, z, y, x] = series.dims();
    let n = z * y * x;
    let mut out = Vec::with_capacity(grouping.len() * n);
    let mut acc = vec![0.0f64; n];
    for r in grouping.ranges() {
        acc.fill(0.0);
        for phase in r.clone() {
            for (a, &v) in acc.iter_mut().zip(series.phase(phase)) {
                *a += v as f64;
            }
        }
        let count = r.len() as f64;
        out.extend(acc.iter().map(|&a| (a / count) as f32));
    }
    VolumeSeries::new([grouping.len(), z, y, x], series.spacing_mm(), out)
}

/// Linearly interpolated percentile (`p` in 0..=100) between order statistics.
pub fn percentile(values: &[f32], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, upper) = v.select_nth_unstable_by(lo, f32::total_cmp);
    let lo_val = lo_val as f64;
    if frac == 0.0 || upper.is_empty() {
        return Ok(lo_val);
    }
    let hi_val = upper.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    Ok(lo_val + frac * (hi_val - lo_val))
}

/// Percentile window for intensity clipping before standardization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub lower_percentile: f64,
    pub upper_percentile: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        NormalizationParams {
            lower_percentile: 0.0,
            upper_percentile: 99.8,
        }
    }
}

/// What [`normalize`] measured on a series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedNormalization {
    pub params: NormalizationParams,
    pub clip_low: f64,
    pub clip_high: f64,
    pub mean: f64,
    pub std: f64,
}

impl FittedNormalization {
    pub fn apply(&self, v: f32) -> f32 {
        let c = (v as f64).clamp(self.clip_low, self.clip_high);
        ((c - self.mean) / self.std) as f32
    }
}

/// Clips the pooled 4D intensities to the percentile window, then rescales to
/// zero mean and unit (population) variance.
pub fn normalize(series: &VolumeSeries, params: &NormalizationParams) -> Result<(VolumeSeries, FittedNormalization)> {
    let (lo, hi) = (params.lower_percentile, params.upper_percentile);
    if !(0.0 <= lo && lo < hi && hi <= 100.0) {
        return Err(Error::invalid(format!(
            "normalization percentiles must satisfy 0 <= lower < upper <= 100, got {lo}, {hi}"
        )));
    }
    let data = series.data();
    let clip_low = percentile(data, lo)?;
    let clip_high = percentile(data, hi)?;
    let n = data.len() as f64;
    let clipped = || data.iter().map(|&v| (v as f64).clamp(clip_low, clip_high));
    let mean = clipped().sum::<f64>() / n;
    let var = clipped().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate(
            "cannot normalize a constant volume (std = 0)".into(),
        ));
    }
    let fitted = FittedNormalization {
        params: *params,
        clip_low,
        clip_high,
        mean,
        std,
    };
    let out = data.iter().map(|&v| fitted.apply(v)).collect();
    Ok((VolumeSeries::new(series.dims(), series.spacing_mm(), out)?, fitted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize, data: Vec<f32>) -> VolumeSeries {
        let n = data.len() / t;
        VolumeSeries::new([t, 1, 1, n], [1.543, 1.543, 2.0], data).unwrap()
    }

    fn mean_std(v: &[f32]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let s = (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, s)
    }

    /// Sort-based reference for the interpolated percentile.
    fn reference_percentile(values: &[f32], p: f64) -> f64 {
        let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        v.sort_by(f64::total_cmp);
        let pos = p / 100.0 * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }

    #[test]
    fn protocol_grouping_of_sixteen_acquisitions() {
        let g = BreathHoldGrouping::from_sizes(&[1, 5, 2, 3, 3, 2]).unwrap();
        let s = series(16, (0..16 * 4).map(|v| v as f32).collect());
        let avg = average_breath_holds(&s, &g).unwrap();
        assert_eq!(avg.num_phases(), 6);
        assert_eq!(avg.phase(0), s.phase(0));
        // acquisitions 1..6 of voxel 0 hold 4, 8, 12, 16, 20
        assert_eq!(avg.phase(1)[0], 12.0);
    }

    #[test]
    fn averaging_two_constant_volumes() {
        let s = series(2, vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0]);
        let avg = average_breath_holds(&s, &BreathHoldGrouping::from_sizes(&[2]).unwrap()).unwrap();
        assert_eq!(avg.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn invalid_groupings() {
        assert!(BreathHoldGrouping::new(vec![0..2, 3..4], 4).is_err());
        assert!(BreathHoldGrouping::new(vec![0..2, 2..2, 2..4], 4).is_err());
        assert!(BreathHoldGrouping::new(vec![0..2, 2..4], 5).is_err());
        let g = BreathHoldGrouping::from_sizes(&[2, 2]).unwrap();
        assert!(average_breath_holds(&series(3, vec![0.0; 3]), &g).is_err());
    }

    #[test]
    fn averaging_commutes_with_affine_maps() {
        let raw: Vec<f32> = (0..6 * 5).map(|i| ((i * 31 % 11) as f32) * 0.7).collect();
        let s = series(6, raw.clone());
        let g = BreathHoldGrouping::from_sizes(&[1, 2, 3]).unwrap();
        let (a, b) = (2.5f32, -4.0f32);
        let mapped = series(6, raw.iter().map(|&v| a * v + b).collect());
        let lhs = average_breath_holds(&mapped, &g).unwrap();
        let rhs = average_breath_holds(&s, &g).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - (a * r + b)).abs() < 1e-5);
        }
    }

    #[test]
    fn percentile_matches_sorted_reference() {
        let vals: Vec<f32> = (0..997).map(|i| ((i * 7919) % 1009) as f32 * 0.5).collect();
        for p in [0.0, 12.5, 50.0, 99.8, 100.0] {
            assert_eq!(percentile(&vals, p).unwrap(), reference_percentile(&vals, p));
        }
    }

    #[test]
    fn outlier_is_clipped_to_the_percentile() {
        let mut data: Vec<f32> = (0..10).map(|v| v as f32).collect();
        data.push(1000.0);
        let s = series(1, data.clone());
        let (out, fit) = normalize(&s, &NormalizationParams::default()).unwrap();
        let p = reference_percentile(&data, 99.8);
        assert_eq!(fit.clip_high, p);
        assert_eq!(fit.clip_low, 0.0);
        let (m, sd) = mean_std(out.data());
        assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "{m} {sd}");
        let max = out.data().iter().copied().fold(f32::MIN, f32::max);
        assert_eq!(max, ((p - fit.mean) / fit.std) as f32);
    }

    #[test]
    fn normalizing_twice_is_stable_when_clipping_is_inactive() {
        let data: Vec<f32> = (0..1000).map(|i| (i % 10) as f32 * 3.0 + 2.0).collect();
        let s = series(2, data);
        let (once, _) = normalize(&s, &NormalizationParams::default()).unwrap();
        let (twice, fit) = normalize(&once, &NormalizationParams::default()).unwrap();
        assert!(fit.mean.abs() < 1e-6 && (fit.std - 1.0).abs() < 1e-6);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let s = series(1, vec![4.0; 8]);
        assert!(matches!(
            normalize(&s, &NormalizationParams::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
