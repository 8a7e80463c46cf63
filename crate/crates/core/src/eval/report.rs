use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Median and quartiles (type-7: linear interpolation of order statistics).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty sample"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("summary input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let v = sorted_finite(values)?;
    Ok(Summary {
        median: type7(&v, 0.5),
        q1: type7(&v, 0.25),
        q3: type7(&v, 0.75),
    })
}

/// Box-plot geometry: whiskers reach the most extreme data within 1.5·IQR of
/// the box; anything beyond is an outlier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub summary: Summary,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    let summary = summarize(values)?;
    let v = sorted_finite(values)?;
    let lo_fence = summary.q1 - 1.5 * summary.iqr();
    let hi_fence = summary.q3 + 1.5 * summary.iqr();
    let inside: Vec<f64> = v.iter().copied().filter(|x| (lo_fence..=hi_fence).contains(x)).collect();
    Ok(BoxStats {
        summary,
        whisker_low: inside.first().copied().unwrap_or(summary.q1),
        whisker_high: inside.last().copied().unwrap_or(summary.q3),
        outliers: v.into_iter().filter(|x| !(lo_fence..=hi_fence).contains(x)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub case: String,
    pub dsc: f64,
    pub hd95_mm: f64,
}

/// Per-case segmentation metrics; serialized as CSV `case,dsc,hd95_mm`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricsRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.case.as_str()) {
                return Err(Error::invalid(format!("duplicate case `{}` in metrics report", r.case)));
            }
            if !(r.dsc.is_finite() && (0.0..=1.0).contains(&r.dsc)) {
                return Err(Error::invalid(format!("case `{}`: dsc {} outside [0, 1]", r.case, r.dsc)));
            }
            if !(r.hd95_mm.is_finite() && r.hd95_mm >= 0.0) {
                return Err(Error::invalid(format!("case `{}`: invalid hd95 {}", r.case, r.hd95_mm)));
            }
        }
        Ok(MetricsReport { rows })
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn get(&self, case: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.case == case)
    }

    pub fn dsc_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.dsc).collect()
    }

    pub fn hd95_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.hd95_mm).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["case", "dsc", "hd95_mm"]).expect("in-memory write");
        }
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::invalid(format!("metrics csv: {e}")))?;
        if headers != vec!["case", "dsc", "hd95_mm"] {
            return Err(Error::invalid(format!(
                "metrics csv header must be `case,dsc,hd95_mm`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(|e| Error::invalid(format!("metrics csv: {e}")))?;
        Self::new(rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Values of the two reports for the cases they share, in `a`'s order.
/// Errors if the case sets differ.
pub fn pair_by_case(a: &MetricsReport, b: &MetricsReport, metric: impl Fn(&MetricsRow) -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in a.rows() {
        let other = b
            .get(&r.case)
            .ok_or_else(|| Error::invalid(format!("case `{}` is missing from the second report", r.case)))?;
        xs.push(metric(r));
        ys.push(metric(other));
    }
    if let Some(extra) = b.rows().iter().find(|r| a.get(&r.case).is_none()) {
        return Err(Error::invalid(format!("case `{}` is missing from the first report", extra.case)));
    }
    Ok((xs, ys))
}
