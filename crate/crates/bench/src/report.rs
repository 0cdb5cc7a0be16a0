//! Per-sample rows, aggregated result tables and histograms, with their
//! CSV forms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::store::write_atomic;

/// One adapted benchmark sample. Wall time is deliberately absent so the
/// file is byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: u64,
    pub clean_id: u64,
    pub family: String,
    pub severity: u8,
    pub label: usize,
    pub method: String,
    pub prediction: usize,
    pub correct: bool,
    pub entropy_original: f64,
    pub entropy_adapted: f64,
    pub entropy_chosen: f64,
    pub filtered: bool,
    pub kept_adapted: bool,
    pub steps: usize,
    pub final_step_loss: Option<f64>,
    pub failure: Option<String>,
}

/// Family name of the aggregate row.
pub const ALL_FAMILIES: &str = "all";

/// One `(method, family, severity)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub family: String,
    pub severity: u8,
    pub samples: usize,
    pub skipped: bool,
    pub accuracy: Option<f64>,
    pub entropy_before: Option<f64>,
    pub entropy_after: Option<f64>,
    pub keep_rate: Option<f64>,
    /// Filled by timing runs only.
    pub wall_seconds: Option<f64>,
}

impl ResultRow {
    pub fn skipped(method: &str, family: &str, severity: u8) -> Self {
        Self {
            method: method.to_string(),
            family: family.to_string(),
            severity,
            samples: 0,
            skipped: true,
            accuracy: None,
            entropy_before: None,
            entropy_after: None,
            keep_rate: None,
            wall_seconds: None,
        }
    }

    fn from_rows(method: &str, family: &str, severity: u8, rows: &[&SampleRow]) -> Self {
        if rows.is_empty() {
            return Self::skipped(method, family, severity);
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&SampleRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            family: family.to_string(),
            severity,
            samples: rows.len(),
            skipped: false,
            accuracy: Some(mean(&|r| r.correct as u8 as f64)),
            entropy_before: Some(mean(&|r| r.entropy_original)),
            entropy_after: Some(mean(&|r| r.entropy_chosen)),
            keep_rate: Some(mean(&|r| r.kept_adapted as u8 as f64)),
            wall_seconds: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.accuracy, self.entropy_before, self.entropy_after, self.keep_rate, self.wall_seconds]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// One row per `(family, severity)` present in `rows`, then the
    /// aggregate row, all for `method`. `expected` lists cells that must
    /// appear even when no sample landed in them.
    pub fn summarize(method: &str, rows: &[SampleRow], expected: &[(String, u8)]) -> Self {
        let mut cells: BTreeMap<(String, u8), Vec<&SampleRow>> = BTreeMap::new();
        for key in expected {
            cells.entry(key.clone()).or_default();
        }
        for r in rows {
            cells.entry((r.family.clone(), r.severity)).or_default().push(r);
        }
        let mut out: Vec<ResultRow> = cells
            .iter()
            .map(|((f, s), rs)| ResultRow::from_rows(method, f, *s, rs))
            .collect();
        let all: Vec<&SampleRow> = rows.iter().collect();
        out.push(ResultRow::from_rows(method, ALL_FAMILIES, 0, &all));
        Self { rows: out }
    }

    pub fn aggregate(&self, method: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.family == ALL_FAMILIES)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.rows)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        Ok(Self { rows: from_csv(bytes)? })
    }
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().expect("in-memory writer"))
}

pub fn from_csv<R: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<R>> {
    let mut rd = csv::Reader::from_reader(bytes);
    Ok(rd.deserialize().collect::<std::result::Result<Vec<R>, _>>()?)
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into
/// the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
        counts[b] += 1;
    }
    counts
}

/// Lower median; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(family: &str, correct: bool, h: f64) -> SampleRow {
        SampleRow {
            sample_id: 0,
            clean_id: 0,
            family: family.into(),
            severity: 3,
            label: 1,
            method: "gda".into(),
            prediction: if correct { 1 } else { 0 },
            correct,
            entropy_original: h,
            entropy_adapted: h / 2.0,
            entropy_chosen: h / 2.0,
            filtered: true,
            kept_adapted: true,
            steps: 10,
            final_step_loss: Some(-0.25),
            failure: None,
        }
    }

    #[test]
    fn summary_cells_and_aggregate() {
        let rows = vec![row("contrast", true, 1.0), row("contrast", false, 0.5), row("elastic", true, 0.1)];
        let expected = vec![("pixelate".to_string(), 3)];
        let t = ResultTable::summarize("gda", &rows, &expected);
        assert_eq!(t.rows.len(), 4);
        let pix = t.rows.iter().find(|r| r.family == "pixelate").unwrap();
        assert!(pix.skipped && pix.accuracy.is_none());
        let agg = t.aggregate("gda").unwrap();
        assert_eq!(agg.samples, 3);
        assert!((agg.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let c = t.rows.iter().find(|r| r.family == "contrast").unwrap();
        assert_eq!(c.accuracy, Some(0.5));
    }

    #[test]
    fn sample_rows_round_trip() {
        let mut r = row("box_blur", false, 0.3);
        r.failure = Some("step 50->45: non-finite".into());
        r.final_step_loss = None;
        let bytes = to_csv(&[r.clone()]).unwrap();
        assert_eq!(from_csv::<SampleRow>(&bytes).unwrap(), vec![r]);
    }

    #[test]
    fn histogram_conserves_counts() {
        let v = [0.0, 0.1, 1.3862, 2.0, -1.0, 0.5];
        let h = histogram(&v, 0.0, 4f64.ln(), 10);
        assert_eq!(h.iter().sum::<usize>(), v.len());
        assert_eq!(h[0], 3);
        assert_eq!(h[9], 2);
    }

    #[test]
    fn median_is_lower_middle() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.0));
        assert_eq!(median(&[]), None);
    }

    fn opt() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some)]
    }

    proptest! {
        #[test]
        fn result_table_round_trips(
            cells in proptest::collection::vec(
                ("[a-z_]{1,12}", 0u8..6, 0usize..1000, any::<bool>(), opt(), opt(), opt(), opt(), opt()),
                0..8,
            )
        ) {
            let rows = cells
                .into_iter()
                .map(|(family, severity, samples, skipped, a, b, c, d, e)| ResultRow {
                    method: "dda".into(),
                    family,
                    severity,
                    samples,
                    skipped,
                    accuracy: a,
                    entropy_before: b,
                    entropy_after: c,
                    keep_rate: d,
                    wall_seconds: e,
                })
                .collect();
            let t = ResultTable { rows };
            let bytes = t.to_csv().unwrap();
            prop_assert_eq!(ResultTable::from_csv(&bytes).unwrap(), t);
        }
    }
}
