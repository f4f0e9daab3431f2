//! Metric report tables: one row per (variant, seed) plus per-variant means.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SdcError};

pub const REPORT_HEADER: &str = "algorithm,averaging_layer,attention_mechanism,seed,accuracy,ft,nnz,dist,ent";

/// Marker written in place of metric values for runs that did not finish.
pub const FAILED: &str = "failed";

/// Accuracy and FT are percentages, the sparsity columns raw means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowMetrics {
    pub accuracy: f64,
    pub ft: f64,
    pub nnz: f64,
    pub dist: f64,
    pub ent: f64,
}

impl RowMetrics {
    fn as_array(&self) -> [f64; 5] {
        [self.accuracy, self.ft, self.nnz, self.dist, self.ent]
    }

    fn from_array(v: [f64; 5]) -> Self {
        RowMetrics {
            accuracy: v[0],
            ft: v[1],
            nnz: v[2],
            dist: v[3],
            ent: v[4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedCell {
    Seed(u64),
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub algorithm: String,
    pub averaging_layer: usize,
    pub attention_mechanism: String,
    pub seed: SeedCell,
    /// `None` marks a failed run (or a mean with no finished runs).
    pub metrics: Option<RowMetrics>,
}

impl ReportRow {
    pub fn is_mean(&self) -> bool {
        self.seed == SeedCell::Mean
    }

    fn same_variant(&self, other: &ReportRow) -> bool {
        self.algorithm == other.algorithm
            && self.averaging_layer == other.averaging_layer
            && self.attention_mechanism == other.attention_mechanism
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// Seed rows followed by one mean row per variant, variants in order of
    /// first appearance. Means average the finished seed rows only.
    pub fn from_seed_rows(seed_rows: Vec<ReportRow>) -> Self {
        let mut variants: Vec<&ReportRow> = Vec::new();
        for row in &seed_rows {
            if !variants.iter().any(|v| v.same_variant(row)) {
                variants.push(row);
            }
        }
        let means: Vec<ReportRow> = variants
            .iter()
            .map(|v| {
                let done: Vec<RowMetrics> = seed_rows
                    .iter()
                    .filter(|r| r.same_variant(v))
                    .filter_map(|r| r.metrics)
                    .collect();
                ReportRow {
                    algorithm: v.algorithm.clone(),
                    averaging_layer: v.averaging_layer,
                    attention_mechanism: v.attention_mechanism.clone(),
                    seed: SeedCell::Mean,
                    metrics: mean_metrics(&done),
                }
            })
            .collect();
        let mut rows = seed_rows;
        rows.extend(means);
        Report { rows }
    }

    pub fn seed_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| !r.is_mean())
    }

    pub fn mean_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.is_mean())
    }

    pub fn mean_of(&self, algorithm: &str) -> Option<&ReportRow> {
        self.mean_rows().find(|r| r.algorithm == algorithm)
    }

    pub fn failed_runs(&self) -> usize {
        self.seed_rows().filter(|r| r.metrics.is_none()).count()
    }

    /// Largest deviation between a stored mean row and the mean recomputed
    /// from its seed rows.
    pub fn mean_discrepancy(&self) -> f64 {
        let recomputed = Report::from_seed_rows(self.seed_rows().cloned().collect());
        let mut worst = 0.0f64;
        for stored in self.mean_rows() {
            let fresh = recomputed.mean_rows().find(|r| r.same_variant(stored));
            match (stored.metrics, fresh.and_then(|f| f.metrics)) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.as_array().iter().zip(b.as_array()) {
                        worst = worst.max((x - y).abs());
                    }
                }
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let seed = match r.seed {
                SeedCell::Seed(s) => s.to_string(),
                SeedCell::Mean => "mean".to_string(),
            };
            let _ = write!(out, "{},{},{},{seed}", r.algorithm, r.averaging_layer, r.attention_mechanism);
            match r.metrics {
                Some(m) => m.as_array().iter().for_each(|v| {
                    let _ = write!(out, ",{v}");
                }),
                None => (0..5).for_each(|_| {
                    let _ = write!(out, ",{FAILED}");
                }),
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == REPORT_HEADER => {}
            other => {
                return Err(SdcError::Schema(format!(
                    "report header {other:?} does not match {REPORT_HEADER:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| SdcError::Schema(format!("report row {}: {what} in {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 9 {
                return Err(bad("expected 9 columns"));
            }
            let seed = match f[3] {
                "mean" => SeedCell::Mean,
                s => SeedCell::Seed(s.parse().map_err(|_| bad("bad seed"))?),
            };
            let metrics = if f[4..].iter().all(|v| *v == FAILED) {
                None
            } else {
                let mut v = [0.0; 5];
                for (slot, text) in v.iter_mut().zip(&f[4..]) {
                    *slot = text.parse().map_err(|_| bad("bad metric value"))?;
                }
                Some(RowMetrics::from_array(v))
            };
            rows.push(ReportRow {
                algorithm: f[0].to_string(),
                averaging_layer: f[1].parse().map_err(|_| bad("bad averaging layer"))?,
                attention_mechanism: f[2].to_string(),
                seed,
                metrics,
            });
        }
        Ok(Report { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SdcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SdcError::io(path, e))?;
        Report::from_csv(&text)
    }

    /// Fixed-width text table of the mean rows.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>5} {:<18} {:>8} {:>8} {:>7} {:>7} {:>7}\n",
            "algorithm", "layer", "mechanism", "accuracy", "FT", "NNZ", "Dist", "Ent"
        );
        for r in self.mean_rows() {
            let _ = write!(out, "{:<10} {:>5} {:<18}", r.algorithm, r.averaging_layer, r.attention_mechanism);
            match r.metrics {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        " {:>8.2} {:>8.2} {:>7.3} {:>7.3} {:>7.3}",
                        m.accuracy, m.ft, m.nnz, m.dist, m.ent
                    );
                }
                None => {
                    let _ = writeln!(out, " {FAILED:>8}");
                }
            }
        }
        out
    }
}

fn mean_metrics(rows: &[RowMetrics]) -> Option<RowMetrics> {
    if rows.is_empty() {
        return None;
    }
    let mut sum = [0.0; 5];
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r.as_array()) {
            *s += v;
        }
    }
    Some(RowMetrics::from_array(sum.map(|s| s / rows.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(alg: &str, seed: u64, m: Option<[f64; 5]>) -> ReportRow {
        ReportRow {
            algorithm: alg.into(),
            averaging_layer: 0,
            attention_mechanism: "softmax".into(),
            seed: SeedCell::Seed(seed),
            metrics: m.map(RowMetrics::from_array),
        }
    }

    #[test]
    fn header_is_exact() {
        let csv = Report::default().to_csv();
        assert_eq!(csv, "algorithm,averaging_layer,attention_mechanism,seed,accuracy,ft,nnz,dist,ent\n");
    }

    #[test]
    fn means_skip_failed_runs() {
        let report = Report::from_seed_rows(vec![
            row("SM-0", 0, Some([90.0, 70.0, 2.0, 0.2, 0.5])),
            row("SM-0", 1, None),
            row("SM-0", 2, Some([100.0, 80.0, 3.0, 0.4, 0.7])),
            row("HA-0", 0, None),
        ]);
        assert_eq!(report.rows.len(), 6);
        let mean = report.mean_of("SM-0").unwrap().metrics.unwrap();
        assert_eq!(mean.as_array(), [95.0, 75.0, 2.5, 0.30000000000000004, 0.6]);
        assert!(report.mean_of("HA-0").unwrap().metrics.is_none());
        assert_eq!(report.failed_runs(), 2);
        assert_eq!(report.mean_discrepancy(), 0.0);
        let back = Report::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn rejects_wrong_header_and_rows() {
        assert!(Report::from_csv("algo,seed\n").is_err());
        let bad = format!("{REPORT_HEADER}\nSM-0,0,softmax,x,1,2,3,4,5\n");
        assert!(matches!(Report::from_csv(&bad), Err(SdcError::Schema(_))));
    }

    proptest! {
        #[test]
        fn round_trip_and_means(values in prop::collection::vec(prop::array::uniform5(0.0f64..100.0), 1..8)) {
            let rows = values.iter().enumerate().map(|(i, v)| row(if i % 2 == 0 { "SM-0" } else { "ER-2" }, i as u64, Some(*v))).collect();
            let report = Report::from_seed_rows(rows);
            prop_assert_eq!(Report::from_csv(&report.to_csv()).unwrap(), report.clone());
            prop_assert!(report.mean_discrepancy() <= 1e-9);
        }
    }
}
