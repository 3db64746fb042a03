//! Result tables and comparison plots across training-set regimes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::plot::{line_plot, PlotSpec, Series};

/// One evaluated (model, tuning strategy, regime) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub strategy: String,
    /// Number of school sites in the training regime.
    pub regime_size: u32,
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50_95: f64,
}

impl ResultRow {
    pub fn from_report(
        model: impl Into<String>,
        strategy: impl Into<String>,
        regime_size: u32,
        report: &EvalReport,
    ) -> Self {
        ResultRow {
            model: model.into(),
            strategy: strategy.into(),
            regime_size,
            map50: report.map50,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            map50_95: report.map50_95,
        }
    }
}

const CSV_HEADER: [&str; 8] = [
    "model",
    "strategy",
    "regime",
    "mAP50",
    "Prec",
    "Rec",
    "F1",
    "mAP50:95",
];

/// Writes the comparison table; metric cells carry three decimals.
pub fn write_report_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Decode(format!("open {}: {e}", path.display())))?;
    w.write_record(CSV_HEADER)
        .map_err(|e| Error::Decode(format!("write header: {e}")))?;
    for r in rows {
        w.write_record([
            r.model.as_str(),
            r.strategy.as_str(),
            &r.regime_size.to_string(),
            &format!("{:.3}", r.map50),
            &format!("{:.3}", r.precision),
            &format!("{:.3}", r.recall),
            &format!("{:.3}", r.f1),
            &format!("{:.3}", r.map50_95),
        ])
        .map_err(|e| Error::Decode(format!("write row: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table produced by `write_report_csv`.
pub fn read_report_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Decode(format!("open {}: {e}", path.display())))?;
    {
        let headers = rdr
            .headers()
            .map_err(|e| Error::Decode(format!("read header: {e}")))?;
        if headers.len() != CSV_HEADER.len() {
            return Err(Error::Decode(format!(
                "report table has {} columns, expected {}",
                headers.len(),
                CSV_HEADER.len()
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Decode(format!("row {}: {e}", i + 2)))?;
        let field = |j: usize| -> Result<&str> {
            record
                .get(j)
                .ok_or_else(|| Error::Decode(format!("row {}: missing column {j}", i + 2)))
        };
        let num = |j: usize| -> Result<f64> {
            field(j)?
                .parse()
                .map_err(|e| Error::Decode(format!("row {}: column {j}: {e}", i + 2)))
        };
        rows.push(ResultRow {
            model: field(0)?.to_string(),
            strategy: field(1)?.to_string(),
            regime_size: field(2)?
                .parse()
                .map_err(|e| Error::Decode(format!("row {}: regime: {e}", i + 2)))?,
            map50: num(3)?,
            precision: num(4)?,
            recall: num(5)?,
            f1: num(6)?,
            map50_95: num(7)?,
        });
    }
    Ok(rows)
}

/// The metric columns a regime plot can show.
const METRICS: [(&str, fn(&ResultRow) -> f64); 5] = [
    ("map50", |r| r.map50),
    ("precision", |r| r.precision),
    ("recall", |r| r.recall),
    ("f1", |r| r.f1),
    ("map50_95", |r| r.map50_95),
];

/// Writes one metric-versus-regime line plot per metric, with one series
/// per (model, strategy) pair. Returns the created file paths.
pub fn write_regime_plots(dir: &Path, rows: &[ResultRow]) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no result rows to plot".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (metric_name, getter) in METRICS {
        let mut grouped: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rows {
            let key = format!("{} {}", r.model, r.strategy);
            grouped
                .entry(key)
                .or_default()
                .push((f64::from(r.regime_size), getter(r)));
        }
        let series: Vec<Series> = grouped
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { name, points }
            })
            .collect();
        let spec = PlotSpec::new(
            format!("{} VS TRAINING SITES", metric_name.to_uppercase()),
            "SCHOOL SITES IN TRAINING SET",
            metric_name.to_uppercase(),
        );
        let path = dir.join(format!("{metric_name}_vs_regime.png"));
        line_plot(&path, &spec, &series)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<ResultRow> {
        vec![
            ResultRow {
                model: "mock".into(),
                strategy: "tuned".into(),
                regime_size: 50,
                map50: 0.4215,
                precision: 0.613,
                recall: 0.528,
                f1: 0.5674,
                map50_95: 0.201,
            },
            ResultRow {
                model: "mock".into(),
                strategy: "tuned".into(),
                regime_size: 443,
                map50: 0.662,
                precision: 0.731,
                recall: 0.655,
                f1: 0.691,
                map50_95: 0.34,
            },
            ResultRow {
                model: "mock".into(),
                strategy: "default".into(),
                regime_size: 50,
                map50: 0.31,
                precision: 0.52,
                recall: 0.4,
                f1: 0.452,
                map50_95: 0.15,
            },
        ]
    }

    #[test]
    fn csv_roundtrip_matches_to_three_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        let rows = sample_rows();
        write_report_csv(&path, &rows).unwrap();
        let back = read_report_csv(&path).unwrap();
        assert_eq!(back.len(), rows.len());
        for (orig, read) in rows.iter().zip(&back) {
            assert_eq!(orig.model, read.model);
            assert_eq!(orig.strategy, read.strategy);
            assert_eq!(orig.regime_size, read.regime_size);
            for (a, b) in [
                (orig.map50, read.map50),
                (orig.precision, read.precision),
                (orig.recall, read.recall),
                (orig.f1, read.f1),
                (orig.map50_95, read.map50_95),
            ] {
                assert!((a - b).abs() <= 0.0005 + 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn csv_header_names_the_metric_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        write_report_csv(&path, &sample_rows()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, "model,strategy,regime,mAP50,Prec,Rec,F1,mAP50:95");
        assert!(text.lines().nth(1).unwrap().contains("0.421"));
    }

    #[test]
    fn regime_plots_cover_all_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_regime_plots(dir.path(), &sample_rows()).unwrap();
        assert_eq!(paths.len(), 5);
        for p in &paths {
            assert!(p.exists(), "{} missing", p.display());
            image::open(p).unwrap();
        }
        assert!(paths.iter().any(|p| p.ends_with("f1_vs_regime.png")));
    }

    #[test]
    fn empty_rows_cannot_be_plotted() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_regime_plots(dir.path(), &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn malformed_table_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "model,strategy\nmock,tuned\n").unwrap();
        let err = read_report_csv(&path).unwrap_err();
        assert!(matches!(err, Error::Decode(_)));
    }
}
