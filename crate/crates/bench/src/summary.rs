//! Aggregation of measurement records into per-point tables.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;
use truffle_core::StorageKind;
use truffle_sim::{MeasurementRecord, Mode};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// One grid point: everything but the mode and repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub workload: String,
    pub storage_kind: StorageKind,
    pub size_mb: f64,
    pub added_delay_ms: f64,
}

impl Point {
    pub fn of(r: &MeasurementRecord) -> Self {
        Self {
            workload: r.workload.clone(),
            storage_kind: r.storage_kind,
            size_mb: r.size_mb,
            added_delay_ms: r.added_delay_ms,
        }
    }

    fn contains(&self, r: &MeasurementRecord) -> bool {
        r.workload == self.workload
            && r.storage_kind == self.storage_kind
            && r.size_mb == self.size_mb
            && r.added_delay_ms == self.added_delay_ms
    }

    fn cmp(&self, other: &Self) -> Ordering {
        self.workload
            .cmp(&other.workload)
            .then(self.storage_kind.cmp(&other.storage_kind))
            .then(self.size_mb.total_cmp(&other.size_mb))
            .then(self.added_delay_ms.total_cmp(&other.added_delay_ms))
    }
}

/// A row of the summary table. Means cover successful repetitions only;
/// `improvement_pct` and `io_ratio` are empty when the point lacks a
/// successful run in either mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub workload: String,
    pub storage_kind: StorageKind,
    pub size_mb: f64,
    pub added_delay_ms: f64,
    pub mode: Mode,
    pub mean_ms: Option<f64>,
    pub stddev_ms: Option<f64>,
    pub improvement_pct: Option<f64>,
    pub io_ratio: Option<f64>,
}

impl SummaryRow {
    pub fn comparable(&self) -> bool {
        self.improvement_pct.is_some()
    }
}

/// Rounds to `decimals` places so the CSV and JSON files carry the same
/// values.
fn round(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

/// 100 × (1 − truffle/baseline).
pub fn improvement_pct(baseline_ms: f64, truffle_ms: f64) -> f64 {
    100.0 * (1.0 - truffle_ms / baseline_ms)
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_stddev(values: &[f64]) -> Option<(f64, f64)> {
    match values.len() {
        0 => None,
        1 => Some((values[0], 0.0)),
        _ => Some((values.mean(), values.std_dev())),
    }
}

struct ModeStats {
    e2e: Option<(f64, f64)>,
    io: Option<f64>,
}

fn stats(records: &[&MeasurementRecord]) -> ModeStats {
    let ok: Vec<_> = records.iter().filter(|r| !r.failed()).collect();
    let e2e: Vec<f64> = ok.iter().map(|r| r.end_to_end_ms).collect();
    let io: Vec<f64> = ok.iter().map(|r| r.io_critical_path_ms).collect();
    ModeStats {
        e2e: mean_stddev(&e2e),
        io: mean_stddev(&io).map(|(m, _)| m),
    }
}

/// Distinct grid points in `records`, in canonical order.
pub fn points(records: &[MeasurementRecord]) -> Vec<Point> {
    let mut points: Vec<Point> = Vec::new();
    for r in records {
        if !points.iter().any(|p| p.contains(r)) {
            points.push(Point::of(r));
        }
    }
    points.sort_by(Point::cmp);
    points
}

/// One row per point and mode present, in canonical order. Depends only on
/// the set of records, not their order.
pub fn summarize(records: &[MeasurementRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for p in points(records) {
        let by_mode = |mode: Mode| -> Vec<&MeasurementRecord> {
            records.iter().filter(|r| r.mode == mode && p.contains(r)).collect()
        };
        let per_mode: Vec<(Mode, Vec<&MeasurementRecord>)> = Mode::ALL
            .into_iter()
            .map(|m| (m, by_mode(m)))
            .filter(|(_, rs)| !rs.is_empty())
            .collect();
        let base = stats(&by_mode(Mode::Baseline));
        let truffle = stats(&by_mode(Mode::Truffle));
        let (improvement, io_ratio) = match (base.e2e, truffle.e2e) {
            (Some((b, _)), Some((t, _))) if b > 0.0 => {
                let io = match (base.io, truffle.io) {
                    (Some(bi), Some(ti)) if bi > 0.0 => Some(ti / bi),
                    _ => None,
                };
                (Some(improvement_pct(b, t)), io)
            }
            _ => (None, None),
        };
        for (mode, rs) in per_mode {
            let s = stats(&rs);
            rows.push(SummaryRow {
                workload: p.workload.clone(),
                storage_kind: p.storage_kind,
                size_mb: p.size_mb,
                added_delay_ms: p.added_delay_ms,
                mode,
                mean_ms: s.e2e.map(|(m, _)| round(m, 3)),
                stddev_ms: s.e2e.map(|(_, sd)| round(sd, 3)),
                improvement_pct: improvement.map(|v| round(v, 3)),
                io_ratio: io_ratio.map(|v| round(v, 5)),
            });
        }
    }
    rows
}

/// Looks up the row for a point and mode.
pub fn row(rows: &[SummaryRow], size_mb: f64, added_delay_ms: f64, mode: Mode) -> Option<&SummaryRow> {
    rows.iter()
        .find(|r| r.size_mb == size_mb && r.added_delay_ms == added_delay_ms && r.mode == mode)
}

pub fn write_csv(path: &Path, rows: &[SummaryRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn read_csv(path: &Path) -> std::io::Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(std::io::Error::other)
}

pub fn write_json(path: &Path, rows: &[SummaryRow]) -> std::io::Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, rows)?;
    f.write_all(b"\n")
}

pub fn read_records(path: &Path) -> std::io::Result<Vec<MeasurementRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Writes `summary.csv` and `summary.json` into `dir`.
pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> std::io::Result<()> {
    write_csv(&dir.join(SUMMARY_CSV), rows)?;
    write_json(&dir.join(SUMMARY_JSON), rows)
}

/// Fixed-width table for the terminal, with truffle/baseline as a
/// normalized percentage.
pub fn render(rows: &[SummaryRow]) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_owned(), |v| format!("{v:.prec$}"));
    let mut out = format!(
        "{:<8} {:<12} {:>9} {:>10} {:<8} {:>10} {:>9} {:>8} {:>10} {:>8}\n",
        "workload", "storage", "size_mb", "delay_ms", "mode", "mean_ms", "stddev", "improv%", "normalized", "io_ratio"
    );
    for r in rows {
        let normalized = r.improvement_pct.map(|i| 100.0 - i);
        out.push_str(&format!(
            "{:<8} {:<12} {:>9} {:>10} {:<8} {:>10} {:>9} {:>8} {:>10} {:>8}\n",
            r.workload,
            r.storage_kind.as_str(),
            r.size_mb,
            r.added_delay_ms,
            r.mode.as_str(),
            opt(r.mean_ms, 1),
            opt(r.stddev_ms, 1),
            opt(r.improvement_pct, 1),
            opt(normalized, 1),
            opt(r.io_ratio, 3),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use truffle_sim::record::{Failure, FailurePhase};

    fn record(mode: Mode, size_mb: f64, e2e: f64, io: f64) -> MeasurementRecord {
        MeasurementRecord {
            trace_id: String::new(),
            workload: "chain".into(),
            storage_kind: StorageKind::Direct,
            size_mb,
            added_delay_ms: 0.0,
            mode,
            repetition: 0,
            status: 200,
            end_to_end_ms: e2e,
            io_critical_path_ms: io,
            failure: None,
            functions: vec![],
            transfers: vec![],
            events: vec![],
            response: None,
        }
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement_pct(4353.0, 2697.0) - 38.0).abs() < 0.05);
        assert!((improvement_pct(3701.0, 2697.0) - 27.1).abs() < 0.05);
        assert_eq!(improvement_pct(1000.0, 1000.0), 0.0);
    }

    #[test]
    fn single_repetition_has_zero_stddev() {
        assert_eq!(mean_stddev(&[5.0]), Some((5.0, 0.0)));
        assert_eq!(mean_stddev(&[]), None);
        let (m, sd) = mean_stddev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m, 5.0);
        // Sample, not population, deviation.
        assert!((sd - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rows_per_point_and_mode() {
        let records = vec![
            record(Mode::Baseline, 128.0, 4353.0, 1300.0),
            record(Mode::Truffle, 128.0, 2697.0, 65.0),
            record(Mode::Baseline, 1.0, 100.0, 10.0),
            record(Mode::Truffle, 1.0, 100.0, 10.0),
        ];
        let rows = summarize(&records);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].size_mb, 1.0);
        assert_eq!(rows[0].improvement_pct, Some(0.0));
        let t = row(&rows, 128.0, 0.0, Mode::Truffle).unwrap();
        assert!((t.improvement_pct.unwrap() - 38.0).abs() < 0.05);
        assert_eq!(t.io_ratio, Some(0.05));
        assert_eq!(t.improvement_pct, Some(38.043));
        assert_eq!(t.stddev_ms, Some(0.0));
    }

    #[test]
    fn missing_mode_is_incomparable() {
        let mut failed = record(Mode::Truffle, 1.0, 0.0, 0.0);
        failed.failure = Some(Failure {
            phase: FailurePhase::Input,
            function: None,
            message: "x".into(),
        });
        let rows = summarize(&[record(Mode::Baseline, 1.0, 100.0, 10.0), failed]);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| !r.comparable()));
        assert_eq!(row(&rows, 1.0, 0.0, Mode::Truffle).unwrap().mean_ms, None);

        let rows = summarize(&[record(Mode::Baseline, 1.0, 100.0, 10.0)]);
        assert_eq!(rows.len(), 1);
        assert!(!rows[0].comparable());
    }

    #[test]
    fn csv_columns_are_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let rows = summarize(&[record(Mode::Baseline, 1.0, 100.0, 10.0)]);
        write_summary(dir.path(), &rows).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SUMMARY_CSV)).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "workload,storage_kind,size_mb,added_delay_ms,mode,mean_ms,stddev_ms,improvement_pct,io_ratio"
        );
        assert_eq!(read_csv(&dir.path().join(SUMMARY_CSV)).unwrap(), rows);
        let json: Vec<SummaryRow> =
            serde_json::from_slice(&std::fs::read(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
        assert_eq!(json, rows);
    }
}
