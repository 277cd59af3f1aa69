//! Metrics (OP, BWT), the accuracy matrix, and serialized run reports.
//!
//! Accuracies are stored as fractions in [0, 1] and rendered as percent
//! only for display. Report files are JSON with a version field and a
//! CRC32 checksum over the embedded report payload; writes go through a
//! temp file and an atomic rename.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::OverlapStats;
use crate::model::ModelConfig;
use crate::tasks::StreamDescriptor;
use crate::trainer::TrainConfig;

/// Lower-triangular-null matrix of test accuracies: cell (i, j) holds the
/// accuracy on task i after training task j, defined only for j >= i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    k: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyInput("AccuracyMatrix"));
        }
        Ok(AccuracyMatrix {
            k,
            cells: vec![None; k * k],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.k || j >= self.k {
            return Err(Error::UndefinedCell { i, j });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidParameter {
                name: "accuracy",
                message: format!("{value} not in [0, 1]"),
            });
        }
        self.cells[i * self.k + j] = Some(value);
        Ok(())
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j).ok_or(Error::UndefinedCell { i, j })
    }
}

/// Mean accuracy over all tasks after training the last one.
pub fn overall_performance(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.k() - 1;
    let mut sum = 0.0;
    for i in 0..m.k() {
        sum += m.require(i, last)?;
    }
    Ok(sum / m.k() as f64)
}

/// Mean change between each earlier task's final accuracy and its
/// just-after-training accuracy; negative means forgetting. Needs K >= 2.
pub fn backward_transfer(m: &AccuracyMatrix) -> Result<f64> {
    if m.k() < 2 {
        return Err(Error::InvalidParameter {
            name: "K",
            message: "backward transfer needs at least two tasks".into(),
        });
    }
    let last = m.k() - 1;
    let mut sum = 0.0;
    for i in 0..last {
        sum += m.require(i, last)? - m.require(i, i)?;
    }
    Ok(sum / last as f64)
}

/// One sampled cycle of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleLog {
    pub cycle: u64,
    pub task: usize,
    pub inner_loss: f64,
    pub outer_loss: Option<f64>,
    pub outer_skipped: bool,
    pub overlap: Option<OverlapStats>,
    pub popcount_in: Option<usize>,
    pub popcount_out: Option<usize>,
}

/// Importance distributions captured at a configured cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSnapshot {
    pub cycle: u64,
    pub task: usize,
    pub inner: Vec<f64>,
    pub outer: Vec<f64>,
}

/// The exact inputs that produced a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub stream: StreamDescriptor,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub op: f64,
    pub bwt: f64,
    /// False when K = 1 or the method trains jointly; bwt is then 0 by
    /// convention rather than a measured transfer.
    pub bwt_defined: bool,
    pub update_counter: u64,
    pub cycles: Vec<CycleLog>,
    pub snapshots: Vec<ImportanceSnapshot>,
}

impl RunReport {
    /// Row label used when comparing runs: method, plus the fusion variant
    /// where the method fuses.
    pub fn method_label(&self) -> String {
        self.config.train.method_label()
    }

    /// Recompute OP/BWT from the matrix and check them against the stored
    /// values to 1e-12.
    pub fn validate_metrics(&self) -> Result<()> {
        let op = overall_performance(&self.matrix)?;
        let bwt = if self.bwt_defined {
            backward_transfer(&self.matrix)?
        } else {
            0.0
        };
        if (op - self.op).abs() > 1e-12 || (bwt - self.bwt).abs() > 1e-12 {
            return Err(Error::InvalidParameter {
                name: "report metrics",
                message: format!(
                    "stored (op={}, bwt={}) vs recomputed (op={op}, bwt={bwt})",
                    self.op, self.bwt
                ),
            });
        }
        Ok(())
    }
}

const REPORT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ReportEnvelope {
    version: u32,
    checksum: u32,
    report: serde_json::Value,
}

/// Serialize a report: JSON envelope with version and CRC32 of the payload,
/// written via temp-file-then-rename.
pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    let payload = serde_json::to_value(report)?;
    let payload_bytes = serde_json::to_vec(&payload)?;
    let envelope = ReportEnvelope {
        version: REPORT_VERSION,
        checksum: crc32fast::hash(&payload_bytes),
        report: payload,
    };
    let bytes = serde_json::to_vec_pretty(&envelope)?;
    atomic_write(path, &bytes)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let tmp = path.with_extension("tmp");
    {
        let mut f =
            std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes).map_err(|e| Error::io(&display, e))?;
        f.flush().map_err(|e| Error::io(&display, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(&display, e))
}

/// Read a report, verifying version and checksum.
pub fn read_report(path: &Path) -> Result<RunReport> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let envelope: ReportEnvelope =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: display.clone(),
            message: e.to_string(),
        })?;
    if envelope.version != REPORT_VERSION {
        return Err(Error::VersionMismatch {
            path: display,
            found: envelope.version,
            expected: REPORT_VERSION,
        });
    }
    let payload_bytes = serde_json::to_vec(&envelope.report)?;
    if crc32fast::hash(&payload_bytes) != envelope.checksum {
        return Err(Error::ChecksumMismatch { path: display });
    }
    Ok(serde_json::from_value(envelope.report)?)
}

/// Write the accuracy matrix as CSV: header `task,after_t0,...`, one row
/// per task, undefined cells empty. f64 formatting is shortest
/// round-trip, so rewriting an identical matrix is byte-identical.
pub fn write_matrix_csv<W: Write>(m: &AccuracyMatrix, mut w: W) -> Result<()> {
    let io = |e| Error::io("<writer>", e);
    let mut header = String::from("task");
    for j in 0..m.k() {
        let _ = write!(header, ",after_t{j}");
    }
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..m.k() {
        let mut line = format!("{i}");
        for j in 0..m.k() {
            match m.get(i, j) {
                Some(v) => {
                    let _ = write!(line, ",{v}");
                }
                None => line.push(','),
            }
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Read a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(text: &str) -> Result<AccuracyMatrix> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput("matrix csv"))?;
    let k = header.split(',').count() - 1;
    let mut m = AccuracyMatrix::new(k)?;
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return Err(Error::Parse {
                path: "<matrix csv>".into(),
                line: row + 2,
                message: format!("expected {} fields, found {}", k + 1, fields.len()),
            });
        }
        for (j, field) in fields[1..].iter().enumerate() {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: "<matrix csv>".into(),
                line: row + 2,
                message: format!("bad accuracy {field:?}"),
            })?;
            m.set(row, j, v)?;
        }
    }
    Ok(m)
}

/// Aggregated OP/BWT of one method across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub runs: usize,
    pub op_mean: f64,
    pub op_std: f64,
    pub bwt_mean: f64,
    pub bwt_std: f64,
}

/// Per-method comparison across seeds and orders, sorted by OP descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group reports by method label and aggregate. All reports must come from
/// the same stream family (order and seed may differ).
pub fn compare_runs(reports: &[&RunReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or(Error::EmptyInput("compare_runs"))?;
    let family = first.config.stream.family_key();
    for r in reports.iter().skip(1) {
        let other = r.config.stream.family_key();
        if other != family {
            return Err(Error::StreamMismatch {
                left: family,
                right: other,
            });
        }
    }
    let mut groups: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    for r in reports {
        let entry = groups.entry(r.method_label()).or_default();
        entry.0.push(r.op);
        entry.1.push(r.bwt);
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|(label, (ops, bwts))| {
            let (op_mean, op_std) = mean_std(&ops);
            let (bwt_mean, bwt_std) = mean_std(&bwts);
            ComparisonRow {
                label,
                runs: ops.len(),
                op_mean,
                op_std,
                bwt_mean,
                bwt_std,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.op_mean.partial_cmp(&a.op_mean).unwrap());
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    /// Aligned text table, accuracies as percent.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>14}  {:>14}",
            "method", "runs", "OP (%)", "BWT (%)"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>4}  {:>6.2} ± {:>5.2}  {:>6.2} ± {:>5.2}",
                r.label,
                r.runs,
                100.0 * r.op_mean,
                100.0 * r.op_std,
                100.0 * r.bwt_mean,
                100.0 * r.bwt_std
            );
        }
        out
    }

    /// CSV rows of `label,runs,op_mean,op_std,bwt_mean,bwt_std` (fractions).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<writer>", e);
        writeln!(w, "method,runs,op_mean,op_std,bwt_mean,bwt_std").map_err(io)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.label, r.runs, r.op_mean, r.op_std, r.bwt_mean, r.bwt_std
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::StreamKind;
    use crate::trainer::Method;

    fn matrix_3(diag: [f64; 3], last: [f64; 3]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(3).unwrap();
        for i in 0..3 {
            m.set(i, i, diag[i]).unwrap();
            m.set(i, 2, last[i]).unwrap();
        }
        m.set(0, 1, 0.8).unwrap();
        m
    }

    fn dummy_report(method: Method, op_target: f64, seed: u64) -> RunReport {
        let lo = (op_target - 0.05).max(0.0);
        let matrix = matrix_3([0.9, 0.85, op_target], [lo, op_target, op_target]);
        let op = overall_performance(&matrix).unwrap();
        let bwt = backward_transfer(&matrix).unwrap();
        RunReport {
            config: ConfigEcho {
                stream: StreamDescriptor {
                    kind: StreamKind::RotatedGaussian {
                        rotation_step_degrees: 60.0,
                    },
                    num_tasks: 3,
                    num_classes: 4,
                    input_dim: 8,
                    n_train: 100,
                    n_test: 50,
                    seed: 0,
                    order: vec![0, 1, 2],
                    order_id: "canonical".into(),
                },
                model: ModelConfig::default(),
                train: TrainConfig {
                    method,
                    ..TrainConfig::default()
                },
            },
            seed,
            matrix,
            op,
            bwt,
            bwt_defined: true,
            update_counter: 100,
            cycles: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    #[test]
    fn op_spec_examples() {
        let m = matrix_3([0.9, 0.85, 0.95], [0.7, 0.75, 0.95]);
        assert!((overall_performance(&m).unwrap() - 0.8).abs() < 1e-15);

        let mut one = AccuracyMatrix::new(1).unwrap();
        one.set(0, 0, 0.62).unwrap();
        assert!((overall_performance(&one).unwrap() - 0.62).abs() < 1e-15);

        let mut ones = AccuracyMatrix::new(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                ones.set(i, j, 1.0).unwrap();
            }
        }
        assert!((overall_performance(&ones).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bwt_spec_examples() {
        let m = matrix_3([0.9, 0.85, 0.95], [0.7, 0.75, 0.95]);
        assert!((backward_transfer(&m).unwrap() - (-0.15)).abs() < 1e-15);

        // Final column equal to the diagonal: no forgetting.
        let m = matrix_3([0.9, 0.85, 0.95], [0.9, 0.85, 0.95]);
        assert!(backward_transfer(&m).unwrap().abs() < 1e-15);

        // Final column above the diagonal: positive transfer.
        let m = matrix_3([0.7, 0.7, 0.9], [0.8, 0.75, 0.9]);
        assert!(backward_transfer(&m).unwrap() > 0.0);

        let one = AccuracyMatrix::new(1).unwrap();
        assert!(backward_transfer(&one).is_err());
    }

    #[test]
    fn op_requires_full_final_column() {
        let mut m = AccuracyMatrix::new(2).unwrap();
        m.set(0, 1, 0.5).unwrap();
        assert!(matches!(
            overall_performance(&m),
            Err(Error::UndefinedCell { i: 1, j: 1 })
        ));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = dummy_report(Method::Kif, 0.9, 3);
        let path = dir.path().join("run.report.json");
        write_report(&report, &path).unwrap();
        let loaded = read_report(&path).unwrap();
        assert_eq!(loaded, report);
        loaded.validate_metrics().unwrap();
    }

    #[test]
    fn truncated_report_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let report = dummy_report(Method::Kif, 0.9, 3);
        let path = dir.path().join("run.report.json");
        write_report(&report, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_report(&path).is_err());

        // Valid JSON, corrupted payload: checksum catches it.
        write_report(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"seed\": 3", "\"seed\": 4", 1);
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            read_report(&path),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn matrix_csv_round_trip_exact() {
        let m = matrix_3([0.9123456789012345, 0.85, 0.95], [0.7, 0.75, 0.95]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back = read_matrix_csv(&text).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                match (m.get(i, j), back.get(i, j)) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    other => panic!("cell ({i},{j}) mismatch: {other:?}"),
                }
            }
        }
        // Byte determinism of the writer.
        let mut buf2 = Vec::new();
        write_matrix_csv(&m, &mut buf2).unwrap();
        assert_eq!(text.as_bytes(), buf2.as_slice());
    }

    #[test]
    fn compare_single_report_has_zero_std() {
        let r = dummy_report(Method::Kif, 0.9, 1);
        let table = compare_runs(&[&r]).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].runs, 1);
        assert!(table.rows[0].op_std.abs() < 1e-15);
        assert!((table.rows[0].op_mean - r.op).abs() < 1e-15);
    }

    #[test]
    fn compare_three_seeds_matches_manual_mean() {
        let rs = [
            dummy_report(Method::Kif, 0.90, 1),
            dummy_report(Method::Kif, 0.85, 2),
            dummy_report(Method::Kif, 0.95, 3),
        ];
        let refs: Vec<&RunReport> = rs.iter().collect();
        let table = compare_runs(&refs).unwrap();
        let manual = (rs[0].op + rs[1].op + rs[2].op) / 3.0;
        assert!((table.rows[0].op_mean - manual).abs() < 1e-12);
    }

    #[test]
    fn compare_sorts_by_op_descending_and_rejects_stream_mismatch() {
        let hi = dummy_report(Method::Kif, 0.95, 1);
        let lo = dummy_report(Method::Seq, 0.55, 1);
        let table = compare_runs(&[&lo, &hi]).unwrap();
        assert!(table.rows[0].op_mean >= table.rows[1].op_mean);
        assert_eq!(table.rows[0].label, "kif(masked)");

        let mut other = dummy_report(Method::Kif, 0.9, 1);
        other.config.stream.num_tasks = 5;
        assert!(compare_runs(&[&hi, &other]).is_err());

        let text = table.render_text();
        assert!(text.contains("kif(masked)"), "{text}");
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }
}
