//! Aggregation of finished runs: per-run means over test sequences, then
//! mean ± std of those means across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::evaluate::{METRICS, METRICS_CSV};
use crate::metrics::MeanStd;
use crate::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Deserialize)]
struct Row {
    #[allow(dead_code)]
    sequence_id: u64,
    #[allow(dead_code)]
    t: f64,
    scheme: String,
    task: String,
    metric: String,
    value: f64,
}

/// One aggregated (scheme, task, metric) entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scheme: String,
    pub task: String,
    pub metric: String,
    pub stats: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub runs: Vec<PathBuf>,
    pub rows: Vec<ReportRow>,
}

/// Every `metrics.csv` below `dir`, sorted by path.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == METRICS_CSV) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

type Key = (String, String, String);

/// Mean over sequences of every (scheme, task, metric), in first-seen order.
fn run_means(path: &Path) -> Result<Vec<(Key, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        reason: e.to_string(),
    })?;
    let mut sums: Vec<(Key, f64, usize)> = Vec::new();
    for rec in reader.deserialize() {
        let row: Row = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.position().map_or(0, |p| p.byte() as usize),
            reason: e.to_string(),
        })?;
        let key = (row.scheme, row.task, row.metric);
        match sums.iter_mut().find(|(k, _, _)| *k == key) {
            Some(entry) => {
                entry.1 += row.value;
                entry.2 += 1;
            }
            None => sums.push((key, row.value, 1)),
        }
    }
    Ok(sums.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect())
}

/// Aggregate every run found below `dir`.
pub fn aggregate(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let runs = find_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::Data(format!("no {METRICS_CSV} found under {}", dir.display())));
    }
    let mut keys: Vec<Key> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for run in &runs {
        for (key, mean) in run_means(run)? {
            match keys.iter().position(|k| *k == key) {
                Some(i) => values[i].push(mean),
                None => {
                    keys.push(key);
                    values.push(vec![mean]);
                }
            }
        }
    }
    let rows = keys
        .into_iter()
        .zip(values)
        .map(|((scheme, task, metric), v)| {
            Ok(ReportRow {
                scheme,
                task,
                metric,
                stats: MeanStd::of(&v)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Report { runs, rows })
}

impl Report {
    fn get(&self, scheme: &str, task: &str, metric: &str) -> Option<&MeanStd> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.task == task && r.metric == metric)
            .map(|r| &r.stats)
    }

    /// One line per (scheme, task), one column per metric.
    pub fn table(&self) -> String {
        let mut cells: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !cells.contains(&(r.scheme.as_str(), r.task.as_str())) {
                cells.push((&r.scheme, &r.task));
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "{} run(s)", self.runs.len());
        let _ = write!(s, "{:<10} {:<9}", "scheme", "task");
        for m in METRICS {
            let _ = write!(s, " {:>18}", m);
        }
        s.push('\n');
        for (scheme, task) in cells {
            let _ = write!(s, "{scheme:<10} {task:<9}");
            for m in METRICS {
                match self.get(scheme, task, m) {
                    Some(v) => {
                        let _ = write!(s, " {:>18}", v.to_string());
                    }
                    None => {
                        let _ = write!(s, " {:>18}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["scheme", "task", "metric", "mean", "std", "runs"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.scheme.clone(),
                r.task.clone(),
                r.metric.clone(),
                r.stats.mean.to_string(),
                r.stats.std.to_string(),
                r.stats.n.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// The `report` command: aggregate, write `report.csv` into `dir` and
/// return the printable table.
pub fn run_report(dir: &Path) -> Result<(Report, String)> {
    let report = aggregate(dir)?;
    report.write_csv(&dir.join(REPORT_CSV))?;
    let table = report.table();
    Ok((report, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_run(dir: &Path, name: &str, psnr: [f64; 2]) {
        let d = dir.join(name).join("eval");
        fs::create_dir_all(&d).unwrap();
        let mut s = String::from("sequence_id,t,scheme,task,metric,value\n");
        for (i, v) in psnr.iter().enumerate() {
            s += &format!("{i},0.5,none,none,psnr,{v}\n");
            s += &format!("{i},0.5,online,mae,psnr,{}\n", v + 1.0);
        }
        fs::write(d.join(METRICS_CSV), s).unwrap();
    }

    #[test]
    fn single_run_has_zero_spread() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "a", [30.0, 32.0]);
        let (r, table) = run_report(dir.path()).unwrap();
        let s = r.get("none", "none", "psnr").unwrap();
        assert_eq!((s.mean, s.std, s.n), (31.0, 0.0, 1));
        assert_eq!(r.get("online", "mae", "psnr").unwrap().mean, 32.0);
        assert!(table.contains("31.000 ±0.000"));
        assert!(dir.path().join(REPORT_CSV).exists());
    }

    #[test]
    fn identical_runs_keep_the_run_value() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a", "b", "c"] {
            write_run(dir.path(), name, [30.0, 31.0]);
        }
        let r = aggregate(dir.path()).unwrap();
        let s = r.get("none", "none", "psnr").unwrap();
        assert_eq!((s.mean, s.std, s.n), (30.5, 0.0, 3));
    }

    #[test]
    fn spread_is_population_std_of_run_means() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "a", [30.0, 30.0]);
        write_run(dir.path(), "b", [34.0, 34.0]);
        let s = *aggregate(dir.path()).unwrap().get("none", "none", "psnr").unwrap();
        assert_eq!((s.mean, s.std), (32.0, 2.0));
    }

    #[test]
    fn empty_or_missing_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(aggregate(dir.path()).unwrap_err().exit_code(), 2);
        assert_eq!(aggregate(&dir.path().join("nope")).unwrap_err().exit_code(), 2);
    }
}
