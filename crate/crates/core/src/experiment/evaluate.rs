//! The adaptation grid: every (scheme, task) cell plus the unadapted model,
//! scored on held-out query frames.
//!
//! All adaptation finishes before the first label file is opened; the
//! reader's access audit is checked in between.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{DatasetReader, SequenceMeta};
use crate::metrics::{linear_blend_baseline, MeanStd, MetricReport};
use crate::nets::Network;
use crate::params::{load_checkpoint, ParamSet};
use crate::ssl::Task;
use crate::ttt::{adapt_and_predict, write_log, Adapted, Query, Scheme, TttConfig};
use crate::volume::Volume;
use crate::{Error, Result};

pub const METRICS: [&str; 4] = ["psnr", "ncc", "ssim", "nmse"];

/// One row of the results grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cell {
    NoTtt,
    Adapted(Scheme, Task),
}

impl Cell {
    /// The six adapted cells, task-major.
    pub fn grid() -> Vec<Cell> {
        Task::ALL
            .into_iter()
            .flat_map(|t| Scheme::ALL.into_iter().map(move |s| Cell::Adapted(s, t)))
            .collect()
    }

    /// The unadapted row followed by the adapted cells that match the
    /// filters (`None` matches everything).
    pub fn select(scheme: Option<Scheme>, task: Option<Task>, no_ttt_only: bool) -> Vec<Cell> {
        let mut cells = vec![Cell::NoTtt];
        if !no_ttt_only {
            cells.extend(Cell::grid().into_iter().filter(|c| match c {
                Cell::Adapted(s, t) => scheme.is_none_or(|x| x == *s) && task.is_none_or(|x| x == *t),
                Cell::NoTtt => false,
            }));
        }
        cells
    }

    pub fn scheme_name(self) -> &'static str {
        match self {
            Cell::NoTtt => "none",
            Cell::Adapted(s, _) => s.name(),
        }
    }

    pub fn task_name(self) -> &'static str {
        match self {
            Cell::NoTtt => "none",
            Cell::Adapted(_, t) => t.name(),
        }
    }

    fn ttt_config(self, base: &TttConfig) -> Option<TttConfig> {
        match self {
            Cell::NoTtt => None,
            Cell::Adapted(scheme, task) => Some(TttConfig {
                scheme,
                task,
                ..base.clone()
            }),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.scheme_name(), self.task_name())
    }
}

/// Adapt and predict for every cell. Only endpoint frames are seen here.
pub fn adapt_cells(
    net: &Network,
    theta0: &ParamSet<f32>,
    queries: &[Query],
    base: &TttConfig,
    cells: &[Cell],
) -> Result<Vec<(Cell, Adapted)>> {
    cells
        .iter()
        .map(|&cell| {
            log::info!("adapting {cell}");
            let cfg = cell.ttt_config(base);
            adapt_and_predict(net, theta0, queries, cfg.as_ref()).map(|a| (cell, a))
        })
        .collect()
}

/// Per-sequence metrics of one cell.
#[derive(Debug, Clone)]
pub struct CellScores {
    pub cell: Cell,
    pub reports: Vec<MetricReport>,
    pub per_sample_seconds: Vec<f64>,
    pub fell_back: bool,
}

impl CellScores {
    pub fn mean(&self, metric: &str) -> f64 {
        self.summary(metric).mean
    }

    pub fn summary(&self, metric: &str) -> MeanStd {
        let values: Vec<f64> = self.reports.iter().map(|r| value_of(r, metric)).collect();
        MeanStd::of(&values).expect("cells hold at least one sequence")
    }
}

fn value_of(r: &MetricReport, metric: &str) -> f64 {
    r.named()
        .into_iter()
        .find(|(n, _)| *n == metric)
        .map(|(_, v)| v)
        .expect("known metric")
}

pub fn score(runs: &[(Cell, Adapted)], truths: &[Volume]) -> Result<Vec<CellScores>> {
    runs.iter()
        .map(|(cell, a)| {
            let reports = a
                .predictions
                .iter()
                .zip(truths)
                .map(|(p, t)| MetricReport::evaluate(p, t))
                .collect::<Result<Vec<_>>>()?;
            Ok(CellScores {
                cell: *cell,
                reports,
                per_sample_seconds: a.per_sample_seconds.clone(),
                fell_back: a.fell_back,
            })
        })
        .collect()
}

/// Output file names inside an evaluation directory.
pub const METRICS_CSV: &str = "metrics.csv";
pub const BASELINE_CSV: &str = "baseline.csv";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const TIMING_JSON: &str = "timing.json";
pub const ADAPT_LOG: &str = "adapt_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub scheme: String,
    pub task: String,
    pub psnr: MeanStd,
    pub ncc: MeanStd,
    pub ssim: MeanStd,
    pub nmse: MeanStd,
    /// Set when adaptation diverged and the initial parameters predicted.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCell {
    pub scheme: String,
    pub task: String,
    /// Mean wall-clock seconds per test sequence, adaptation included.
    pub per_sample_seconds: f64,
}

/// Everything one `adapt-eval` run produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cells: Vec<CellScores>,
    pub blend: CellScores,
    pub sequence_ids: Vec<u64>,
    pub ts: Vec<f64>,
}

impl Evaluation {
    pub fn cell(&self, cell: Cell) -> Option<&CellScores> {
        self.cells.iter().find(|c| c.cell == cell)
    }

    pub fn aggregate(&self) -> Vec<AggregateCell> {
        self.cells
            .iter()
            .map(|c| AggregateCell {
                scheme: c.cell.scheme_name().into(),
                task: c.cell.task_name().into(),
                psnr: c.summary("psnr"),
                ncc: c.summary("ncc"),
                ssim: c.summary("ssim"),
                nmse: c.summary("nmse"),
                fell_back: c.fell_back,
            })
            .collect()
    }

    pub fn timing(&self) -> Vec<TimingCell> {
        self.cells
            .iter()
            .map(|c| TimingCell {
                scheme: c.cell.scheme_name().into(),
                task: c.cell.task_name().into(),
                per_sample_seconds: c.per_sample_seconds.iter().sum::<f64>() / c.per_sample_seconds.len() as f64,
            })
            .collect()
    }
}

/// Where the files of an evaluation go: `<out_dir>/eval`.
pub fn eval_dir(out: &Path) -> PathBuf {
    out.join("eval")
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.bin")
}

/// Load a checkpoint and check it against the configured architecture.
pub fn load_compatible(cfg: &ExperimentConfig, path: &Path) -> Result<(Network, ParamSet<f32>)> {
    let (theta, model) = load_checkpoint(path)?;
    if model != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different architecture ({}) than configured ({})",
            path.display(),
            serde_json::to_string(&model).expect("serializable"),
            serde_json::to_string(&cfg.model).expect("serializable"),
        )));
    }
    let net = Network::new(cfg.model.clone())?;
    net.check_params(&theta)?;
    Ok((net, theta))
}

/// Adapt every requested cell on the test split under `data_root`, then
/// score against the held-out labels.
pub fn evaluate(
    cfg: &ExperimentConfig,
    net: &Network,
    theta0: &ParamSet<f32>,
    reader: &DatasetReader,
    cells: &[Cell],
) -> Result<(Evaluation, Vec<(Cell, Adapted)>)> {
    let n = reader.count(super::config::Split::Test)?;
    if n == 0 {
        return Err(Error::Data("the test split is empty".into()));
    }
    let mut queries = Vec::with_capacity(n);
    let mut metas: Vec<SequenceMeta> = Vec::with_capacity(n);
    for i in 0..n {
        let (q, meta) = reader.test_query(i)?;
        queries.push(q);
        metas.push(meta);
    }
    let runs = adapt_cells(net, theta0, &queries, &cfg.ttt, cells)?;
    assert!(!reader.touched_labels(), "label files were opened during adaptation");

    let truths = metas
        .iter()
        .enumerate()
        .map(|(i, m)| reader.label(i, m))
        .collect::<Result<Vec<_>>>()?;
    let cells = score(&runs, &truths)?;
    let blends = queries
        .iter()
        .map(|q| linear_blend_baseline(&q.first, &q.last, q.t))
        .collect::<Result<Vec<_>>>()?;
    let blend = CellScores {
        cell: Cell::NoTtt,
        reports: blends
            .iter()
            .zip(&truths)
            .map(|(p, t)| MetricReport::evaluate(p, t))
            .collect::<Result<_>>()?,
        per_sample_seconds: vec![0.0; n],
        fell_back: false,
    };
    let eval = Evaluation {
        cells,
        blend,
        sequence_ids: queries.iter().map(|q| q.sequence_id).collect(),
        ts: queries.iter().map(|q| q.t).collect(),
    };
    Ok((eval, runs))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: e.position().map_or(0, |p| p.byte() as usize),
        reason: e.to_string(),
    }
}

fn write_rows<'a>(
    path: &Path,
    eval: &Evaluation,
    rows: impl Iterator<Item = (&'a str, &'a str, &'a CellScores)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["sequence_id", "t", "scheme", "task", "metric", "value"])
        .map_err(|e| csv_error(path, e))?;
    for (scheme, task, c) in rows {
        for (i, r) in c.reports.iter().enumerate() {
            for (metric, value) in r.named() {
                let rec = [
                    eval.sequence_ids[i].to_string(),
                    eval.ts[i].to_string(),
                    scheme.to_string(),
                    task.to_string(),
                    metric.to_string(),
                    value.to_string(),
                ];
                w.write_record(&rec).map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Write `metrics.csv`, `baseline.csv`, `aggregate.json`, `timing.json`
/// and the adaptation log into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, runs: &[(Cell, Adapted)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(
        &dir.join(METRICS_CSV),
        eval,
        eval.cells.iter().map(|c| (c.cell.scheme_name(), c.cell.task_name(), c)),
    )?;
    write_rows(
        &dir.join(BASELINE_CSV),
        eval,
        std::iter::once(("blend", "none", &eval.blend)),
    )?;
    write_json(&dir.join(AGGREGATE_JSON), &eval.aggregate())?;
    write_json(&dir.join(TIMING_JSON), &eval.timing())?;
    let path = dir.join(ADAPT_LOG);
    let mut file = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for (_, a) in runs {
        if let Some(s) = &a.state {
            write_log(&mut file, &s.log).map_err(|e| Error::io(&path, e))?;
        }
    }
    file.flush().map_err(|e| Error::io(&path, e))
}

/// The `adapt-eval` command: reads `<root>/dataset` and the checkpoint,
/// writes `<root>/eval`.
pub fn run_adapt_eval(cfg: &ExperimentConfig, root: &Path, checkpoint: &Path, cells: &[Cell]) -> Result<Evaluation> {
    cfg.validate()?;
    let (net, theta0) = load_compatible(cfg, checkpoint)?;
    let reader = DatasetReader::open(root)?;
    let (eval, runs) = evaluate(cfg, &net, &theta0, &reader, cells)?;
    let dir = eval_dir(root);
    write_evaluation(&dir, &eval, &runs)?;
    cfg.save(&dir.join("config.json"))?;
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::dataset::write_dataset;
    use crate::nets::ModelConfig;
    use crate::params::save_checkpoint;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::small(3);
        c.model = ModelConfig::tiny(8);
        c.data.grid_size = 8;
        c.data.n_train = 1;
        c.data.n_test = 2;
        c.data.n_frames = 4;
        c.ttt.ttt_epochs = 2;
        c
    }

    #[test]
    fn selection_covers_the_grid() {
        assert_eq!(Cell::select(None, None, false).len(), 7);
        assert_eq!(Cell::select(None, None, true), vec![Cell::NoTtt]);
        assert_eq!(
            Cell::select(Some(Scheme::Online), Some(Task::Mae), false),
            vec![Cell::NoTtt, Cell::Adapted(Scheme::Online, Task::Mae)]
        );
        assert_eq!(Cell::select(None, Some(Task::Rotation), false).len(), 4);
    }

    #[test]
    fn grid_run_writes_every_cell_and_matches_direct_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        write_dataset(&cfg, dir.path(), false).unwrap();
        let net = Network::new(cfg.model.clone()).unwrap();
        let theta = net.init::<f32>(9);
        let ck = checkpoint_path(dir.path());
        save_checkpoint(&ck, &theta, &cfg.model).unwrap();

        let eval = run_adapt_eval(&cfg, dir.path(), &ck, &Cell::select(None, None, false)).unwrap();
        assert_eq!(eval.cells.len(), 7);
        let text = fs::read_to_string(eval_dir(dir.path()).join(METRICS_CSV)).unwrap();
        assert_eq!(text.lines().count(), 1 + 7 * 2 * 4);
        assert!(text.starts_with("sequence_id,t,scheme,task,metric,value\n"));
        let agg: Vec<AggregateCell> =
            serde_json::from_str(&fs::read_to_string(eval_dir(dir.path()).join(AGGREGATE_JSON)).unwrap()).unwrap();
        assert_eq!(agg[0].scheme, "none");

        // The unadapted row is the plain forward pass of the checkpoint.
        let reader = DatasetReader::open(dir.path()).unwrap();
        for i in 0..2 {
            let (q, meta) = reader.test_query(i).unwrap();
            let truth = reader.label(i, &meta).unwrap();
            let direct = MetricReport::evaluate(&net.predict(&theta, &q.first, &q.last, q.t).unwrap(), &truth).unwrap();
            assert_eq!(eval.cell(Cell::NoTtt).unwrap().reports[i], direct);
        }
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let mut other = cfg.model.clone();
        other.rotation_hidden += 1;
        let net = Network::new(other.clone()).unwrap();
        let ck = dir.path().join("c.bin");
        save_checkpoint(&ck, &net.init(0), &other).unwrap();
        let err = load_compatible(&cfg, &ck).unwrap_err();
        assert!(err.to_string().contains("different architecture"), "{err}");
    }
}
