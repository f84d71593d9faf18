//! On-disk datasets.
//!
//! ```text
//! dataset/train/seq_000/frame_000.vol .. frame_{n-1}.vol, meta.json
//! dataset/test/seq_000/frame_000.vol, frame_{n-1}.vol, meta.json
//! dataset/labels/test/seq_000/frame_{q}.vol
//! ```
//!
//! Test directories hold only the two endpoint frames; the query frame
//! lives in the separate label tree, which adaptation never opens.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Split};
use crate::shift::{apply_shifts, ShiftSpec};
use crate::synth::{generate_sequence, query_index, query_t, Sequence4D, SequenceSpec};
use crate::ttt::Query;
use crate::volume::{read_volume, write_volume, Volume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub id: u64,
    pub sequence: SequenceSpec,
    /// Applied in order to every stored frame.
    pub shifts: Vec<ShiftSpec>,
    pub query_index: usize,
    pub t: f64,
}

pub fn dataset_dir(root: &Path) -> PathBuf {
    root.join("dataset")
}

fn seq_dir(root: &Path, split: Split, i: usize) -> PathBuf {
    dataset_dir(root).join(split.name()).join(format!("seq_{i:03}"))
}

fn label_dir(root: &Path, i: usize) -> PathBuf {
    dataset_dir(root)
        .join("labels")
        .join("test")
        .join(format!("seq_{i:03}"))
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.vol")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Test sequence `i` with its recorded shifts applied to every frame.
pub fn shifted_test_sequence(cfg: &ExperimentConfig, i: usize) -> Result<(Sequence4D, Vec<ShiftSpec>)> {
    let mut seq = generate_sequence(&cfg.sequence_spec(Split::Test, i))?;
    let shifts = cfg.test_shifts(i);
    for f in &mut seq.frames {
        *f = apply_shifts(f, &shifts)?;
    }
    Ok((seq, shifts))
}

/// Write the train split, the endpoint-only test split and the label tree
/// under `root/dataset`. Refuses a non-empty dataset directory unless
/// `force` is set, in which case it is replaced.
pub fn write_dataset(cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let dir = dataset_dir(root);
    if dir.exists() {
        let non_empty = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let n = cfg.data.n_frames;
    let (q, t) = (query_index(n), query_t(n));
    for i in 0..cfg.data.n_train {
        let spec = cfg.sequence_spec(Split::Train, i);
        let seq = generate_sequence(&spec)?;
        let d = seq_dir(root, Split::Train, i);
        mkdir(&d)?;
        for (k, f) in seq.frames.iter().enumerate() {
            write_volume(&d.join(frame_name(k)), f)?;
        }
        let meta = SequenceMeta {
            id: i as u64,
            sequence: spec,
            shifts: vec![],
            query_index: q,
            t,
        };
        write_json(&d.join("meta.json"), &meta)?;
    }
    for i in 0..cfg.data.n_test {
        let (seq, shifts) = shifted_test_sequence(cfg, i)?;
        let d = seq_dir(root, Split::Test, i);
        mkdir(&d)?;
        write_volume(&d.join(frame_name(0)), seq.first())?;
        write_volume(&d.join(frame_name(n - 1)), seq.last())?;
        let meta = SequenceMeta {
            id: i as u64,
            sequence: seq.spec.clone(),
            shifts,
            query_index: q,
            t,
        };
        write_json(&d.join("meta.json"), &meta)?;
        let l = label_dir(root, i);
        mkdir(&l)?;
        write_volume(&l.join(frame_name(q)), &seq.frames[q])?;
    }
    Ok(())
}

/// Read access to a dataset that records every file it opens.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    root: PathBuf,
    audit: Arc<Mutex<Vec<PathBuf>>>,
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self> {
        let dir = dataset_dir(root);
        if !dir.is_dir() {
            return Err(Error::Data(format!("no dataset at {}", dir.display())));
        }
        Ok(DatasetReader {
            root: root.to_path_buf(),
            audit: Arc::new(Mutex::new(Vec::new())),
        })
    }

    /// Every file opened so far, in order.
    pub fn accessed(&self) -> Vec<PathBuf> {
        self.audit.lock().expect("audit lock").clone()
    }

    /// Whether any opened file lies in the label tree.
    pub fn touched_labels(&self) -> bool {
        let labels = dataset_dir(&self.root).join("labels");
        self.accessed().iter().any(|p| p.starts_with(&labels))
    }

    fn note(&self, p: &Path) {
        self.audit.lock().expect("audit lock").push(p.to_path_buf());
    }

    fn volume(&self, p: &Path) -> Result<Volume> {
        self.note(p);
        read_volume(p)
    }

    fn meta(&self, p: &Path) -> Result<SequenceMeta> {
        self.note(p);
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: p.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })
    }

    pub fn count(&self, split: Split) -> Result<usize> {
        let dir = dataset_dir(&self.root).join(split.name());
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut n = 0;
        for e in entries {
            let e = e.map_err(|e| Error::io(&dir, e))?;
            if e.file_name().to_string_lossy().starts_with("seq_") {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn train_sequence(&self, i: usize) -> Result<Sequence4D> {
        let d = seq_dir(&self.root, Split::Train, i);
        let meta = self.meta(&d.join("meta.json"))?;
        let frames = (0..meta.sequence.n_frames)
            .map(|k| self.volume(&d.join(frame_name(k))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequence4D {
            spec: meta.sequence,
            frames,
        })
    }

    /// Endpoint frames and query time of test sequence `i`.
    pub fn test_query(&self, i: usize) -> Result<(Query, SequenceMeta)> {
        let d = seq_dir(&self.root, Split::Test, i);
        let meta = self.meta(&d.join("meta.json"))?;
        let n = meta.sequence.n_frames;
        let q = Query {
            sequence_id: meta.id,
            first: self.volume(&d.join(frame_name(0)))?,
            last: self.volume(&d.join(frame_name(n - 1)))?,
            t: meta.t,
        };
        Ok((q, meta))
    }

    pub fn test_queries(&self) -> Result<Vec<Query>> {
        (0..self.count(Split::Test)?)
            .map(|i| self.test_query(i).map(|(q, _)| q))
            .collect()
    }

    /// Ground-truth query frame of test sequence `i`.
    pub fn label(&self, i: usize, meta: &SequenceMeta) -> Result<Volume> {
        let p = label_dir(&self.root, i).join(frame_name(meta.query_index));
        self.volume(&p)
    }
}
