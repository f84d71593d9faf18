//! Named parameter tensors partitioned by network component, with freeze
//! flags and a single-file checkpoint format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use ttadapt_tensor::{Element, Tensor};

use crate::nets::ModelConfig;
use crate::{Error, Result};

/// Freeze granularity: the extractor `f`, the interpolation head `h`, or
/// the auxiliary heads `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    F,
    H,
    G,
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f" => Ok(Group::F),
            "h" => Ok(Group::H),
            "g" => Ok(Group::G),
            _ => Err(Error::Config(format!(
                "unknown parameter group {s:?}, expected f, h or g"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Extractor,
    Interpolation,
    Rotation,
    Reconstruction,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Extractor,
        Partition::Interpolation,
        Partition::Rotation,
        Partition::Reconstruction,
    ];

    pub fn group(self) -> Group {
        match self {
            Partition::Extractor => Group::F,
            Partition::Interpolation => Group::H,
            Partition::Rotation | Partition::Reconstruction => Group::G,
        }
    }

    /// Name prefix of every tensor in the partition.
    pub fn prefix(self) -> &'static str {
        match self {
            Partition::Extractor => "f",
            Partition::Interpolation => "h",
            Partition::Rotation => "g_rot",
            Partition::Reconstruction => "g_mae",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, PartialEq)]
struct Entry<T> {
    partition: Partition,
    tensor: Tensor<T>,
}

/// Every model tensor, keyed by name and tagged with its partition. Cloning
/// is a deep copy.
#[derive(Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: BTreeMap<String, Entry<T>>,
    frozen: BTreeSet<Group>,
}

impl<T: Element> fmt::Debug for ParamSet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamSet")
            .field("tensors", &self.entries.len())
            .field("scalars", &self.num_scalars())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor; its name must start with the partition prefix.
    pub fn insert(&mut self, name: impl Into<String>, partition: Partition, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if !name.starts_with(&format!("{}.", partition.prefix())) {
            return Err(Error::Config(format!(
                "tensor {name:?} does not belong in partition {partition}"
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tensor {name:?}")));
        }
        self.entries.insert(name, Entry { partition, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn partition_of(&self, name: &str) -> Option<Partition> {
        self.entries.get(name).map(|e| e.partition)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// `(name, partition, tensor)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Partition, &Tensor<T>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e.partition, &e.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Tensors of one partition, in name order.
    pub fn partition(&self, p: Partition) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries
            .iter()
            .filter(move |(_, e)| e.partition == p)
            .map(|(n, e)| (n.as_str(), &e.tensor))
    }

    pub fn frozen(&self) -> &BTreeSet<Group> {
        &self.frozen
    }

    pub fn set_frozen(&mut self, groups: impl IntoIterator<Item = Group>) {
        self.frozen = groups.into_iter().collect();
    }

    pub fn is_frozen(&self, p: Partition) -> bool {
        self.frozen.contains(&p.group())
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        Entry {
                            partition: e.partition,
                            tensor: e.tensor.cast(),
                        },
                    )
                })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// True when every tensor has bitwise-equal values in `other`.
    pub fn bit_identical(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(n, e)| {
                other.entries.get(n).is_some_and(|o| {
                    o.partition == e.partition
                        && o.tensor.shape() == e.tensor.shape()
                        && o.tensor
                            .data()
                            .iter()
                            .zip(e.tensor.data())
                            .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
                })
            })
    }

    /// Same names, partitions and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(n, e)| {
                other
                    .entries
                    .get(n)
                    .is_some_and(|o| o.partition == e.partition && o.tensor.shape() == e.tensor.shape())
            })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    partition: Partition,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    model: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

/// Checkpoint bytes: a JSON manifest line, then each tensor's little-endian
/// `f32` values concatenated in manifest order.
pub fn encode_checkpoint(params: &ParamSet<f32>, model: &ModelConfig) -> Vec<u8> {
    let manifest = Manifest {
        dtype: "f32".into(),
        model: model.clone(),
        tensors: params
            .iter()
            .map(|(name, partition, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                partition,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamSet<f32>, ModelConfig)> {
    let format = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format(0, "missing manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| format(0, format!("bad manifest: {e}")))?;
    if manifest.dtype != "f32" {
        return Err(format(0, format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let mut offset = nl + 1;
    let expected: usize = nl
        + 1
        + manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum::<usize>();
    if bytes.len() != expected {
        return Err(format(
            offset,
            format!(
                "payload must be {} bytes, found {}",
                expected - offset,
                bytes.len() - offset
            ),
        ));
    }
    let mut params = ParamSet::new();
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let data = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(entry.shape, data).map_err(|e| format(offset, e.to_string()))?;
        params
            .insert(entry.name, entry.partition, tensor)
            .map_err(|e| format(offset, e.to_string()))?;
        offset += 4 * n;
    }
    Ok((params, manifest.model))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>, model: &ModelConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(params, model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
