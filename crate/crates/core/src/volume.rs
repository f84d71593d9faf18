//! Single 3D scalar frames and their on-disk format: one UTF-8 JSON header
//! line followed by raw little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ttadapt_tensor::{Element, Tensor};

use crate::{Error, Result};

/// One frame of a sequence: a `[D, H, W]` grid of normalized intensities.
#[derive(Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl std::fmt::Debug for Volume {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Volume{:?}", self.dims)
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Domain(format!(
                "volume {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Volume {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Build from a function of `(z, y, x)`.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [d, h, w] = dims;
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn same_dims(&self, other: &Volume, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Domain(format!(
                "{what}: volume shapes differ, {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// As a `[1, 1, D, H, W]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let [d, h, w] = self.dims;
        Tensor::from_vec(
            vec![1, 1, d, h, w],
            self.data.iter().map(|&v| T::from_f32(v).unwrap()).collect(),
        )
        .expect("volume length matches dims")
    }

    /// From any tensor holding exactly one `[D, H, W]` volume.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 3 || s[..s.len() - 3].iter().any(|&e| e != 1) {
            return Err(Error::Domain(format!("tensor {s:?} is not a single volume")));
        }
        let dims = [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]];
        Ok(Volume {
            dims,
            data: t.data().iter().map(|v| v.to_f32().unwrap()).collect(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    dtype: String,
    order: String,
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let header = Header {
        shape: v.dims,
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let format = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format(0, "missing header line terminator".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| format(0, format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(format(0, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(format(0, format!("unsupported order {:?}", header.order)));
    }
    let start = newline + 1;
    let expected = header.shape.iter().product::<usize>() * 4;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(format(
            start,
            format!(
                "payload for shape {:?} must be {expected} bytes, found {actual}",
                header.shape
            ),
        ));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume {
        dims: header.shape,
        data,
    })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}
