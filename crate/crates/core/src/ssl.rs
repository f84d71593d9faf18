//! The two self-supervised pretext tasks: rotation prediction and masked
//! reconstruction.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttadapt_tensor::{Element, Graph, NodeId, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rotation,
    Mae,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Rotation, Task::Mae];

    pub fn name(self) -> &'static str {
        match self {
            Task::Rotation => "rotation",
            Task::Mae => "mae",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}, expected rotation or mae")))
    }
}

/// Rotation by `k * 90` degrees in the H-W plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub fn new(k: u8) -> Result<Self> {
        if k > 3 {
            return Err(Error::Domain(format!("rotation label {k} not in 0..=3")));
        }
        Ok(RotationLabel(k))
    }

    pub fn k(self) -> u8 {
        self.0
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.0 as usize] = 1.0;
        v
    }
}

/// Rotate every H-W slice of `input` (shape `[..., D, H, W]`) by
/// `k * 90` degrees counter-clockwise, with row index increasing downward.
pub fn rotate<T: Element>(input: &Tensor<T>, k: RotationLabel) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() < 2 {
        return Err(Error::Geometry(format!("cannot rotate a tensor of shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h != w {
        return Err(Error::Geometry(format!("rotation needs H = W, got {h} x {w}")));
    }
    let mut cur = input.clone();
    for _ in 0..k.0 {
        let src = cur.data();
        let mut out = vec![T::zero(); src.len()];
        for (plane_out, plane_in) in out.chunks_exact_mut(h * w).zip(src.chunks_exact(h * w)) {
            for i in 0..h {
                for j in 0..w {
                    plane_out[i * w + j] = plane_in[j * w + (w - 1 - i)];
                }
            }
        }
        cur = Tensor::from_vec(s.to_vec(), out)?;
    }
    Ok(cur)
}

/// One-hot label matrix `[N, 4]`.
pub fn one_hot<T: Element>(labels: &[RotationLabel]) -> Tensor<T> {
    let data = labels.iter().flat_map(|l| l.one_hot().map(T::from_f64_lossy)).collect();
    Tensor::from_vec(vec![labels.len(), 4], data).expect("four columns per label")
}

fn check_one_hot<T: Element>(labels: &Tensor<T>) -> Result<usize> {
    let s = labels.shape();
    if s.len() != 2 || s[1] != 4 || s[0] == 0 {
        return Err(Error::Domain(format!("rotation labels must be [N>=1, 4], got {s:?}")));
    }
    for (i, row) in labels.data().chunks_exact(4).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != 3 {
            return Err(Error::Domain(format!("label row {i} is not one-hot")));
        }
    }
    Ok(s[0])
}

/// Mean cross-entropy `-(1/N) * sum_i sum_c y_ic * log softmax(z)_ic`,
/// recorded on `g`.
pub fn rotation_loss<T: Element>(g: &mut Graph<T>, logits: NodeId, labels: &Tensor<T>) -> Result<NodeId> {
    let n = check_one_hot(labels)?;
    if g.shape(logits) != labels.shape() {
        return Err(Error::Domain(format!(
            "logits {:?} do not match labels {:?}",
            g.shape(logits),
            labels.shape()
        )));
    }
    let logp = g.log_softmax(logits)?;
    let y = g.constant(labels.clone());
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -T::one() / T::from_usize(n).unwrap()))
}

/// Eager form of [`rotation_loss`].
pub fn rotation_loss_value(logits: &Tensor<f64>, labels: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = rotation_loss(&mut g, z, labels)?;
    Ok(g.value(l).item()?)
}

/// Which patches of a volume are hidden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub volume_shape: [usize; 3],
    pub patch_size: [usize; 3],
    /// Mask ratio in parts per million, so the spec stays `Eq`.
    pub ratio_ppm: u32,
    /// Sorted, unique flat patch indices.
    pub masked_patch_indices: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn patch_grid(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.volume_shape[a] / self.patch_size[a])
    }

    pub fn total_patches(&self) -> usize {
        self.patch_grid().iter().product()
    }

    pub fn mask_ratio(&self) -> f64 {
        self.ratio_ppm as f64 / 1e6
    }

    /// Per-voxel indicator, 1 on masked voxels.
    pub fn indicator(&self) -> Vec<bool> {
        let [d, h, w] = self.volume_shape;
        let [pd, ph, pw] = self.patch_size;
        let [_, gh, gw] = self.patch_grid();
        let mut hidden = vec![false; self.total_patches()];
        for &i in &self.masked_patch_indices {
            hidden[i] = true;
        }
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push(hidden[((z / pd) * gh + y / ph) * gw + x / pw]);
                }
            }
        }
        out
    }

    pub fn masked_voxels(&self) -> usize {
        self.masked_patch_indices.len() * self.patch_size.iter().product::<usize>()
    }
}

/// Number of masked patches: `round(ratio * total)` with halves rounded up.
pub fn mask_count(ratio: f64, total: usize) -> usize {
    (ratio * total as f64 + 0.5).floor() as usize
}

/// Draw `round(ratio * P)` distinct patches uniformly from the `P` patches
/// of `volume_shape`.
pub fn make_mask(volume_shape: [usize; 3], patch_size: [usize; 3], mask_ratio: f64, seed: u64) -> Result<MaskSpec> {
    for a in 0..3 {
        if patch_size[a] == 0 || volume_shape[a] % patch_size[a] != 0 {
            return Err(Error::Geometry(format!(
                "patch size {patch_size:?} does not divide volume {volume_shape:?}"
            )));
        }
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Domain(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    let total: usize = (0..3).map(|a| volume_shape[a] / patch_size[a]).product();
    let count = mask_count(mask_ratio, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_patch_indices = sample(&mut rng, total, count).into_vec();
    masked_patch_indices.sort_unstable();
    Ok(MaskSpec {
        volume_shape,
        patch_size,
        ratio_ppm: (mask_ratio * 1e6).round() as u32,
        masked_patch_indices,
        seed,
    })
}

fn check_volume_shape(shape: &[usize], spec: &MaskSpec) -> Result<()> {
    if shape.len() < 3 || shape[shape.len() - 3..] != spec.volume_shape {
        return Err(Error::Domain(format!(
            "mask for {:?} applied to tensor {shape:?}",
            spec.volume_shape
        )));
    }
    Ok(())
}

/// Zero every masked voxel; `input` is `[..., D, H, W]` and each leading
/// slice uses the same mask.
pub fn apply_mask<T: Element>(input: &Tensor<T>, spec: &MaskSpec) -> Result<Tensor<T>> {
    check_volume_shape(input.shape(), spec)?;
    let ind = spec.indicator();
    let mut out = input.clone();
    for chunk in out.data_mut().chunks_exact_mut(ind.len()) {
        for (v, &m) in chunk.iter_mut().zip(&ind) {
            if m {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// `[N, 1, D, H, W]` weights that are `1 / (masked voxel count)` on masked
/// voxels of each sample and 0 elsewhere, normalized over the whole batch.
pub fn mae_weights<T: Element>(specs: &[MaskSpec]) -> Result<Tensor<T>> {
    let first = specs.first().ok_or_else(|| Error::Domain("no masks given".into()))?;
    let total: usize = specs.iter().map(MaskSpec::masked_voxels).sum();
    if total == 0 {
        return Err(Error::Domain("mae loss is undefined for an empty mask".into()));
    }
    let w = T::one() / T::from_usize(total).unwrap();
    let [d, h, wd] = first.volume_shape;
    let mut data = Vec::with_capacity(specs.len() * d * h * wd);
    for s in specs {
        if s.volume_shape != first.volume_shape {
            return Err(Error::Domain("masks in one batch must share a volume shape".into()));
        }
        data.extend(s.indicator().into_iter().map(|m| if m { w } else { T::zero() }));
    }
    Ok(Tensor::from_vec(vec![specs.len(), 1, d, h, wd], data)?)
}

/// Mean squared error over masked voxels only, for a batch `[N, 1, D, H, W]`
/// with one mask per sample.
pub fn mae_loss<T: Element>(
    g: &mut Graph<T>,
    recon: NodeId,
    original: &Tensor<T>,
    specs: &[MaskSpec],
) -> Result<NodeId> {
    if g.shape(recon) != original.shape() {
        return Err(Error::Domain(format!(
            "reconstruction {:?} does not match original {:?}",
            g.shape(recon),
            original.shape()
        )));
    }
    let weights = mae_weights::<T>(specs)?;
    if weights.shape() != original.shape() {
        return Err(Error::Domain(format!(
            "{} masks for a batch of shape {:?}",
            specs.len(),
            original.shape()
        )));
    }
    let target = g.constant(original.clone());
    let diff = g.sub(recon, target)?;
    let sq = g.mul(diff, diff)?;
    let w = g.constant(weights);
    let weighted = g.mul(sq, w)?;
    Ok(g.sum(weighted))
}

/// Eager form of [`mae_loss`] for a single volume.
pub fn mae_loss_value(recon: &Tensor<f64>, original: &Tensor<f64>, spec: &MaskSpec) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(recon.clone());
    let l = mae_loss(&mut g, r, original, std::slice::from_ref(spec))?;
    Ok(g.value(l).item()?)
}
