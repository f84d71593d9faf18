//! The Y-shaped model: a convolutional extractor `f` shared by an
//! interpolation head `h`, a rotation classifier and a masked-reconstruction
//! decoder.
//!
//! Layers are recorded on a [`Graph`] so the same code serves prediction,
//! training and test-time adaptation. A [`Binding`] decides which
//! parameters enter the graph as differentiable leaves.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttadapt_tensor::kernels::Upsample;
use ttadapt_tensor::{Element, Graph, NodeId, Tensor};

use crate::params::{ParamSet, Partition};
use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Edge length of the cubic input grid.
    pub grid_size: usize,
    /// Extractor channel progression, input channel first; one 3^3 conv
    /// stage per step.
    pub channels: Vec<usize>,
    /// Number of leading extractor stages followed by 2x max pooling.
    pub pools: usize,
    /// Decoder widths, one per upsampling stage, shared by `h` and the
    /// reconstruction head.
    pub decoder: Vec<usize>,
    /// Hidden width of the rotation classifier.
    pub rotation_hidden: usize,
    /// Edge length of cubic mask patches.
    pub patch_size: usize,
    pub mask_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_size: 32,
            channels: vec![1, 16, 32, 64, 64],
            pools: 3,
            decoder: vec![32, 16, 8],
            rotation_hidden: 32,
            patch_size: 8,
            mask_ratio: 0.8,
        }
    }
}

impl ModelConfig {
    /// Narrow variant used for fast checks.
    pub fn tiny(grid_size: usize) -> Self {
        ModelConfig {
            grid_size,
            channels: vec![1, 2, 3, 4, 4],
            decoder: vec![3, 2, 2],
            rotation_hidden: 3,
            patch_size: grid_size / 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() < 2 || self.channels[0] != 1 || self.channels.contains(&0) {
            return bad(format!(
                "extractor channels {:?} must start at 1 and be positive",
                self.channels
            ));
        }
        let stages = self.channels.len() - 1;
        if self.pools > stages {
            return bad(format!("{} pools but only {stages} stages", self.pools));
        }
        if self.decoder.len() != self.pools || self.decoder.contains(&0) {
            return bad(format!(
                "decoder {:?} needs {} positive widths",
                self.decoder, self.pools
            ));
        }
        if self.grid_size == 0 || self.grid_size % (1 << self.pools) != 0 {
            return bad(format!("grid {} not divisible by 2^{}", self.grid_size, self.pools));
        }
        if self.patch_size == 0 || self.grid_size % self.patch_size != 0 {
            return bad(format!(
                "patch size {} does not divide grid {}",
                self.patch_size, self.grid_size
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || self.rotation_hidden == 0 {
            return bad("mask ratio must lie in [0, 1] and the rotation head must be non-empty".into());
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Spatial edge of the feature map.
    pub fn feature_size(&self) -> usize {
        self.grid_size >> self.pools
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        [self.grid_size; 3]
    }

    /// `(name, partition, shape, zero-initialized)` for every tensor.
    fn layout(&self) -> Vec<(String, Partition, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, p: Partition, layer: &str, cin: usize, cout: usize, zero: bool| {
            let name = format!("{}.{layer}", p.prefix());
            out.push((format!("{name}.weight"), p, vec![cout, cin, 3, 3, 3], zero));
            out.push((format!("{name}.bias"), p, vec![cout], true));
        };
        for (i, w) in self.channels.windows(2).enumerate() {
            conv(
                &mut out,
                Partition::Extractor,
                &format!("conv{}", i + 1),
                w[0],
                w[1],
                false,
            );
        }
        let c = self.feature_channels();
        let mut prev = 2 * c + 1;
        for (i, &w) in self.decoder.iter().enumerate() {
            conv(
                &mut out,
                Partition::Interpolation,
                &format!("conv{}", i + 1),
                prev,
                w,
                false,
            );
            prev = w;
        }
        let last = *self.decoder.last().unwrap_or(&(2 * c + 1));
        conv(&mut out, Partition::Interpolation, "fuse", last + 1, last, false);
        conv(&mut out, Partition::Interpolation, "out", last, 1, true);

        let mut prev = c;
        for (i, &w) in self.decoder.iter().enumerate() {
            conv(
                &mut out,
                Partition::Reconstruction,
                &format!("conv{}", i + 1),
                prev,
                w,
                false,
            );
            prev = w;
        }
        conv(&mut out, Partition::Reconstruction, "out", prev, 1, false);

        let h = self.rotation_hidden;
        out.push(("g_rot.fc1.weight".into(), Partition::Rotation, vec![c, h], false));
        out.push(("g_rot.fc1.bias".into(), Partition::Rotation, vec![h], true));
        out.push(("g_rot.fc2.weight".into(), Partition::Rotation, vec![h, 4], false));
        out.push(("g_rot.fc2.bias".into(), Partition::Rotation, vec![4], true));
        out
    }
}

/// Feature map of one or more frames, together with the frames it encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Element = f32> {
    /// `[N, C, D', H', W']`.
    pub features: Tensor<T>,
    /// The encoded input, `[N, 1, D, H, W]`.
    pub source: Tensor<T>,
}

/// Graph nodes for the parameters of a [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    /// Record the tensors of `partitions` on `g`: as named differentiable
    /// leaves when `trainable(partition)` holds, as constants otherwise.
    pub fn new<T: Element>(
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        partitions: &[Partition],
        trainable: impl Fn(Partition) -> bool,
    ) -> Self {
        let mut ids = BTreeMap::new();
        for (name, p, t) in params.iter() {
            if !partitions.contains(&p) {
                continue;
            }
            let id = if trainable(p) {
                g.param(name, t.clone())
            } else {
                g.constant(t.clone())
            };
            ids.insert(name.to_string(), id);
        }
        Binding { ids }
    }

    /// Everything as constants.
    pub fn constants<T: Element>(g: &mut Graph<T>, params: &ParamSet<T>, partitions: &[Partition]) -> Self {
        Self::new(g, params, partitions, |_| false)
    }

    /// Bind names to nodes that are already on a graph.
    pub fn from_nodes(nodes: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Binding {
            ids: nodes.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} is missing or not bound")))
    }
}

/// Model architecture; parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Network { config })
    }

    /// Fresh parameters: weights uniform in `+-sqrt(6 / fan_in)`, biases and
    /// the final interpolation layer zero.
    pub fn init<T: Element>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layout = self.config.layout();
        layout.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, p, shape, zero) in layout {
            let tensor = if zero {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(&shape, -bound, bound, &mut rng)
            };
            params.insert(name, p, tensor).expect("layout names are unique");
        }
        params
    }

    /// Check that `params` has exactly the tensors this architecture needs.
    pub fn check_params<T: Element>(&self, params: &ParamSet<T>) -> Result<()> {
        let layout = self.config.layout();
        for (name, p, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() && params.partition_of(name) == Some(*p) => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, architecture expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter {name} missing for this architecture"))),
            }
        }
        if params.len() != layout.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture expects {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(())
    }

    fn conv<T: Element>(&self, g: &mut Graph<T>, b: &Binding, name: &str, x: NodeId) -> Result<NodeId> {
        let w = b.get(&format!("{name}.weight"))?;
        let bias = b.get(&format!("{name}.bias"))?;
        Ok(g.conv3d(x, w, Some(bias), 1, 1)?)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.grid_size;
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [s, s, s] {
            return Err(Error::Geometry(format!(
                "input {shape:?} does not match the configured [N, 1, {s}, {s}, {s}]"
            )));
        }
        Ok(())
    }

    /// Extractor on `[N, 1, D, H, W]` input.
    pub fn extract_node<T: Element>(&self, g: &mut Graph<T>, b: &Binding, x: NodeId) -> Result<NodeId> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        for i in 0..self.config.channels.len() - 1 {
            h = self.conv(g, b, &format!("f.conv{}", i + 1), h)?;
            h = g.relu(h);
            if i < self.config.pools {
                h = g.max_pool3d(h, 2)?;
            }
        }
        Ok(h)
    }

    /// Upsampling decoder shared in shape by `h` and the reconstruction head.
    fn decode<T: Element>(&self, g: &mut Graph<T>, b: &Binding, prefix: &str, mut h: NodeId) -> Result<NodeId> {
        for i in 0..self.config.decoder.len() {
            h = self.conv(g, b, &format!("{prefix}.conv{}", i + 1), h)?;
            h = g.relu(h);
            h = g.upsample3d(h, 2, Upsample::Trilinear)?;
        }
        Ok(h)
    }

    /// Predicted frame at time `t` from single-frame features and the
    /// endpoint frames: `(1 - t) * i0 + t * i1 + R`.
    #[allow(clippy::too_many_arguments)]
    pub fn interpolate_node<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        feat0: NodeId,
        feat1: NodeId,
        i0: NodeId,
        i1: NodeId,
        t: f64,
    ) -> Result<NodeId> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain(format!("interpolation time {t} outside (0, 1)")));
        }
        let fs = g.shape(feat0).to_vec();
        if g.shape(feat1) != fs.as_slice() || fs.len() != 5 || fs[0] != 1 {
            return Err(Error::Geometry(format!(
                "features {:?} and {:?} must be single-frame and equal in shape",
                fs,
                g.shape(feat1)
            )));
        }
        let tt = T::from_f64_lossy(t);
        let tchan = g.constant(Tensor::full(&[1, 1, fs[2], fs[3], fs[4]], tt));
        let z = g.concat(&[feat0, feat1, tchan], 1)?;
        let up = self.decode(g, b, "h", z)?;
        let a = g.scale(i0, T::one() - tt);
        let c = g.scale(i1, tt);
        let base = g.add(a, c)?;
        let fused = g.concat(&[up, base], 1)?;
        let fused = self.conv(g, b, "h.fuse", fused)?;
        let fused = g.relu(fused);
        let residual = self.conv(g, b, "h.out", fused)?;
        Ok(g.add(base, residual)?)
    }

    /// Rotation logits `[N, 4]`.
    pub fn rotation_node<T: Element>(&self, g: &mut Graph<T>, b: &Binding, feat: NodeId) -> Result<NodeId> {
        let pooled = g.spatial_mean(feat)?;
        let h = g.dense(pooled, b.get("g_rot.fc1.weight")?, b.get("g_rot.fc1.bias")?)?;
        let h = g.relu(h);
        Ok(g.dense(h, b.get("g_rot.fc2.weight")?, b.get("g_rot.fc2.bias")?)?)
    }

    /// Full-resolution reconstruction `[N, 1, D, H, W]`.
    pub fn reconstruct_node<T: Element>(&self, g: &mut Graph<T>, b: &Binding, feat: NodeId) -> Result<NodeId> {
        let h = self.decode(g, b, "g_mae", feat)?;
        self.conv(g, b, "g_mae.out", h)
    }

    pub fn extract<T: Element>(&self, params: &ParamSet<T>, input: &Tensor<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let b = Binding::constants(&mut g, params, &[Partition::Extractor]);
        let x = g.constant(input.clone());
        let f = self.extract_node(&mut g, &b, x)?;
        Ok(FeatureMap {
            features: g.value(f).clone(),
            source: input.clone(),
        })
    }

    pub fn interpolate<T: Element>(
        &self,
        params: &ParamSet<T>,
        feat0: &FeatureMap<T>,
        feat1: &FeatureMap<T>,
        t: f64,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = Binding::constants(&mut g, params, &[Partition::Interpolation]);
        let f0 = g.constant(feat0.features.clone());
        let f1 = g.constant(feat1.features.clone());
        let i0 = g.constant(feat0.source.clone());
        let i1 = g.constant(feat1.source.clone());
        let out = self.interpolate_node(&mut g, &b, f0, f1, i0, i1, t)?;
        Ok(g.value(out).clone())
    }

    pub fn predict_rotation<T: Element>(&self, params: &ParamSet<T>, feat: &FeatureMap<T>) -> Result<Tensor<T>> {
        self.check_features(feat)?;
        let mut g = Graph::new();
        let b = Binding::constants(&mut g, params, &[Partition::Rotation]);
        let f = g.constant(feat.features.clone());
        let out = self.rotation_node(&mut g, &b, f)?;
        Ok(g.value(out).clone())
    }

    pub fn reconstruct<T: Element>(&self, params: &ParamSet<T>, feat: &FeatureMap<T>) -> Result<Tensor<T>> {
        self.check_features(feat)?;
        let mut g = Graph::new();
        let b = Binding::constants(&mut g, params, &[Partition::Reconstruction]);
        let f = g.constant(feat.features.clone());
        let out = self.reconstruct_node(&mut g, &b, f)?;
        Ok(g.value(out).clone())
    }

    fn check_features<T: Element>(&self, feat: &FeatureMap<T>) -> Result<()> {
        let s = feat.features.shape();
        let (c, e) = (self.config.feature_channels(), self.config.feature_size());
        if s.len() != 5 || s[1] != c || s[2..] != [e, e, e] {
            return Err(Error::Geometry(format!(
                "feature map {s:?} does not match [N, {c}, {e}, {e}, {e}]"
            )));
        }
        Ok(())
    }

    /// Mid-frame prediction from two endpoint volumes.
    pub fn predict(&self, params: &ParamSet<f32>, i0: &Volume, i1: &Volume, t: f64) -> Result<Volume> {
        let mut g = Graph::new();
        let b = Binding::constants(&mut g, params, &[Partition::Extractor, Partition::Interpolation]);
        let x0 = g.constant(i0.to_tensor());
        let x1 = g.constant(i1.to_tensor());
        let f0 = self.extract_node(&mut g, &b, x0)?;
        let f1 = self.extract_node(&mut g, &b, x1)?;
        let out = self.interpolate_node(&mut g, &b, f0, f1, x0, x1, t)?;
        let v = g.value(out);
        if !v.all_finite() {
            return Err(Error::Tensor(ttadapt_tensor::TensorError::NonFinite(
                "interpolation output".into(),
            )));
        }
        Volume::from_tensor(v)
    }
}
