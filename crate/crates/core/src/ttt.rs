//! Test-time training: self-supervised gradient steps on unlabeled test
//! batches under the naive, online and mini-batch schemes.
//!
//! Every random draw of a step (rotation labels, masks) comes from a
//! generator keyed by `(seed, batch id, step)`. Schemes that visit the same
//! batch at the same step index therefore see identical draws, which is what
//! makes their results comparable bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttadapt_tensor::{Element, Graph, NodeId, Tensor};

use crate::nets::{Binding, Network};
use crate::params::{Group, ParamSet, Partition};
use crate::ssl::{self, RotationLabel, Task};
use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Naive,
    Online,
    #[serde(rename = "minibatch")]
    MiniBatch,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Naive, Scheme::Online, Scheme::MiniBatch];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Naive => "naive",
            Scheme::Online => "online",
            Scheme::MiniBatch => "minibatch",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}, expected naive, online or minibatch")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub scheme: Scheme,
    pub task: Task,
    pub eta: f64,
    /// Naive: passes over the stream. Online and mini-batch: steps per batch.
    pub ttt_epochs: usize,
    /// Test sequences per batch.
    pub batch_size: usize,
    pub seed: u64,
    pub freeze: BTreeSet<Group>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            scheme: Scheme::Online,
            task: Task::Rotation,
            eta: 2e-4,
            ttt_epochs: 50,
            batch_size: 1,
            seed: 0,
            freeze: BTreeSet::from([Group::H]),
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.ttt_epochs == 0 {
            return Err(Error::Config(
                "ttt_epochs must be at least 1; use the no-adaptation flag for the unadapted baseline".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Partitions that receive gradients for the configured task.
    pub fn trainable(&self) -> Vec<Partition> {
        [Partition::Extractor, head(self.task)]
            .into_iter()
            .filter(|p| !self.freeze.contains(&p.group()))
            .collect()
    }
}

/// The auxiliary head used by a task.
pub fn head(task: Task) -> Partition {
    match task {
        Task::Rotation => Partition::Rotation,
        Task::Mae => Partition::Reconstruction,
    }
}

/// Unlabeled frames adapted on together.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Keys the batch's random draws; the id of its first sequence.
    pub id: u64,
    pub frames: Vec<Volume>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TestStream {
    pub batches: Vec<Batch>,
}

impl TestStream {
    /// Group `(sequence id, endpoint frames)` items into batches of
    /// `batch_size` sequences, keeping order.
    pub fn from_sequences(items: Vec<(u64, Vec<Volume>)>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut batches = Vec::new();
        for chunk in items.chunks(batch_size) {
            let frames: Vec<Volume> = chunk.iter().flat_map(|(_, f)| f.iter().cloned()).collect();
            if frames.is_empty() {
                return Err(Error::Data(format!("test sequence {} has no frames", chunk[0].0)));
            }
            batches.push(Batch { id: chunk[0].0, frames });
        }
        Ok(TestStream { batches })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Step index reserved for the fixed mask draw used to evaluate the naive
/// MAE objective between epochs.
pub const EVAL_STEP: u64 = u64::MAX;

/// Generator for the random draws of one `(batch, step)`.
pub fn step_rng(seed: u64, batch_id: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&batch_id.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(b"ttt-draw");
    ChaCha8Rng::from_seed(key)
}

/// Self-supervised loss of `frames` recorded on `g`. Draws rotation labels
/// or masks from `rng`, one per frame.
pub fn ssl_objective<T: Element>(
    g: &mut Graph<T>,
    net: &Network,
    binding: &Binding,
    frames: &[Volume],
    task: Task,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if frames.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let dims = net.config.volume_dims();
    let mut stacked = Vec::with_capacity(frames.len() * frames[0].len());
    for f in frames {
        if f.dims() != dims {
            return Err(Error::Geometry(format!(
                "frame {:?} does not match grid {dims:?}",
                f.dims()
            )));
        }
    }
    let n = frames.len();
    let shape = [n, 1, dims[0], dims[1], dims[2]];
    match task {
        Task::Rotation => {
            let mut labels = Vec::with_capacity(n);
            for f in frames {
                let label = RotationLabel::new(rng.random_range(0..4u8))?;
                let rotated = ssl::rotate(&f.to_tensor::<T>(), label)?;
                stacked.extend_from_slice(rotated.data());
                labels.push(label);
            }
            let x = g.constant(Tensor::from_vec(shape.to_vec(), stacked)?);
            let feat = net.extract_node(g, binding, x)?;
            let logits = net.rotation_node(g, binding, feat)?;
            ssl::rotation_loss(g, logits, &ssl::one_hot(&labels))
        }
        Task::Mae => {
            let cfg = &net.config;
            let mut masks = Vec::with_capacity(n);
            let mut original = Vec::with_capacity(n * frames[0].len());
            for f in frames {
                let mask = ssl::make_mask(dims, [cfg.patch_size; 3], cfg.mask_ratio, rng.random())?;
                let t = f.to_tensor::<T>();
                stacked.extend_from_slice(ssl::apply_mask(&t, &mask)?.data());
                original.extend_from_slice(t.data());
                masks.push(mask);
            }
            let x = g.constant(Tensor::from_vec(shape.to_vec(), stacked)?);
            let feat = net.extract_node(g, binding, x)?;
            let recon = net.reconstruct_node(g, binding, feat)?;
            ssl::mae_loss(g, recon, &Tensor::from_vec(shape.to_vec(), original)?, &masks)
        }
    }
}

/// Loss and gradients of the task loss on `frames` for the unfrozen
/// partitions among `f` and the task head.
pub fn ssl_grad(
    net: &Network,
    theta: &ParamSet<f32>,
    frames: &[Volume],
    task: Task,
    freeze: &BTreeSet<Group>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let mut g = Graph::new();
    let binding = Binding::new(&mut g, theta, &[Partition::Extractor, head(task)], |p| {
        !freeze.contains(&p.group())
    });
    let loss = ssl_objective(&mut g, net, &binding, frames, task, rng)?;
    let value = g.value(loss).item()? as f64;
    let grads = g.backward(loss)?.into_named();
    Ok((value, grads))
}

/// `theta -= eta * grad` for every key of `grads`; other tensors are left
/// untouched.
pub fn sgd_step(theta: &mut ParamSet<f32>, grads: &BTreeMap<String, Tensor<f32>>, eta: f64) -> Result<()> {
    let eta = eta as f32;
    for (name, grad) in grads {
        check_update_target(theta, name)?;
        let p = theta.get_mut(name).expect("checked above");
        if p.shape() != grad.shape() {
            return Err(Error::Domain(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                p.shape()
            )));
        }
        for (v, &d) in p.data_mut().iter_mut().zip(grad.data()) {
            *v -= eta * d;
        }
    }
    Ok(())
}

fn check_update_target(theta: &ParamSet<f32>, name: &str) -> Result<()> {
    match theta.partition_of(name) {
        None => Err(Error::Domain(format!("gradient for unknown parameter {name:?}"))),
        Some(p) if theta.is_frozen(p) => Err(Error::Domain(format!("gradient for frozen parameter {name:?}"))),
        Some(_) => Ok(()),
    }
}

/// Adam with bias correction, state kept per parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, theta: &mut ParamSet<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (name, grad) in grads {
            check_update_target(theta, name)?;
            let p = theta.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((x, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                *x -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

enum Optimizer {
    Sgd(f64),
    Adam(Adam),
}

impl Optimizer {
    fn new(cfg: &TttConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(cfg.eta),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.eta)),
        }
    }

    fn step(&mut self, theta: &mut ParamSet<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        match self {
            Optimizer::Sgd(eta) => sgd_step(theta, grads, *eta),
            Optimizer::Adam(a) => a.step(theta, grads),
        }
    }
}

/// One record of the adaptation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub scheme: Scheme,
    pub task: Task,
    pub batch_index: usize,
    pub step: usize,
    pub loss: f64,
    /// Seconds since the scheme started.
    pub elapsed_s: f64,
}

pub fn write_log(out: &mut impl Write, records: &[StepRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Result of running one scheme over a stream.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    /// Parameters after the last update.
    pub theta: ParamSet<f32>,
    /// Parameters used to predict each batch; empty when `theta` serves
    /// every batch (naive scheme).
    pub per_batch: Vec<ParamSet<f32>>,
    pub step_count: usize,
    /// Wall-clock seconds of adaptation attributed to each batch.
    pub per_batch_seconds: Vec<f64>,
    pub loss_trace: Vec<f64>,
    /// Naive only: stream objective under a fixed draw after each epoch.
    pub epoch_objective: Vec<f64>,
    pub log: Vec<StepRecord>,
}

impl AdaptationState {
    fn new(theta: ParamSet<f32>) -> Self {
        AdaptationState {
            theta,
            per_batch: Vec::new(),
            step_count: 0,
            per_batch_seconds: Vec::new(),
            loss_trace: Vec::new(),
            epoch_objective: Vec::new(),
            log: Vec::new(),
        }
    }

    /// Parameters that predict batch `i`.
    pub fn theta_for(&self, i: usize) -> &ParamSet<f32> {
        self.per_batch.get(i).unwrap_or(&self.theta)
    }
}

struct Runner<'a> {
    net: &'a Network,
    cfg: &'a TttConfig,
    opt: Optimizer,
    start: Instant,
}

impl<'a> Runner<'a> {
    fn new(net: &'a Network, cfg: &'a TttConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Runner {
            net,
            cfg,
            opt: Optimizer::new(cfg),
            start: Instant::now(),
        })
    }

    /// One optimizer step on `batch` at step index `step`.
    fn step(
        &mut self,
        state: &mut AdaptationState,
        theta: &mut ParamSet<f32>,
        batch: &Batch,
        batch_index: usize,
        step: usize,
    ) -> Result<()> {
        let mut rng = step_rng(self.cfg.seed, batch.id, step as u64);
        let (loss, grads) = ssl_grad(
            self.net,
            theta,
            &batch.frames,
            self.cfg.task,
            &self.cfg.freeze,
            &mut rng,
        )?;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite {
                what: "self-supervised",
                trace: state.loss_trace.clone(),
            });
        }
        self.opt.step(theta, &grads)?;
        state.step_count += 1;
        state.loss_trace.push(loss);
        state.log.push(StepRecord {
            scheme: self.cfg.scheme,
            task: self.cfg.task,
            batch_index,
            step,
            loss,
            elapsed_s: self.start.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

fn prepare(theta0: &ParamSet<f32>, cfg: &TttConfig, stream: &TestStream) -> Result<ParamSet<f32>> {
    if stream.is_empty() {
        return Err(Error::Data("test stream is empty".into()));
    }
    let mut theta = theta0.clone();
    theta.set_frozen(cfg.freeze.iter().copied());
    Ok(theta)
}

/// Rotation loss averaged over all four rotations of every frame.
fn all_rotations_objective(g: &mut Graph<f32>, net: &Network, binding: &Binding, frames: &[Volume]) -> Result<NodeId> {
    let dims = net.config.volume_dims();
    let mut stacked = Vec::with_capacity(4 * frames.len() * dims.iter().product::<usize>());
    let mut labels = Vec::with_capacity(4 * frames.len());
    for f in frames {
        if f.dims() != dims {
            return Err(Error::Geometry(format!(
                "frame {:?} does not match grid {dims:?}",
                f.dims()
            )));
        }
        let t = f.to_tensor::<f32>();
        for k in 0..4 {
            let label = RotationLabel::new(k)?;
            stacked.extend_from_slice(ssl::rotate(&t, label)?.data());
            labels.push(label);
        }
    }
    let x = g.constant(Tensor::from_vec(
        vec![labels.len(), 1, dims[0], dims[1], dims[2]],
        stacked,
    )?);
    let feat = net.extract_node(g, binding, x)?;
    let logits = net.rotation_node(g, binding, feat)?;
    ssl::rotation_loss(g, logits, &ssl::one_hot(&labels))
}

/// Mean task loss over the stream. Rotation is scored on every rotation;
/// MAE uses one fixed mask draw per batch.
pub fn stream_objective(net: &Network, theta: &ParamSet<f32>, stream: &TestStream, cfg: &TttConfig) -> Result<f64> {
    let mut total = 0.0;
    for batch in &stream.batches {
        let mut g = Graph::new();
        let b = Binding::constants(&mut g, theta, &[Partition::Extractor, head(cfg.task)]);
        let loss = match cfg.task {
            Task::Rotation => all_rotations_objective(&mut g, net, &b, &batch.frames)?,
            Task::Mae => {
                let mut rng = step_rng(cfg.seed, batch.id, EVAL_STEP);
                ssl_objective(&mut g, net, &b, &batch.frames, cfg.task, &mut rng)?
            }
        };
        total += g.value(loss).item()? as f64;
    }
    Ok(total / stream.len() as f64)
}

/// `ttt_epochs` passes over the whole stream, one step per batch, before
/// any prediction. The final parameters serve every batch.
pub fn naive_ttt(
    net: &Network,
    theta0: &ParamSet<f32>,
    stream: &TestStream,
    cfg: &TttConfig,
) -> Result<AdaptationState> {
    let mut theta = prepare(theta0, cfg, stream)?;
    let mut run = Runner::new(net, cfg)?;
    let mut state = AdaptationState::new(theta.clone());
    let clock = Instant::now();
    for epoch in 0..cfg.ttt_epochs {
        for (i, batch) in stream.batches.iter().enumerate() {
            run.step(&mut state, &mut theta, batch, i, epoch)?;
        }
        let objective = stream_objective(net, &theta, stream, cfg)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite {
                what: "self-supervised",
                trace: state.loss_trace,
            });
        }
        state.epoch_objective.push(objective);
    }
    let share = clock.elapsed().as_secs_f64() / stream.len() as f64;
    state.per_batch_seconds = vec![share; stream.len()];
    state.theta = theta;
    Ok(state)
}

/// Each batch adapts `ttt_epochs` steps from its own copy of `theta0`.
pub fn online_ttt(
    net: &Network,
    theta0: &ParamSet<f32>,
    stream: &TestStream,
    cfg: &TttConfig,
) -> Result<AdaptationState> {
    let base = prepare(theta0, cfg, stream)?;
    let mut state = AdaptationState::new(base.clone());
    for (i, batch) in stream.batches.iter().enumerate() {
        let clock = Instant::now();
        let mut run = Runner::new(net, cfg)?;
        let mut theta = base.clone();
        for step in 0..cfg.ttt_epochs {
            run.step(&mut state, &mut theta, batch, i, step)?;
        }
        state.per_batch_seconds.push(clock.elapsed().as_secs_f64());
        state.theta = theta.clone();
        state.per_batch.push(theta);
    }
    Ok(state)
}

/// Batches are visited once, in order; each continues from the parameters
/// left by the previous one.
pub fn minibatch_ttt(
    net: &Network,
    theta0: &ParamSet<f32>,
    stream: &TestStream,
    cfg: &TttConfig,
) -> Result<AdaptationState> {
    let mut theta = prepare(theta0, cfg, stream)?;
    let mut run = Runner::new(net, cfg)?;
    let mut state = AdaptationState::new(theta.clone());
    for (i, batch) in stream.batches.iter().enumerate() {
        let clock = Instant::now();
        for step in 0..cfg.ttt_epochs {
            run.step(&mut state, &mut theta, batch, i, step)?;
        }
        state.per_batch_seconds.push(clock.elapsed().as_secs_f64());
        state.per_batch.push(theta.clone());
    }
    state.theta = theta;
    Ok(state)
}

pub fn run_scheme(
    net: &Network,
    theta0: &ParamSet<f32>,
    stream: &TestStream,
    cfg: &TttConfig,
) -> Result<AdaptationState> {
    match cfg.scheme {
        Scheme::Naive => naive_ttt(net, theta0, stream, cfg),
        Scheme::Online => online_ttt(net, theta0, stream, cfg),
        Scheme::MiniBatch => minibatch_ttt(net, theta0, stream, cfg),
    }
}

/// Query of one test sequence: endpoints are adapted on, the target is only
/// used for scoring.
#[derive(Debug, Clone)]
pub struct Query {
    pub sequence_id: u64,
    pub first: Volume,
    pub last: Volume,
    pub t: f64,
}

/// Predictions of one scheme run.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub predictions: Vec<Volume>,
    /// Seconds per test sequence, adaptation plus prediction.
    pub per_sample_seconds: Vec<f64>,
    pub state: Option<AdaptationState>,
    /// Set when adaptation hit a non-finite loss and `theta0` predicted
    /// instead.
    pub fell_back: bool,
}

/// Adapt on the queries' endpoint frames under `cfg` (or not at all when
/// `cfg` is `None`) and predict every query frame. Ground truth is never
/// passed in.
pub fn adapt_and_predict(
    net: &Network,
    theta0: &ParamSet<f32>,
    queries: &[Query],
    cfg: Option<&TttConfig>,
) -> Result<Adapted> {
    let batch_size = cfg.map_or(1, |c| c.batch_size);
    let items = queries
        .iter()
        .map(|q| (q.sequence_id, vec![q.first.clone(), q.last.clone()]))
        .collect();
    let stream = TestStream::from_sequences(items, batch_size)?;
    let (state, fell_back) = match cfg {
        None => (None, false),
        Some(cfg) => match run_scheme(net, theta0, &stream, cfg) {
            Ok(s) => (Some(s), false),
            Err(Error::NonFinite { what, trace }) => {
                log::warn!(
                    "{} {} adaptation hit a non-finite {what} loss after {} steps; predicting with the initial parameters",
                    cfg.scheme,
                    cfg.task,
                    trace.len()
                );
                (None, true)
            }
            Err(e) => return Err(e),
        },
    };
    let mut predictions = Vec::with_capacity(queries.len());
    let mut per_sample_seconds = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let b = i / batch_size;
        let theta = state.as_ref().map_or(theta0, |s| s.theta_for(b));
        let clock = Instant::now();
        predictions.push(net.predict(theta, &q.first, &q.last, q.t)?);
        let adapt = state.as_ref().map_or(0.0, |s| {
            let members = queries.len().min((b + 1) * batch_size) - b * batch_size;
            s.per_batch_seconds[b] / members as f64
        });
        per_sample_seconds.push(adapt + clock.elapsed().as_secs_f64());
    }
    Ok(Adapted {
        predictions,
        per_sample_seconds,
        state,
        fell_back,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelConfig;
    use crate::synth::{generate_sequence, SequenceSpec};

    fn setup(m: usize) -> (Network, ParamSet<f32>, TestStream) {
        let net = Network::new(ModelConfig::tiny(8)).unwrap();
        let theta = net.init(1);
        let items = (0..m as u64)
            .map(|id| {
                let s = generate_sequence(&SequenceSpec {
                    grid_size: 8,
                    n_frames: 4,
                    seed: 100 + id,
                    ..Default::default()
                })
                .unwrap();
                (id, vec![s.first().clone(), s.last().clone()])
            })
            .collect();
        (net, theta, TestStream::from_sequences(items, 1).unwrap())
    }

    fn cfg(scheme: Scheme, task: Task, epochs: usize) -> TttConfig {
        TttConfig {
            scheme,
            task,
            ttt_epochs: epochs,
            eta: 0.05,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut p = ParamSet::new();
        p.insert("f.s", Partition::Extractor, Tensor::scalar(1.0f32)).unwrap();
        let grads = BTreeMap::from([("f.s".to_string(), Tensor::scalar(2.0f32))]);
        let mut q = p.clone();
        sgd_step(&mut q, &grads, 0.1).unwrap();
        assert_eq!(q.get("f.s").unwrap().item().unwrap(), 0.8);
        let mut r = p.clone();
        sgd_step(&mut r, &grads, 0.0).unwrap();
        assert!(r.bit_identical(&p));
        let zero = BTreeMap::from([("f.s".to_string(), Tensor::scalar(0.0f32))]);
        sgd_step(&mut r, &zero, 0.5).unwrap();
        assert!(r.bit_identical(&p));
        let unknown = BTreeMap::from([("f.t".to_string(), Tensor::scalar(0.0f32))]);
        assert!(sgd_step(&mut r, &unknown, 0.5).is_err());
    }

    #[test]
    fn frozen_everything_gives_no_gradients() {
        let (net, theta, stream) = setup(1);
        let freeze = BTreeSet::from([Group::F, Group::G]);
        for task in Task::ALL {
            let mut rng = step_rng(0, 0, 0);
            let (loss, grads) = ssl_grad(&net, &theta, &stream.batches[0].frames, task, &freeze, &mut rng).unwrap();
            assert!(loss.is_finite());
            assert!(grads.is_empty());
        }
    }

    #[test]
    fn default_freeze_restricts_gradients_to_f_and_task_head() {
        let (net, theta, stream) = setup(1);
        let mut rng = step_rng(0, 0, 0);
        let (_, grads) = ssl_grad(
            &net,
            &theta,
            &stream.batches[0].frames,
            Task::Mae,
            &BTreeSet::from([Group::H]),
            &mut rng,
        )
        .unwrap();
        assert!(grads.keys().all(|k| k.starts_with("f.") || k.starts_with("g_mae.")));
        assert!(grads.keys().any(|k| k.starts_with("g_mae.")));
    }

    #[test]
    fn zero_epochs_rejected() {
        let (net, theta, stream) = setup(1);
        assert!(matches!(
            online_ttt(&net, &theta, &stream, &cfg(Scheme::Online, Task::Rotation, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frozen_partitions_untouched_and_layout_kept() {
        let (net, theta, stream) = setup(2);
        for scheme in Scheme::ALL {
            let s = run_scheme(&net, &theta, &stream, &cfg(scheme, Task::Mae, 2)).unwrap();
            assert!(s.theta.same_layout(&theta));
            for (name, p, t) in theta.iter() {
                let after = s.theta.get(name).unwrap();
                if p == Partition::Interpolation || p == Partition::Rotation {
                    assert_eq!(after, t, "{name}");
                }
            }
            assert!(!s.theta.bit_identical(&theta));
        }
    }

    #[test]
    fn log_lines_are_json_records() {
        let (net, theta, stream) = setup(1);
        let s = online_ttt(&net, &theta, &stream, &cfg(Scheme::Online, Task::Rotation, 3)).unwrap();
        let mut buf = Vec::new();
        write_log(&mut buf, &s.log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["scheme", "task", "batch_index", "step", "loss", "elapsed_s"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert_eq!(first["scheme"], "online");
        assert_eq!(s.step_count, 3);
    }

    #[test]
    fn non_finite_loss_falls_back_to_initial_parameters() {
        let (net, mut theta, _) = setup(1);
        theta.get_mut("g_rot.fc2.bias").unwrap().data_mut()[0] = f32::NAN;
        let s = generate_sequence(&SequenceSpec {
            grid_size: 8,
            n_frames: 4,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let q = Query {
            sequence_id: 0,
            first: s.first().clone(),
            last: s.last().clone(),
            t: 0.5,
        };
        let c = cfg(Scheme::MiniBatch, Task::Rotation, 2);
        let out = adapt_and_predict(&net, &theta, std::slice::from_ref(&q), Some(&c)).unwrap();
        assert!(out.fell_back);
        let direct = net.predict(&theta, &q.first, &q.last, q.t).unwrap();
        assert_eq!(out.predictions[0], direct);
        let err = minibatch_ttt(
            &net,
            &theta,
            &TestStream::from_sequences(vec![(0, vec![q.first.clone()])], 1).unwrap(),
            &c,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn no_adaptation_equals_direct_prediction() {
        let (net, theta, _) = setup(1);
        let s = generate_sequence(&SequenceSpec {
            grid_size: 8,
            n_frames: 4,
            seed: 6,
            ..Default::default()
        })
        .unwrap();
        let q = Query {
            sequence_id: 0,
            first: s.first().clone(),
            last: s.last().clone(),
            t: 1.0 / 3.0,
        };
        let out = adapt_and_predict(&net, &theta, std::slice::from_ref(&q), None).unwrap();
        assert_eq!(out.predictions[0], net.predict(&theta, &q.first, &q.last, q.t).unwrap());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("batch".parse::<Scheme>().is_err());
    }
}
