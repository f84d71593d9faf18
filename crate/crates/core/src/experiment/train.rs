//! Pre-deployment training of all four partitions on the joint objective
//! `interpolation MSE + aux_weight * (rotation loss + reconstruction loss)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttadapt_tensor::{Graph, Tensor};

use super::config::{derive_seed, ExperimentConfig, Split};
use super::dataset::DatasetReader;
use super::evaluate::checkpoint_path;
use crate::nets::{Binding, Network};
use crate::params::{save_checkpoint, ParamSet, Partition};
use crate::ssl::Task;
use crate::synth::Sequence4D;
use crate::ttt::{ssl_objective, Adam};
use crate::{Error, Result};

/// Mean losses of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub interpolation: f64,
    pub rotation: f64,
    pub mae: f64,
}

/// Loss terms of one training example, recorded on `g`. Returns
/// `(total, interpolation, rotation, mae)` values and the total node.
fn example_loss(
    g: &mut Graph<f32>,
    net: &Network,
    b: &Binding,
    seq: &Sequence4D,
    q: usize,
    aux_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ttadapt_tensor::NodeId, [f64; 3])> {
    let n = seq.frames.len();
    let t = q as f64 / (n - 1) as f64;
    let x0 = g.constant(seq.first().to_tensor());
    let x1 = g.constant(seq.last().to_tensor());
    let f0 = net.extract_node(g, b, x0)?;
    let f1 = net.extract_node(g, b, x1)?;
    let pred = net.interpolate_node(g, b, f0, f1, x0, x1, t)?;
    let target = g.constant(seq.frames[q].to_tensor());
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let interp = g.mean(sq);

    let endpoints = [seq.first().clone(), seq.last().clone()];
    let rot = ssl_objective(g, net, b, &endpoints, Task::Rotation, rng)?;
    let mae = ssl_objective(g, net, b, &endpoints, Task::Mae, rng)?;
    let aux = g.add(rot, mae)?;
    let aux = g.scale(aux, aux_weight as f32);
    let total = g.add(interp, aux)?;
    let v = |id| g.value(id).item().map(|x: f32| x as f64);
    Ok((total, [v(interp)?, v(rot)?, v(mae)?]))
}

/// Train from the seeded initialization. Each epoch visits every sequence
/// once in a seeded order, predicting a uniformly drawn interior frame.
pub fn train(net: &Network, cfg: &ExperimentConfig, data: &[Sequence4D]) -> Result<(ParamSet<f32>, Vec<EpochRecord>)> {
    let mut theta = net.init::<f32>(derive_seed(cfg.seed, "init", 0));
    let tc = &cfg.train;
    if tc.epochs > 0 && data.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    let mut adam = Adam::new(tc.lr);
    let mut log = Vec::with_capacity(tc.epochs);
    let all = Partition::ALL;
    for epoch in 0..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-epoch", epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(tc.batch_size) {
            let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for &i in chunk {
                let seq = &data[i];
                let q = rng.random_range(1..seq.frames.len() - 1);
                let mut g = Graph::new();
                let b = Binding::new(&mut g, &theta, &all, |_| true);
                let (loss, parts) = example_loss(&mut g, net, &b, seq, q, tc.aux_weight, &mut rng)?;
                let value = g.value(loss).item()? as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        what: "training",
                        trace: log.iter().map(|r: &EpochRecord| r.loss).collect(),
                    });
                }
                sums[0] += value;
                for k in 0..3 {
                    sums[k + 1] += parts[k];
                }
                for (name, grad) in g.backward(loss)?.into_named() {
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&grad)?,
                        None => {
                            acc.insert(name, grad);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            for g in acc.values_mut() {
                *g = g.scale(scale);
            }
            adam.step(&mut theta, &acc)?;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: sums[0] / n,
            interpolation: sums[1] / n,
            rotation: sums[2] / n,
            mae: sums[3] / n,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (interp {:.6}, rot {:.4}, mae {:.5})",
            record.loss,
            record.interpolation,
            record.rotation,
            record.mae
        );
        log.push(record);
    }
    Ok((theta, log))
}

pub const TRAIN_LOG: &str = "train_log.jsonl";

/// The `train` command: reads the train split of `<root>/dataset`, writes
/// the checkpoint, a JSON-lines epoch log and the resolved config into
/// `root`.
pub fn run_train(cfg: &ExperimentConfig, root: &Path) -> Result<(ParamSet<f32>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let reader = DatasetReader::open(root)?;
    let n = reader.count(Split::Train)?;
    let data = (0..n).map(|i| reader.train_sequence(i)).collect::<Result<Vec<_>>>()?;
    if let Some(s) = data.iter().find(|s| s.spec.grid_size != cfg.model.grid_size) {
        return Err(Error::Data(format!(
            "dataset grid {} does not match model grid {}",
            s.spec.grid_size, cfg.model.grid_size
        )));
    }
    let net = Network::new(cfg.model.clone())?;
    let (theta, log) = train(&net, cfg, &data)?;
    save_checkpoint(&checkpoint_path(root), &theta, &cfg.model)?;
    let path = root.join(TRAIN_LOG);
    let mut file = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for r in &log {
        writeln!(file, "{}", serde_json::to_string(r).expect("serializable")).map_err(|e| Error::io(&path, e))?;
    }
    file.flush().map_err(|e| Error::io(&path, e))?;
    cfg.save(&root.join("config.json"))?;
    Ok((theta, log))
}
