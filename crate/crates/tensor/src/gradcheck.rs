use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, NodeId, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (tensor index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(f: &F, point: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = point.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite(format!("function value {value}")));
    }
    Ok((g, ids, loss))
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences at `point`.
///
/// `f` receives a fresh graph and one differentiable leaf per tensor in
/// `point` and returns the scalar output node.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.eps > 0.0) {
        return Err(TensorError::invalid("grad_check", "eps must be positive"));
    }
    let (graph, ids, loss) = evaluate(&f, point)?;
    let grads = graph.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut probe = point.to_vec();
    for (ti, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every variable gets a gradient");
        let n = point[ti].len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = point[ti].data()[c];
            probe[ti].data_mut()[c] = orig + opts.eps;
            let (plus_graph, _, plus_loss) = evaluate(&f, &probe)?;
            let fp = plus_graph.value(plus_loss).item()?;
            probe[ti].data_mut()[c] = orig - opts.eps;
            let (minus_graph, _, minus_loss) = evaluate(&f, &probe)?;
            let fm = minus_graph.value(minus_loss).item()?;
            probe[ti].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_roundoff() {
        let p = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let report = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                Ok(g.sum(sq))
            },
            &[p],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.coords_checked, 12);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let p = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, f64::NAN, 1.0]).unwrap();
        let err = grad_check(|g, ids| Ok(g.sum(ids[0])), &[p], &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }

    #[test]
    fn coordinate_sampling_limits_work() {
        let p = Tensor::from_fn(&[100], |i| i as f64 * 0.01);
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(7),
            ..Default::default()
        };
        let report = grad_check(|g, ids| Ok(g.mean(ids[0])), &[p], &opts).unwrap();
        assert_eq!(report.coords_checked, 7);
    }
}
