//! Every differentiable op against central finite differences in f64.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttadapt_tensor::kernels::Upsample;
use ttadapt_tensor::{grad_check, GradCheckOptions, Graph, NodeId, Result, Tensor};

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Contract a node with a fixed random weight so the check sees a
/// non-trivial scalar function of every output element.
fn project(g: &mut Graph<f64>, node: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(g.shape(node), &mut rng);
    let w = g.constant(w);
    let m = g.mul(node, w)?;
    Ok(g.sum(m))
}

fn check<F>(point: Vec<Tensor<f64>>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let opts = GradCheckOptions {
        max_coords_per_tensor: Some(40),
        seed,
        ..Default::default()
    };
    grad_check(
        |g, ids| {
            let out = f(g, ids)?;
            project(g, out, seed)
        },
        &point,
        &opts,
    )
    .unwrap()
    .max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, .. ProptestConfig::default() })]

    #[test]
    fn conv3d(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2, c in 1usize..3, f in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, c, 4, 5, 4], &mut rng);
        let k = rand_tensor(&[f, c, 3, 2, 3], &mut rng);
        let b = rand_tensor(&[f], &mut rng);
        let err = check(vec![x, k, b], seed, |g, ids| g.conv3d(ids[0], ids[1], Some(ids[2]), stride, pad));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn dense(seed in any::<u64>(), n in 1usize..4, k in 1usize..6, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = vec![rand_tensor(&[n, k], &mut rng), rand_tensor(&[k, m], &mut rng), rand_tensor(&[m], &mut rng)];
        let err = check(pts, seed, |g, ids| g.dense(ids[0], ids[1], ids[2]));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn relu(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep values away from the kink so central differences are valid.
        let x = Tensor::from_fn(&[3, 7], |_| {
            let v: f64 = rng.random_range(0.01..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let err = check(vec![x], seed, |g, ids| Ok(g.relu(ids[0])));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn max_pool3d(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[1, 2, 4, 4, 6], &mut rng);
        let err = check(vec![x], seed, |g, ids| g.max_pool3d(ids[0], 2));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn upsample(seed in any::<u64>(), trilinear in any::<bool>(), factor in 1usize..4) {
        let mode = if trilinear { Upsample::Trilinear } else { Upsample::Nearest };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[1, 2, 2, 3, 2], &mut rng);
        let err = check(vec![x], seed, |g, ids| g.upsample3d(ids[0], factor, mode));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn means_and_sums(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 3, 2, 2, 3], &mut rng);
        let err = check(vec![x.clone()], seed, |g, ids| g.spatial_mean(ids[0]));
        prop_assert!(err < TOL, "{err}");
        let err = check(vec![x.clone()], seed, |g, ids| Ok(g.mean(ids[0])));
        prop_assert!(err < TOL, "{err}");
        let err = check(vec![x], seed, |g, ids| Ok(g.sum(ids[0])));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_family(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[3, 4], &mut rng).scale(3.0);
        let err = check(vec![x.clone()], seed, |g, ids| g.softmax(ids[0]));
        prop_assert!(err < TOL, "{err}");
        let err = check(vec![x], seed, |g, ids| g.log_softmax(ids[0]));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[2, 5], &mut rng);
        let b = rand_tensor(&[2, 5], &mut rng);
        let pts = vec![a, b];
        prop_assert!(check(pts.clone(), seed, |g, ids| g.add(ids[0], ids[1])) < TOL);
        prop_assert!(check(pts.clone(), seed, |g, ids| g.sub(ids[0], ids[1])) < TOL);
        prop_assert!(check(pts.clone(), seed, |g, ids| g.mul(ids[0], ids[1])) < TOL);
        prop_assert!(check(pts, seed, |g, ids| Ok(g.scale(ids[0], -2.5))) < TOL);
    }

    #[test]
    fn reshape_and_concat(seed in any::<u64>(), axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[2, 3, 2], &mut rng);
        let mut other = vec![2, 3, 2];
        other[axis] = 1;
        let b = rand_tensor(&other, &mut rng);
        prop_assert!(check(vec![a.clone(), b], seed, |g, ids| g.concat(&[ids[0], ids[1]], axis)) < TOL);
        prop_assert!(check(vec![a], seed, |g, ids| g.reshape(ids[0], &[3, 4])) < TOL);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f32> = Tensor::uniform(&[2, 3, 8, 8, 8], -1.0, 1.0, &mut rng);
    let k: Tensor<f32> = Tensor::uniform(&[5, 3, 3, 3, 3], -1.0, 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let ki = g.param("k", k.clone());
        let y = g.conv3d(xi, ki, None, 1, 1).unwrap();
        let p = g.max_pool3d(y, 2).unwrap();
        let u = g.upsample3d(p, 2, Upsample::Trilinear).unwrap();
        let s = g.mean(u);
        let grads = g.backward(s).unwrap();
        (g.value(u).clone(), grads.param("k").unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, .. ProptestConfig::default() })]

    #[test]
    fn conv3d_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[1, 2, 5, 4, 6], &mut rng);
        let y = rand_tensor(&[1, 2, 5, 4, 6], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
        let conv = |t: &Tensor<f64>| ttadapt_tensor::kernels::conv3d(t, &k, None, 1, 1).unwrap();
        let lhs = conv(&x.scale(a).add(&y.scale(b)).unwrap());
        let rhs = conv(&x).scale(a).add(&conv(&y).scale(b)).unwrap();
        let scale = rhs.max_abs().max(1e-12);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() / scale < 1e-6);
        }
    }
}
