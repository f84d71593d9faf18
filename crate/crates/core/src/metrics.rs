//! Image-quality metrics for volume pairs and the linear-blend reference
//! predictor.
//!
//! All accumulation is done in `f64` in voxel index order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::volume::Volume;
use crate::{Error, Result};

/// Peak signal-to-noise ratio; `Identical` when the mean squared error is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    /// Decibels, with `Identical` mapped to positive infinity.
    pub fn value(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4} dB"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

fn pairs<'a>(pred: &'a Volume, truth: &'a Volume, what: &str) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.dims() != truth.dims() {
        return Err(Error::Metric(format!(
            "{what}: shapes differ, {:?} vs {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p as f64, t as f64)))
}

pub fn mse(pred: &Volume, truth: &Volume) -> Result<f64> {
    let n = pred.len().max(1) as f64;
    Ok(pairs(pred, truth, "mse")?.map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (data_range * data_range / mse).log10())
    }
}

pub fn psnr(pred: &Volume, truth: &Volume, data_range: f64) -> Result<Psnr> {
    Ok(psnr_from_mse(mse(pred, truth)?, data_range))
}

/// Global Pearson correlation over all voxels.
pub fn ncc(pred: &Volume, truth: &Volume) -> Result<f64> {
    let n = pred.len() as f64;
    let (sp, st) = pairs(pred, truth, "ncc")?.fold((0.0, 0.0), |(a, b), (p, t)| (a + p, b + t));
    let (mp, mt) = (sp / n, st / n);
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pairs(pred, truth, "ncc")? {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::Metric("ncc of a constant volume".into()));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Normalized squared error, `100 * sum((p - t)^2) / sum(t^2)`.
pub fn nmse(pred: &Volume, truth: &Volume) -> Result<f64> {
    let (num, den) = pairs(pred, truth, "nmse")?.fold((0.0, 0.0), |(a, b), (p, t)| (a + (p - t) * (p - t), b + t * t));
    if den == 0.0 {
        return Err(Error::Metric("nmse against an all-zero reference".into()));
    }
    Ok(100.0 * num / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Edge length of the cubic box window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// SSIM of one window from its population moments.
pub fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, p: &SsimParams) -> f64 {
    let (c1, c2) = (p.c1(), p.c2());
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// 3D summed-area table with a zero border, `(D+1) x (H+1) x (W+1)`.
struct Integral {
    dims: [usize; 3],
    table: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], value: impl Fn(usize) -> f64) -> Self {
        let [d, h, w] = dims;
        let (sh, sw) = (h + 1, w + 1);
        let mut table = vec![0.0; (d + 1) * sh * sw];
        let at = |z: usize, y: usize, x: usize| (z * sh + y) * sw + x;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = value((z * h + y) * w + x);
                    table[at(z + 1, y + 1, x + 1)] =
                        v + table[at(z, y + 1, x + 1)] + table[at(z + 1, y, x + 1)] + table[at(z + 1, y + 1, x)]
                            - table[at(z, y, x + 1)]
                            - table[at(z, y + 1, x)]
                            - table[at(z + 1, y, x)]
                            + table[at(z, y, x)];
                }
            }
        }
        Integral { dims, table }
    }

    /// Sum over the box `[z, z+k) x [y, y+k) x [x, x+k)`.
    fn box_sum(&self, z: usize, y: usize, x: usize, k: usize) -> f64 {
        let (sh, sw) = (self.dims[1] + 1, self.dims[2] + 1);
        let t = |z: usize, y: usize, x: usize| self.table[(z * sh + y) * sw + x];
        let (z1, y1, x1) = (z + k, y + k, x + k);
        t(z1, y1, x1) - t(z, y1, x1) - t(z1, y, x1) - t(z1, y1, x) + t(z, y, x1) + t(z, y1, x) + t(z1, y, x)
            - t(z, y, x)
    }
}

/// Mean SSIM over every fully contained box window (no padding).
pub fn ssim_with(pred: &Volume, truth: &Volume, p: &SsimParams) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::Metric(format!(
            "ssim: shapes differ, {:?} vs {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let dims = pred.dims();
    let k = p.window;
    if k == 0 || dims.iter().any(|&e| e < k) {
        return Err(Error::Metric(format!("volume {dims:?} smaller than {k}^3 window")));
    }
    let (a, b) = (pred.data(), truth.data());
    let sx = Integral::new(dims, |i| a[i] as f64);
    let sy = Integral::new(dims, |i| b[i] as f64);
    let sxx = Integral::new(dims, |i| (a[i] as f64).powi(2));
    let syy = Integral::new(dims, |i| (b[i] as f64).powi(2));
    let sxy = Integral::new(dims, |i| a[i] as f64 * b[i] as f64);
    let n = (k * k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=dims[0] - k {
        for y in 0..=dims[1] - k {
            for x in 0..=dims[2] - k {
                let mx = sx.box_sum(z, y, x, k) / n;
                let my = sy.box_sum(z, y, x, k) / n;
                // Clamp tiny negative variances left by cancellation.
                let vx = (sxx.box_sum(z, y, x, k) / n - mx * mx).max(0.0);
                let vy = (syy.box_sum(z, y, x, k) / n - my * my).max(0.0);
                let cxy = sxy.box_sum(z, y, x, k) / n - mx * my;
                total += ssim_from_moments(mx, my, vx, vy, cxy, p);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn ssim(pred: &Volume, truth: &Volume) -> Result<f64> {
    ssim_with(pred, truth, &SsimParams::default())
}

/// `(1 - t) * i0 + t * i1`.
pub fn linear_blend_baseline(i0: &Volume, i1: &Volume, t: f64) -> Result<Volume> {
    i0.same_dims(i1, "linear blend")?;
    let data = i0
        .data()
        .iter()
        .zip(i1.data())
        .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
        .collect();
    Volume::new(i0.dims(), data)
}

/// All four metrics for one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ncc: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl MetricReport {
    pub fn evaluate(pred: &Volume, truth: &Volume) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(pred, truth, 1.0)?,
            ncc: ncc(pred, truth)?,
            ssim: ssim(pred, truth)?,
            nmse: nmse(pred, truth)?,
        })
    }

    /// `(name, value)` pairs in reporting order.
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("psnr", self.psnr.value()),
            ("ncc", self.ncc),
            ("ssim", self.ssim),
            ("nmse", self.nmse),
        ]
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot aggregate zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ±{:.3}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    /// Straightforward loop-per-window SSIM with two-pass moments.
    fn ssim_reference(a: &Volume, b: &Volume, p: &SsimParams) -> f64 {
        let [d, h, w] = a.dims();
        let k = p.window;
        let mut total = 0.0;
        let mut count = 0.0;
        for z in 0..=d - k {
            for y in 0..=h - k {
                for x in 0..=w - k {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for dz in 0..k {
                        for dy in 0..k {
                            for dx in 0..k {
                                xs.push(a.get(z + dz, y + dy, x + dx) as f64);
                                ys.push(b.get(z + dz, y + dy, x + dx) as f64);
                            }
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                    let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                    let c = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / n;
                    let l = (2.0 * mx * my + p.c1()) / (mx * mx + my * my + p.c1());
                    let cs = (2.0 * c + p.c2()) / (vx + vy + p.c2());
                    total += l * cs;
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn psnr_examples() {
        let v = random_volume([4, 4, 4], 1);
        assert_eq!(psnr(&v, &v, 1.0).unwrap(), Psnr::Identical);
        assert!((psnr_from_mse(0.01, 1.0).value() - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(1e-4, 1.0).value() - 40.0).abs() < 1e-12);
        let zeros = Volume::zeros([4, 4, 4]);
        let tenth = Volume::filled([4, 4, 4], 0.1);
        assert!((psnr(&tenth, &zeros, 1.0).unwrap().value() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ncc_examples() {
        let v = random_volume([5, 4, 3], 2);
        assert!((ncc(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg = v.map(|x| 0.7 - x);
        assert!((ncc(&neg, &v).unwrap() + 1.0).abs() < 1e-6);
        let aff = v.map(|x| 2.5 * x + 0.3);
        assert!((ncc(&aff, &v).unwrap() - 1.0).abs() < 1e-6);
        assert!(ncc(&Volume::filled([2, 2, 2], 0.3), &v.map(|x| x)).is_err());
    }

    #[test]
    fn nmse_examples() {
        let v = random_volume([4, 4, 4], 3);
        assert_eq!(nmse(&v, &v).unwrap(), 0.0);
        let double = v.map(|x| 2.0 * x);
        assert!((nmse(&double, &v).unwrap() - 100.0).abs() < 1e-9);
        assert!((nmse(&Volume::zeros([4, 4, 4]), &v).unwrap() - 100.0).abs() < 1e-12);
        assert!(nmse(&v, &Volume::zeros([4, 4, 4])).is_err());
    }

    #[test]
    fn ssim_examples() {
        let v = random_volume([9, 8, 10], 4);
        assert!((ssim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let p = SsimParams::default();
        let shifted = v.map(|x| x + 0.1);
        let s = ssim(&shifted, &v).unwrap();
        assert!(s < 1.0);
        assert!((s - ssim_reference(&shifted, &v, &p)).abs() < 1e-6);
        assert!(ssim(&Volume::zeros([6, 8, 8]), &Volume::zeros([6, 8, 8])).is_err());
    }

    #[test]
    fn ssim_matches_scalar_reference_on_random_pairs() {
        let p = SsimParams::default();
        for seed in 0..10 {
            let a = random_volume([10, 9, 11], seed);
            let b = random_volume([10, 9, 11], seed + 100).map(|x| 0.5 * x + 0.25);
            let fast = ssim_with(&a, &b, &p).unwrap();
            let slow = ssim_reference(&a, &b, &p);
            assert!((fast - slow).abs() < 1e-6, "{seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn blend_examples() {
        let v = random_volume([3, 3, 3], 5);
        assert_eq!(linear_blend_baseline(&v, &v, 0.3).unwrap(), v);
        let half = linear_blend_baseline(&Volume::zeros([2, 2, 2]), &Volume::filled([2, 2, 2], 1.0), 0.5).unwrap();
        assert!(half.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn aggregation_uses_population_std() {
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        let one = MeanStd::of(&[33.7]).unwrap();
        assert_eq!(one.std, 0.0);
        assert!(MeanStd::of(&[]).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let truth = random_volume([8, 8, 8], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise: Vec<f32> = (0..truth.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let levels = [0.01f32, 0.02, 0.05, 0.1, 0.2];
        let values: Vec<f64> = levels
            .iter()
            .map(|&s| {
                let pred = Volume::new(
                    truth.dims(),
                    truth.data().iter().zip(&noise).map(|(t, n)| t + s * n).collect(),
                )
                .unwrap();
                psnr(&pred, &truth, 1.0).unwrap().value()
            })
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 32, .. ProptestConfig::default() })]

        #[test]
        fn metrics_are_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_volume([8, 7, 9], s1);
            let b = random_volume([8, 7, 9], s2);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            let (n1, n2) = (ncc(&a, &b).unwrap(), ncc(&b, &a).unwrap());
            prop_assert!((n1 - n2).abs() < 1e-6 && (-1.0..=1.0).contains(&n1));
            let (q1, q2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((q1 - q2).abs() < 1e-6 && (-1.0..=1.0).contains(&q1));
        }

        #[test]
        fn nmse_zero_iff_equal(s in any::<u64>(), idx in 0usize..64, delta in 1e-3f32..0.5) {
            let truth = random_volume([4, 4, 4], s);
            prop_assert_eq!(nmse(&truth, &truth).unwrap(), 0.0);
            let mut pred = truth.clone();
            pred.data_mut()[idx] += delta;
            prop_assert!(nmse(&pred, &truth).unwrap() > 0.0);
        }
    }
}
