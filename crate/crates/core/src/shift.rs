//! Intensity perturbations standing in for scanner and protocol differences
//! between training and deployment data.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// `v * (1 + magnitude)`.
    IntensityGain,
    /// `v ^ (1 + magnitude)`.
    Gamma,
    /// Additive iid Gaussian noise with standard deviation `magnitude`.
    GaussianNoise,
    /// Separable Gaussian smoothing with standard deviation `magnitude` voxels.
    GaussianBlur,
    /// Multiplicative linear ramp `1 + magnitude * r` with `r` in `[-1, 1]`
    /// along a seeded direction.
    BiasField,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 5] = [
        ShiftKind::IntensityGain,
        ShiftKind::Gamma,
        ShiftKind::GaussianNoise,
        ShiftKind::GaussianBlur,
        ShiftKind::BiasField,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::IntensityGain => "intensity-gain",
            ShiftKind::Gamma => "gamma",
            ShiftKind::GaussianNoise => "gaussian-noise",
            ShiftKind::GaussianBlur => "gaussian-blur",
            ShiftKind::BiasField => "bias-field",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, magnitude: f64, seed: u64) -> Self {
        ShiftSpec { kind, magnitude, seed }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ShiftKind::IntensityGain | ShiftKind::Gamma => self.magnitude > -1.0,
            ShiftKind::GaussianNoise | ShiftKind::GaussianBlur => self.magnitude >= 0.0,
            ShiftKind::BiasField => (0.0..=1.0).contains(&self.magnitude),
        };
        if !ok || !self.magnitude.is_finite() {
            return Err(Error::Config(format!(
                "{} magnitude {} out of range",
                self.kind, self.magnitude
            )));
        }
        Ok(())
    }
}

fn clip(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Apply one shift. Zero magnitude returns the input unchanged.
pub fn apply_shift(volume: &Volume, shift: &ShiftSpec) -> Result<Volume> {
    shift.validate()?;
    if shift.magnitude == 0.0 {
        return Ok(volume.clone());
    }
    let m = shift.magnitude;
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    Ok(match shift.kind {
        ShiftKind::IntensityGain => volume.map(|v| clip(v as f64 * (1.0 + m))),
        ShiftKind::Gamma => volume.map(|v| clip((v as f64).max(0.0).powf(1.0 + m))),
        ShiftKind::GaussianNoise => {
            let normal = Normal::new(0.0, m).map_err(|e| Error::Config(e.to_string()))?;
            let mut out = volume.clone();
            for v in out.data_mut() {
                *v = clip(*v as f64 + normal.sample(&mut rng));
            }
            out
        }
        ShiftKind::GaussianBlur => gaussian_blur(volume, m),
        ShiftKind::BiasField => {
            let mut dir = [0.0f64; 3];
            for d in &mut dir {
                *d = rng.random_range(-1.0..1.0);
            }
            // Scale so the ramp spans at most [-1, 1] over the unit cube.
            let l1 = dir.iter().map(|d| d.abs()).sum::<f64>().max(1e-6);
            let [d, h, w] = volume.dims();
            let c = |i: usize, n: usize| (2.0 * i as f64 + 1.0) / n as f64 - 1.0;
            let mut i = 0;
            Volume::from_fn(volume.dims(), |z, y, x| {
                let r = (dir[0] * c(z, d) + dir[1] * c(y, h) + dir[2] * c(x, w)) / l1;
                let v = volume.data()[i] as f64 * (1.0 + m * r);
                i += 1;
                clip(v)
            })
        }
    })
}

/// Apply shifts in list order.
pub fn apply_shifts(volume: &Volume, shifts: &[ShiftSpec]) -> Result<Volume> {
    let mut out = volume.clone();
    for s in shifts {
        out = apply_shift(&out, s)?;
    }
    Ok(out)
}

fn gaussian_blur(volume: &Volume, sigma: f64) -> Volume {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let dims = volume.dims();
    let mut cur: Vec<f64> = volume.data().iter().map(|&v| v as f64).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (flat, out) in next.iter_mut().enumerate() {
            let pos = (flat / strides[axis] % dims[axis]) as isize;
            let base = flat - pos as usize * strides[axis];
            // Clamp-to-edge boundary.
            *out = taps
                .iter()
                .enumerate()
                .map(|(k, &wk)| {
                    let p = (pos + k as isize - radius).clamp(0, n - 1) as usize;
                    wk * cur[base + p * strides[axis]]
                })
                .sum();
        }
        cur = next;
    }
    Volume::new(dims, cur.into_iter().map(clip).collect()).expect("blur keeps dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, SequenceSpec};

    fn phantom() -> Volume {
        let spec = SequenceSpec::default();
        generate_sequence(&spec).unwrap().frames[0].clone()
    }

    #[test]
    fn zero_magnitude_is_bit_identity() {
        let v = phantom();
        for kind in ShiftKind::ALL {
            assert_eq!(apply_shift(&v, &ShiftSpec::new(kind, 0.0, 3)).unwrap(), v, "{kind}");
        }
    }

    #[test]
    fn gain_scales_unclipped_voxels_exactly() {
        let v = phantom();
        let out = apply_shift(&v, &ShiftSpec::new(ShiftKind::IntensityGain, 0.3, 0)).unwrap();
        let mut checked = 0;
        for (&a, &b) in v.data().iter().zip(out.data()) {
            if (a as f64) * 1.3 < 1.0 {
                assert_eq!(b, (a as f64 * 1.3) as f32);
                checked += 1;
            } else {
                assert_eq!(b, 1.0);
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn noise_standard_deviation_matches_magnitude() {
        let v = phantom();
        let sigma = 0.05;
        let out = apply_shift(&v, &ShiftSpec::new(ShiftKind::GaussianNoise, sigma, 11)).unwrap();
        // Voxels four sigma away from either clip bound almost never saturate.
        let diffs: Vec<f64> = v
            .data()
            .iter()
            .zip(out.data())
            .filter(|(&a, _)| (a as f64) > 4.0 * sigma && (a as f64) < 1.0 - 4.0 * sigma)
            .map(|(&a, &b)| (b - a) as f64)
            .collect();
        assert!(diffs.len() > 3000, "{}", diffs.len());
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((sd - sigma).abs() < 0.1 * sigma, "{sd}");
    }

    #[test]
    fn every_kind_stays_in_unit_range_and_is_deterministic() {
        let v = phantom();
        for kind in ShiftKind::ALL {
            let s = ShiftSpec::new(kind, 0.6, 5);
            let a = apply_shift(&v, &s).unwrap();
            assert!(a.data().iter().all(|x| (0.0..=1.0).contains(x)), "{kind}");
            assert_eq!(a, apply_shift(&v, &s).unwrap());
            assert_ne!(a, v, "{kind}");
        }
    }

    #[test]
    fn blur_preserves_constant_volumes() {
        let v = Volume::filled([6, 5, 4], 0.4);
        let out = apply_shift(&v, &ShiftSpec::new(ShiftKind::GaussianBlur, 1.2, 0)).unwrap();
        assert!(out.data().iter().all(|x| (x - 0.4).abs() < 1e-6));
    }

    #[test]
    fn unknown_kind_and_bad_magnitude_are_errors() {
        assert!("contrast".parse::<ShiftKind>().is_err());
        assert_eq!("bias-field".parse::<ShiftKind>().unwrap(), ShiftKind::BiasField);
        assert!(serde_json::from_str::<ShiftSpec>(r#"{"kind":"warp","magnitude":1,"seed":0}"#).is_err());
        let v = Volume::zeros([2, 2, 2]);
        assert!(apply_shift(&v, &ShiftSpec::new(ShiftKind::GaussianNoise, -0.1, 0)).is_err());
    }

    #[test]
    fn recorded_shift_list_reproduces_output() {
        let v = phantom();
        let list = vec![
            ShiftSpec::new(ShiftKind::BiasField, 0.2, 1),
            ShiftSpec::new(ShiftKind::GaussianNoise, 0.02, 2),
        ];
        let json = serde_json::to_string(&list).unwrap();
        let back: Vec<ShiftSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(apply_shifts(&v, &list).unwrap(), apply_shifts(&v, &back).unwrap());
    }
}
