//! Synthetic 4D phantoms: a torso-like body with a static bright structure
//! and one moving organ, sampled at `n` evenly spaced phases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    /// The organ contracts towards the last frame; `amplitude` is the
    /// fractional radius change, at most 0.5.
    PulsatingEllipsoid,
    /// The organ slides along a seeded direction; `amplitude` is the travel
    /// as a fraction of the grid, at most 0.25.
    TranslatingBlob,
}

impl Motion {
    fn max_amplitude(self) -> f64 {
        match self {
            Motion::PulsatingEllipsoid => 0.5,
            Motion::TranslatingBlob => 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    /// Edge length of the cubic grid.
    pub grid_size: usize,
    pub n_frames: usize,
    pub motion: Motion,
    pub amplitude: f64,
    /// Standard deviation of the static speckle texture.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            grid_size: 32,
            n_frames: 10,
            motion: Motion::PulsatingEllipsoid,
            amplitude: 0.35,
            noise_floor: 0.02,
            seed: 0,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 3 {
            return Err(Error::Domain(format!(
                "a sequence needs at least 3 frames, got {}",
                self.n_frames
            )));
        }
        if self.grid_size < 4 {
            return Err(Error::Domain(format!("grid size {} is too small", self.grid_size)));
        }
        let max = self.motion.max_amplitude();
        if !(0.0..=max).contains(&self.amplitude) {
            return Err(Error::Domain(format!(
                "amplitude {} outside [0, {max}] for {:?}",
                self.amplitude, self.motion
            )));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor < 0.5) {
            return Err(Error::Domain(format!(
                "noise floor {} outside [0, 0.5)",
                self.noise_floor
            )));
        }
        Ok(())
    }
}

/// Ordered frames `I_0 .. I_{n-1}` of one synthetic acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence4D {
    pub spec: SequenceSpec,
    pub frames: Vec<Volume>,
}

impl Sequence4D {
    /// Index of the frame to be predicted from the two endpoints.
    pub fn query_index(&self) -> usize {
        query_index(self.frames.len())
    }

    pub fn query_t(&self) -> f64 {
        query_t(self.frames.len())
    }

    pub fn first(&self) -> &Volume {
        &self.frames[0]
    }

    pub fn last(&self) -> &Volume {
        &self.frames[self.frames.len() - 1]
    }
}

pub fn query_index(n_frames: usize) -> usize {
    n_frames / 2
}

/// Normalized time of the query frame between frame 0 and frame `n - 1`.
pub fn query_t(n_frames: usize) -> f64 {
    query_index(n_frames) as f64 / (n_frames - 1) as f64
}

/// Smooth half-period progress: 0 at the first frame, 1 at the last.
pub fn phase(i: usize, n_frames: usize) -> f64 {
    let t = i as f64 / (n_frames - 1) as f64;
    (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
}

/// Anatomy shared by every frame of a sequence, drawn from the seed.
struct Layout {
    torso_radii: [f64; 3],
    torso_level: f64,
    spine_center: [f64; 2],
    spine_radius: f64,
    spine_level: f64,
    organ_center: [f64; 3],
    organ_radii: [f64; 3],
    organ_level: f64,
    direction: [f64; 3],
}

impl Layout {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut j = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let torso_radii = [j(0.78, 0.9), j(0.62, 0.74), j(0.72, 0.86)];
        let torso_level = j(0.2, 0.3);
        // Posterior is towards high H.
        let spine_center = [j(0.4, 0.5), j(-0.06, 0.06)];
        let spine_radius = j(0.1, 0.14);
        let spine_level = j(0.75, 0.9);
        let organ_center = [j(-0.15, 0.15), j(-0.3, -0.1), j(0.12, 0.3)];
        let organ_radii = [j(0.3, 0.38), j(0.24, 0.32), j(0.2, 0.28)];
        let organ_level = j(0.55, 0.7);
        let mut direction = [j(-1.0, 1.0), j(-1.0, 1.0), j(-1.0, 1.0)];
        let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
        direction.iter_mut().for_each(|d| *d /= norm);
        Layout {
            torso_radii,
            torso_level,
            spine_center,
            spine_radius,
            spine_level,
            organ_center,
            organ_radii,
            organ_level,
            direction,
        }
    }
}

/// Soft indicator of `r < 1` with an edge about one voxel wide.
fn soft_inside(r: f64, edge: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) / edge).exp())
}

fn render(layout: &Layout, spec: &SequenceSpec, s: f64, texture: &[f64]) -> Volume {
    let n = spec.grid_size;
    let coord = |i: usize| (2.0 * i as f64 + 1.0) / n as f64 - 1.0;
    let edge = 1.0 / n as f64;
    let (center, radii) = match spec.motion {
        Motion::PulsatingEllipsoid => {
            let k = 1.0 - spec.amplitude * s;
            (layout.organ_center, layout.organ_radii.map(|r| r * k))
        }
        Motion::TranslatingBlob => {
            // Travel of `amplitude * n` voxels is `2 * amplitude` in normalized units.
            let d = 2.0 * spec.amplitude * s;
            let mut c = layout.organ_center;
            for (ci, di) in c.iter_mut().zip(layout.direction) {
                *ci += d * di;
            }
            (c, layout.organ_radii)
        }
    };
    let mut i = 0;
    Volume::from_fn([n; 3], |z, y, x| {
        let p = [coord(z), coord(y), coord(x)];
        let torso = (0..3)
            .map(|a| (p[a] / layout.torso_radii[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let mut v = layout.torso_level * soft_inside(torso, edge / 0.8);
        let organ = (0..3)
            .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let m = soft_inside(organ, edge / radii[1]);
        v = v * (1.0 - m) + layout.organ_level * m;
        let dy = p[1] - layout.spine_center[0];
        let dx = p[2] - layout.spine_center[1];
        let spine = (dy * dy + dx * dx).sqrt() / layout.spine_radius;
        let m = soft_inside(spine, edge / layout.spine_radius) * soft_inside(p[0].abs() / 0.8, edge / 0.8);
        v = v * (1.0 - m) + layout.spine_level * m;
        v += texture[i];
        i += 1;
        v.clamp(0.0, 1.0) as f32
    })
}

/// Render every frame of the sequence described by `spec`. The speckle
/// texture is drawn once per sequence, so a zero amplitude gives identical
/// frames.
pub fn generate_sequence(spec: &SequenceSpec) -> Result<Sequence4D> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = Layout::draw(&mut rng);
    let noise = Normal::new(0.0, spec.noise_floor).map_err(|e| Error::Domain(e.to_string()))?;
    let texture: Vec<f64> = (0..spec.grid_size.pow(3)).map(|_| noise.sample(&mut rng)).collect();
    let frames = (0..spec.n_frames)
        .map(|i| render(&layout, spec, phase(i, spec.n_frames), &texture))
        .collect();
    Ok(Sequence4D {
        spec: spec.clone(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(motion: Motion, amplitude: f64, seed: u64) -> SequenceSpec {
        SequenceSpec {
            grid_size: 16,
            n_frames: 6,
            motion,
            amplitude,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_amplitude_is_static() {
        for motion in [Motion::PulsatingEllipsoid, Motion::TranslatingBlob] {
            let s = generate_sequence(&spec(motion, 0.0, 4)).unwrap();
            assert!(s.frames.iter().all(|f| f == &s.frames[0]));
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_frames() {
        let a = generate_sequence(&spec(Motion::TranslatingBlob, 0.2, 9)).unwrap();
        let b = generate_sequence(&spec(Motion::TranslatingBlob, 0.2, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pulsating_mass_is_monotone_over_the_half_period() {
        let mut sp = spec(Motion::PulsatingEllipsoid, 0.4, 2);
        sp.grid_size = 32;
        sp.n_frames = 10;
        sp.noise_floor = 0.0;
        let s = generate_sequence(&sp).unwrap();
        let mass: Vec<f64> = s.frames.iter().map(Volume::sum).collect();
        assert!(mass.windows(2).all(|w| w[1] < w[0]), "{mass:?}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_sequence(&spec(Motion::PulsatingEllipsoid, 0.7, 0)).is_err());
        assert!(generate_sequence(&spec(Motion::TranslatingBlob, 0.3, 0)).is_err());
        let mut sp = spec(Motion::TranslatingBlob, 0.1, 0);
        sp.n_frames = 2;
        assert!(generate_sequence(&sp).is_err());
    }

    #[test]
    fn query_frame_sits_mid_sequence() {
        assert_eq!(query_index(10), 5);
        assert!((query_t(10) - 5.0 / 9.0).abs() < 1e-12);
        assert_eq!(query_index(3), 1);
        assert_eq!(query_t(3), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, .. ProptestConfig::default() })]

        #[test]
        fn intensities_in_unit_range_and_endpoints_differ(
            seed in any::<u64>(),
            pulsating in any::<bool>(),
            amp in 0.05f64..0.25,
        ) {
            let motion = if pulsating { Motion::PulsatingEllipsoid } else { Motion::TranslatingBlob };
            let s = generate_sequence(&spec(motion, amp, seed)).unwrap();
            for f in &s.frames {
                prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert_ne!(s.first(), s.last());
        }
    }
}
