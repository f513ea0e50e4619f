//! Deterministic synthetic head volumes with a nested tumour.
//!
//! Geometry: an ellipsoidal head centred in the volume, containing a
//! spherical tumour with necrotic core (label 1) inside an enhancing rim
//! (label 4) inside oedema (label 2). Everything outside the head is exactly
//! zero in every modality; healthy brain keeps label 0.

use crate::error::{EmmaError, Result};
use crate::tensor::{offset4, Tensor};
use crate::volume::{LabelVolume, VolumeCase};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const MIN_EXTENT: usize = 48;

/// Mean intensity per modality and region, in units of [`INTENSITY_SCALE`].
/// Region columns: healthy brain, oedema (2), enhancing rim (4), core (1).
const REGION_MEANS: [[f64; 4]; 4] = [
    [1.0, 2.0, 1.6, 1.4], // FLAIR: oedema and tumour bright
    [1.0, 0.8, 1.1, 0.6], // T1: fluid dark
    [1.0, 0.9, 2.2, 0.7], // T1ce: rim enhances strongly
    [1.0, 1.8, 1.3, 1.5], // T2: fluid bright
];

pub const INTENSITY_SCALE: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct PhantomParams {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// Relative Gaussian noise inside the head (fraction of the scale).
    pub noise_sigma: f64,
    /// Apply a smooth multiplicative intensity field across the head.
    pub bias_field: bool,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            extents: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            noise_sigma: 0.05,
            bias_field: false,
        }
    }
}

/// Standard normal draw via Box-Muller; two uniforms per call keeps the
/// stream layout independent of rejection behaviour.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random degree-2 polynomial in [-1,1]-normalized coordinates, exponentiated
/// into a multiplicative field near 1.
struct BiasField {
    coeffs: Vec<([usize; 3], f64)>,
    extents: [usize; 3],
}

impl BiasField {
    fn random(rng: &mut ChaCha8Rng, extents: [usize; 3]) -> Self {
        let mut coeffs = Vec::new();
        for i in 0..=2usize {
            for j in 0..=2usize {
                for k in 0..=2usize {
                    if i + j + k == 0 || i + j + k > 2 {
                        continue;
                    }
                    coeffs.push(([i, j, k], rng.gen_range(-0.12..0.12)));
                }
            }
        }
        BiasField { coeffs, extents }
    }

    fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        let n = |v: usize, e: usize| {
            if e > 1 {
                2.0 * v as f64 / (e - 1) as f64 - 1.0
            } else {
                0.0
            }
        };
        let (u, v, w) = (n(z, self.extents[0]), n(y, self.extents[1]), n(x, self.extents[2]));
        let mut q = 0.0;
        for ([i, j, k], c) in &self.coeffs {
            q += c * u.powi(*i as i32) * v.powi(*j as i32) * w.powi(*k as i32);
        }
        q.exp()
    }
}

/// Generates one case and its reference labels. The same seed and parameters
/// always produce bit-identical volumes.
pub fn generate_phantom(seed: u64, params: &PhantomParams) -> Result<(VolumeCase, LabelVolume)> {
    let [d, h, w] = params.extents;
    if params.extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(EmmaError::Parameter(format!(
            "phantom extents {:?} too small, each axis must be >= {MIN_EXTENT}",
            params.extents
        )));
    }
    if !(params.noise_sigma.is_finite() && params.noise_sigma >= 0.0) {
        return Err(EmmaError::Parameter("noise_sigma must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centre = [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0];
    let semi: Vec<f64> = params
        .extents
        .iter()
        .map(|&e| e as f64 * rng.gen_range(0.42..0.46))
        .collect();
    let min_extent = *params.extents.iter().min().unwrap() as f64;

    // Tumour must sit strictly inside the head.
    let r_oedema = min_extent * rng.gen_range(0.16..0.21);
    let r_rim = 0.68 * r_oedema;
    let r_core = 0.38 * r_oedema;
    let max_off = (semi.iter().cloned().fold(f64::MAX, f64::min) * 0.85 - r_oedema).max(0.0);
    let t_centre: Vec<f64> = (0..3)
        .map(|a| centre[a] + rng.gen_range(-1.0..1.0) * max_off * 0.5)
        .collect();

    let field = BiasField::random(&mut rng, params.extents);

    let shape = [4usize, d, h, w];
    let mut modalities = Tensor::<f64>::zeros(&shape);
    let mut labels = vec![0u8; d * h * w];
    let sigma = params.noise_sigma * INTENSITY_SCALE;

    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let e = ((z as f64 - centre[0]) / semi[0]).powi(2)
                    + ((y as f64 - centre[1]) / semi[1]).powi(2)
                    + ((x as f64 - centre[2]) / semi[2]).powi(2);
                if e > 1.0 {
                    continue;
                }
                let dist = ((z as f64 - t_centre[0]).powi(2)
                    + (y as f64 - t_centre[1]).powi(2)
                    + (x as f64 - t_centre[2]).powi(2))
                .sqrt();
                let (region, label) = if dist <= r_core {
                    (3, 1u8)
                } else if dist <= r_rim {
                    (2, 4u8)
                } else if dist <= r_oedema {
                    (1, 2u8)
                } else {
                    (0, 0u8)
                };
                labels[(z * h + y) * w + x] = label;
                let gain = if params.bias_field { field.at(z, y, x) } else { 1.0 };
                for m in 0..4 {
                    let mean = REGION_MEANS[m][region] * INTENSITY_SCALE;
                    let v = mean * gain + sigma * normal(&mut rng);
                    modalities.data_mut()[offset4(&shape, m, z, y, x)] = v;
                }
            }
        }
    }

    for lab in [1u8, 2, 4] {
        if !labels.contains(&lab) {
            return Err(EmmaError::Numeric(format!(
                "phantom generation failed to place label {lab}; geometry bug"
            )));
        }
    }

    let case = VolumeCase {
        id: format!("phantom-{seed:04}"),
        spacing: params.spacing,
        modalities,
    };
    let seg = LabelVolume::new(params.extents, params.spacing, labels)?;
    Ok((case, seg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let p = PhantomParams::default();
        let (a, sa) = generate_phantom(11, &p).unwrap();
        let (b, sb) = generate_phantom(11, &p).unwrap();
        assert_eq!(a.modalities.data(), b.modalities.data());
        assert_eq!(sa.labels, sb.labels);
    }

    #[test]
    fn different_seeds_differ() {
        let p = PhantomParams::default();
        let (a, _) = generate_phantom(1, &p).unwrap();
        let (b, _) = generate_phantom(2, &p).unwrap();
        assert_ne!(a.modalities.data(), b.modalities.data());
    }

    #[test]
    fn all_tumour_labels_present_and_nested() {
        let (_, seg) = generate_phantom(3, &PhantomParams::default()).unwrap();
        for lab in [1u8, 2, 4] {
            assert!(seg.labels.contains(&lab), "label {lab} missing");
        }
        // Core is the smallest region, oedema the largest.
        let count = |l: u8| seg.labels.iter().filter(|&&v| v == l).count();
        assert!(count(1) < count(4) && count(4) < count(2));
    }

    #[test]
    fn background_is_exactly_zero_in_every_modality() {
        let (case, seg) = generate_phantom(5, &PhantomParams::default()).unwrap();
        let [d, h, w] = case.extents();
        let shape = [4usize, d, h, w];
        // The volume corner lies outside the head ellipsoid.
        for m in 0..4 {
            assert_eq!(case.modalities.data()[offset4(&shape, m, 0, 0, 0)], 0.0);
        }
        assert_eq!(seg.labels[0], 0);
        // And brain voxels are not zero.
        let c = offset4(&shape, 0, d / 2, h / 2, w / 2);
        assert!(case.modalities.data()[c] != 0.0);
    }

    #[test]
    fn small_extents_are_a_parameter_error() {
        let p = PhantomParams { extents: [32, 64, 64], ..PhantomParams::default() };
        let err = generate_phantom(1, &p).unwrap_err();
        assert!(matches!(err, EmmaError::Parameter(_)), "got {err}");
    }

    #[test]
    fn bias_field_changes_intensities_but_not_labels() {
        let base = PhantomParams::default();
        let biased = PhantomParams { bias_field: true, ..PhantomParams::default() };
        let (a, sa) = generate_phantom(9, &base).unwrap();
        let (b, sb) = generate_phantom(9, &biased).unwrap();
        assert_eq!(sa.labels, sb.labels);
        assert_ne!(a.modalities.data(), b.modalities.data());
    }
}
