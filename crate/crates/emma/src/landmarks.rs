//! Histogram landmark standardization across cases.
//!
//! Training collects per-modality intensity percentiles from each case,
//! rescales them affinely so the 1st and 99th percentiles land on [0, 100],
//! and averages across cases into a standard scale. Application maps a new
//! case's intensities piecewise-linearly so its own percentile knots land
//! exactly on the standard scale, extending the terminal segments' slopes
//! beyond the outermost knots.

use crate::error::{EmmaError, Result};
use crate::fsio;
use crate::preprocess::Mask;
use crate::tensor::Tensor;
use crate::volume::MODALITIES;
use std::collections::BTreeMap;
use std::path::Path;

/// Percentile positions of the landmark knots.
pub const LANDMARK_PERCENTILES: [f64; 11] =
    [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

/// Lower and upper ends of the standard scale.
pub const SCALE_RANGE: [f64; 2] = [0.0, 100.0];

/// Per-modality standard scale values, one per landmark percentile.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    pub scales: BTreeMap<String, Vec<f64>>,
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Masked intensities of one modality, sorted ascending.
fn masked_sorted(volume: &Tensor<f64>, modality: usize, mask: &Mask) -> Vec<f64> {
    let vol = volume.channel_volume();
    let chunk = &volume.data()[modality * vol..(modality + 1) * vol];
    let mut vals: Vec<f64> =
        chunk.iter().zip(mask.inside.iter()).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("intensities are finite"));
    vals
}

fn case_knots(volume: &Tensor<f64>, modality: usize, mask: &Mask) -> Result<Vec<f64>> {
    let vals = masked_sorted(volume, modality, mask);
    if vals.is_empty() {
        return Err(EmmaError::Data(format!(
            "modality {} has no voxels inside the brain mask",
            MODALITIES[modality]
        )));
    }
    let knots: Vec<f64> = LANDMARK_PERCENTILES.iter().map(|&q| percentile(&vals, q)).collect();
    if knots[0] >= knots[knots.len() - 1] {
        return Err(EmmaError::Data(format!(
            "modality {} is constant within the brain mask; landmarks are undefined",
            MODALITIES[modality]
        )));
    }
    Ok(knots)
}

impl Landmarks {
    /// Learns the standard scale from training cases. Each case contributes
    /// its landmark vector rescaled so [p1, p99] maps onto [`SCALE_RANGE`].
    pub fn train(cases: &[(&Tensor<f64>, &Mask)]) -> Result<Self> {
        if cases.is_empty() {
            return Err(EmmaError::Usage("landmark training needs at least one case".into()));
        }
        let mut scales = BTreeMap::new();
        for (m, name) in MODALITIES.iter().enumerate() {
            let mut acc = vec![0.0f64; LANDMARK_PERCENTILES.len()];
            for (volume, mask) in cases {
                let knots = case_knots(volume, m, mask)?;
                let (lo, hi) = (knots[0], knots[knots.len() - 1]);
                let span = SCALE_RANGE[1] - SCALE_RANGE[0];
                for (a, &k) in acc.iter_mut().zip(&knots) {
                    *a += SCALE_RANGE[0] + (k - lo) / (hi - lo) * span;
                }
            }
            let n = cases.len() as f64;
            scales.insert(name.to_string(), acc.into_iter().map(|v| v / n).collect());
        }
        Ok(Landmarks { scales })
    }

    /// Maps each modality through the piecewise-linear knot correspondence.
    /// The case's own percentile knots land exactly on the standard scale;
    /// values beyond the outer knots continue with the terminal slopes.
    pub fn apply(&self, volume: &Tensor<f64>, mask: &Mask) -> Result<Tensor<f64>> {
        let vol = volume.channel_volume();
        let mut out = volume.clone();
        out.requires_grad = false;
        for (m, name) in MODALITIES.iter().enumerate() {
            let standard = self.scales.get(*name).ok_or_else(|| {
                EmmaError::Format(format!("landmark file has no entry for modality {name}"))
            })?;
            if standard.len() != LANDMARK_PERCENTILES.len() {
                return Err(EmmaError::Format(format!(
                    "modality {name}: expected {} landmark values, found {}",
                    LANDMARK_PERCENTILES.len(),
                    standard.len()
                )));
            }
            let knots = case_knots(volume, m, mask)?;
            // Merge zero-width segments so every kept segment has positive run.
            let mut xs = vec![knots[0]];
            let mut ys = vec![standard[0]];
            for i in 1..knots.len() {
                if knots[i] > *xs.last().unwrap() {
                    xs.push(knots[i]);
                    ys.push(standard[i]);
                }
            }
            if xs.len() < 2 {
                return Err(EmmaError::Data(format!(
                    "modality {name} is constant within the brain mask; landmarks are undefined"
                )));
            }
            let map = |v: f64| -> f64 {
                let seg = match xs.iter().position(|&x| v < x) {
                    Some(0) => 0,
                    Some(i) => i - 1,
                    None => xs.len() - 2,
                };
                let slope = (ys[seg + 1] - ys[seg]) / (xs[seg + 1] - xs[seg]);
                ys[seg] + (v - xs[seg]) * slope
            };
            let chunk = &mut out.data_mut()[m * vol..(m + 1) * vol];
            for (v, &inside) in chunk.iter_mut().zip(mask.inside.iter()) {
                *v = if inside { map(*v) } else { 0.0 };
            }
        }
        Ok(out)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, &self.scales)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let scales: BTreeMap<String, Vec<f64>> = fsio::read_json(path)?;
        for name in MODALITIES {
            if !scales.contains_key(name) {
                return Err(EmmaError::Format(format!(
                    "{}: landmark file has no entry for modality {name}",
                    path.display()
                )));
            }
        }
        Ok(Landmarks { scales })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn full_mask(extents: [usize; 3]) -> Mask {
        Mask { extents, inside: vec![true; extents.iter().product()] }
    }

    fn case_from(values: &[f64]) -> Tensor<f64> {
        // Same values in all four modalities, shaped [4, n, 1, 1].
        let n = values.len();
        let mut data = Vec::with_capacity(4 * n);
        for _ in 0..4 {
            data.extend_from_slice(values);
        }
        Tensor::new(vec![4, n, 1, 1], data).unwrap()
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 3.0);
        assert!((percentile(&v, 50.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn training_is_affine_invariant_per_case() {
        // A case and an affinely shifted copy contribute identical scales.
        let values: Vec<f64> = (0..200).map(|i| (i as f64 * 37.0) % 101.0).collect();
        let shifted: Vec<f64> = values.iter().map(|v| 3.0 * v + 50.0).collect();
        let (a, b) = (case_from(&values), case_from(&shifted));
        let mask = full_mask([200, 1, 1]);
        let la = Landmarks::train(&[(&a, &mask)]).unwrap();
        let lb = Landmarks::train(&[(&b, &mask)]).unwrap();
        for name in MODALITIES {
            for (x, y) in la.scales[name].iter().zip(&lb.scales[name]) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn application_hits_knots_exactly() {
        let values: Vec<f64> = (0..500).map(|i| (i as f64).sqrt() * 10.0).collect();
        let case = case_from(&values);
        let mask = full_mask([500, 1, 1]);
        let lm = Landmarks::train(&[(&case, &mask)]).unwrap();
        let mapped = lm.apply(&case, &mask).unwrap();
        // The case's own percentiles must land exactly on the standard scale.
        let sorted = {
            let mut v: Vec<f64> = mapped.data()[..500].to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        for (q, expected) in LANDMARK_PERCENTILES.iter().zip(&lm.scales["FLAIR"]) {
            let got = percentile(&sorted, *q);
            assert!((got - expected).abs() < 1e-6, "p{q}: {got} vs {expected}");
        }
    }

    #[test]
    fn mapping_is_monotone() {
        let values: Vec<f64> = (0..300).map(|i| ((i * 7919) % 1000) as f64 / 3.0).collect();
        let case = case_from(&values);
        let mask = full_mask([300, 1, 1]);
        let lm = Landmarks::train(&[(&case, &mask)]).unwrap();
        let mapped = lm.apply(&case, &mask).unwrap();
        let mut pairs: Vec<(f64, f64)> =
            values.iter().cloned().zip(mapped.data()[..300].iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-12, "not monotone: {w:?}");
        }
    }

    #[test]
    fn constant_modality_is_a_data_error() {
        let case = case_from(&[5.0; 100]);
        let mask = full_mask([100, 1, 1]);
        assert!(matches!(Landmarks::train(&[(&case, &mask)]), Err(EmmaError::Data(_))));
    }

    #[test]
    fn json_round_trip() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let case = case_from(&values);
        let mask = full_mask([100, 1, 1]);
        let lm = Landmarks::train(&[(&case, &mask)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("landmarks.json");
        lm.write_file(&path).unwrap();
        assert_eq!(Landmarks::read_file(&path).unwrap(), lm);
    }
}
