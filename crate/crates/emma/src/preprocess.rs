//! Intensity normalization: brain masking, z-scoring, polynomial bias-field
//! correction, and the three versioned pipelines that combine them.

use crate::error::{EmmaError, Result};
use crate::landmarks::Landmarks;
use crate::tensor::Tensor;
use crate::volume::MODALITIES;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Voxels that belong to the head: any modality non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub inside: Vec<bool>,
}

impl Mask {
    pub fn from_modalities(volume: &Tensor<f64>) -> Result<Self> {
        let [d, h, w] = volume.spatial()?;
        let c = volume.channels();
        let vol = volume.channel_volume();
        let mut inside = vec![false; vol];
        for ci in 0..c {
            let chunk = &volume.data()[ci * vol..(ci + 1) * vol];
            for (m, &v) in inside.iter_mut().zip(chunk) {
                *m |= v != 0.0;
            }
        }
        Ok(Mask { extents: [d, h, w], inside })
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }
}

/// Zero-mean unit-variance per modality, computed inside `mask`; voxels
/// outside the mask become exactly zero.
pub fn zscore_normalize(volume: &Tensor<f64>, mask: &Mask) -> Result<Tensor<f64>> {
    let vol = volume.channel_volume();
    if mask.inside.len() != vol {
        return Err(EmmaError::Dimension("mask extents do not match volume".into()));
    }
    let n = mask.count();
    if n == 0 {
        return Err(EmmaError::Data("brain mask is empty; nothing to normalize".into()));
    }
    let mut out = volume.clone();
    out.requires_grad = false;
    for (m, name) in MODALITIES.iter().enumerate().take(volume.channels()) {
        let chunk = &volume.data()[m * vol..(m + 1) * vol];
        let mut sum = 0.0f64;
        for (v, &inside) in chunk.iter().zip(&mask.inside) {
            if inside {
                sum += v;
            }
        }
        let mean = sum / n as f64;
        let mut sq = 0.0f64;
        for (v, &inside) in chunk.iter().zip(&mask.inside) {
            if inside {
                sq += (v - mean) * (v - mean);
            }
        }
        let var = sq / n as f64;
        if var == 0.0 {
            return Err(EmmaError::Data(format!(
                "modality {name} has zero variance within the brain mask"
            )));
        }
        let inv = 1.0 / var.sqrt();
        let dst = &mut out.data_mut()[m * vol..(m + 1) * vol];
        for (v, &inside) in dst.iter_mut().zip(&mask.inside) {
            *v = if inside { (*v - mean) * inv } else { 0.0 };
        }
    }
    Ok(out)
}

/// Monomial exponents `(i, j, k)` with `i + j + k <= degree`.
fn monomials(degree: usize) -> Vec<[usize; 3]> {
    let mut terms = Vec::new();
    for i in 0..=degree {
        for j in 0..=degree - i {
            for k in 0..=degree - i - j {
                terms.push([i, j, k]);
            }
        }
    }
    terms
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(EmmaError::Numeric("bias-field normal equations are singular".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

#[inline]
fn norm_coord(v: usize, extent: usize) -> f64 {
    if extent > 1 {
        2.0 * v as f64 / (extent - 1) as f64 - 1.0
    } else {
        0.0
    }
}

/// Removes a smooth multiplicative intensity field per modality.
///
/// Fits a degree-`degree` polynomial in [-1,1]-normalized coordinates to the
/// log-intensities inside the mask (least squares via the normal equations),
/// divides the intensities by the exponentiated fit, and rescales so the
/// masked mean is unchanged. Non-positive voxels cannot contribute to the
/// log fit and pass through the division untouched by it.
pub fn bias_correct(volume: &Tensor<f64>, mask: &Mask, degree: usize) -> Result<Tensor<f64>> {
    if !(2..=3).contains(&degree) {
        return Err(EmmaError::Parameter(format!(
            "bias correction degree must be 2 or 3, got {degree}"
        )));
    }
    let [d, h, w] = volume.spatial()?;
    let vol = volume.channel_volume();
    if mask.inside.len() != vol {
        return Err(EmmaError::Dimension("mask extents do not match volume".into()));
    }
    let terms = monomials(degree);
    let nt = terms.len();

    // Monomial row per masked voxel is shared across modalities; cache the
    // voxel coordinates once.
    let mut coords: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(mask.count());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let at = (z * h + y) * w + x;
                if mask.inside[at] {
                    coords.push((at, norm_coord(z, d), norm_coord(y, h), norm_coord(x, w)));
                }
            }
        }
    }
    if coords.len() < nt {
        return Err(EmmaError::Data(format!(
            "brain mask has {} voxels, polynomial fit needs at least {nt}",
            coords.len()
        )));
    }

    let mut out = volume.clone();
    out.requires_grad = false;
    let mut row = vec![0.0f64; nt];
    for m in 0..volume.channels() {
        let chunk = &volume.data()[m * vol..(m + 1) * vol];
        let mut ata = vec![vec![0.0f64; nt]; nt];
        let mut atb = vec![0.0f64; nt];
        let mut fit_count = 0usize;
        for &(at, u, v, w3) in &coords {
            let val = chunk[at];
            if val <= 0.0 {
                continue;
            }
            for (t, [i, j, k]) in terms.iter().enumerate() {
                row[t] = u.powi(*i as i32) * v.powi(*j as i32) * w3.powi(*k as i32);
            }
            let ln = val.ln();
            for r in 0..nt {
                for c in r..nt {
                    ata[r][c] += row[r] * row[c];
                }
                atb[r] += row[r] * ln;
            }
            fit_count += 1;
        }
        if fit_count < nt {
            return Err(EmmaError::Data(format!(
                "modality {}: only {fit_count} positive voxels inside the mask, fit needs {nt}",
                MODALITIES[m]
            )));
        }
        for r in 0..nt {
            for c in 0..r {
                ata[r][c] = ata[c][r];
            }
        }
        let coeff = solve_linear(ata, atb)?;

        let dst = &mut out.data_mut()[m * vol..(m + 1) * vol];
        let mut mean_before = 0.0f64;
        let mut mean_after = 0.0f64;
        for &(at, u, v, w3) in &coords {
            let mut q = 0.0;
            for (t, [i, j, k]) in terms.iter().enumerate() {
                q += coeff[t] * u.powi(*i as i32) * v.powi(*j as i32) * w3.powi(*k as i32);
            }
            mean_before += dst[at];
            dst[at] /= q.exp();
            mean_after += dst[at];
        }
        // Restore the masked mean so correction only reshapes, not rescales.
        if mean_after != 0.0 {
            let gain = mean_before / mean_after;
            for &(at, _, _, _) in &coords {
                dst[at] *= gain;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationVersion {
    V1,
    V2,
    V3,
}

/// Which normalizations to run before a network sees a case.
///
/// v1: z-score only. v2: bias correction, then z-score. v3: bias correction,
/// histogram landmark mapping, then z-score.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub version: NormalizationVersion,
    #[serde(default = "default_bias_degree")]
    pub bias_degree: usize,
    /// Landmark file; required by v3.
    #[serde(default)]
    pub landmarks: Option<PathBuf>,
}

fn default_bias_degree() -> usize {
    3
}

impl NormalizationVersion {
    pub fn tag(self) -> &'static str {
        match self {
            NormalizationVersion::V1 => "v1",
            NormalizationVersion::V2 => "v2",
            NormalizationVersion::V3 => "v3",
        }
    }
}

impl NormalizationSpec {
    pub fn v1() -> Self {
        NormalizationSpec { version: NormalizationVersion::V1, bias_degree: 3, landmarks: None }
    }

    pub fn needs_landmarks(&self) -> bool {
        self.version == NormalizationVersion::V3
    }
}

/// Runs the configured pipeline on raw modalities. `landmarks` must be
/// provided iff the version needs them.
pub fn apply_normalization(
    volume: &Tensor<f64>,
    mask: &Mask,
    spec: &NormalizationSpec,
    landmarks: Option<&Landmarks>,
) -> Result<Tensor<f64>> {
    match spec.version {
        NormalizationVersion::V1 => zscore_normalize(volume, mask),
        NormalizationVersion::V2 => {
            let corrected = bias_correct(volume, mask, spec.bias_degree)?;
            zscore_normalize(&corrected, mask)
        }
        NormalizationVersion::V3 => {
            let lm = landmarks.ok_or_else(|| {
                EmmaError::Usage("normalization v3 requires a trained landmark file".into())
            })?;
            let corrected = bias_correct(volume, mask, spec.bias_degree)?;
            let mapped = lm.apply(&corrected, mask)?;
            zscore_normalize(&mapped, mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomParams};

    #[test]
    fn mask_covers_head_not_background() {
        let (case, _) = generate_phantom(1, &PhantomParams::default()).unwrap();
        let mask = Mask::from_modalities(&case.modalities).unwrap();
        assert!(!mask.inside[0], "corner voxel should be outside the head");
        let n = mask.count();
        assert!(n > 0 && n < mask.inside.len());
    }

    #[test]
    fn zscore_standardizes_inside_and_zeroes_outside() {
        let (case, _) = generate_phantom(2, &PhantomParams::default()).unwrap();
        let mask = Mask::from_modalities(&case.modalities).unwrap();
        let z = zscore_normalize(&case.modalities, &mask).unwrap();
        let vol = z.channel_volume();
        let n = mask.count() as f64;
        for m in 0..4 {
            let chunk = &z.data()[m * vol..(m + 1) * vol];
            let mut sum = 0.0;
            let mut sq = 0.0;
            for (v, &inside) in chunk.iter().zip(&mask.inside) {
                if inside {
                    sum += v;
                    sq += v * v;
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
            let mean = sum / n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() < 1e-5, "modality {m} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-5, "modality {m} std {}", var.sqrt());
        }
    }

    #[test]
    fn zero_variance_modality_is_a_data_error_naming_it() {
        let mut data = vec![0.0f64; 4 * 8];
        // All modalities constant 1 inside a full-volume "head".
        for v in data.iter_mut() {
            *v = 1.0;
        }
        let volume = Tensor::new(vec![4, 2, 2, 2], data).unwrap();
        let mask = Mask::from_modalities(&volume).unwrap();
        let err = zscore_normalize(&volume, &mask).unwrap_err();
        match err {
            EmmaError::Data(m) => assert!(m.contains("FLAIR"), "message: {m}"),
            other => panic!("expected data error, got {other}"),
        }
    }

    #[test]
    fn bias_correction_recovers_a_constant_tissue_volume() {
        // Constant intensity times a smooth quadratic-log field: the fit
        // must capture the field and return the volume to near-constant.
        let (d, h, w) = (24usize, 24, 24);
        let mut data = vec![0.0f64; 4 * d * h * w];
        let mut inside = vec![false; d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let at = (z * h + y) * w + x;
                    let (u, v, w3) =
                        (norm_coord(z, d), norm_coord(y, h), norm_coord(x, w));
                    let r2 = u * u + v * v + w3 * w3;
                    if r2 > 0.9 {
                        continue;
                    }
                    inside[at] = true;
                    let field = (0.3 * u * v - 0.2 * w3 * w3 + 0.1 * u).exp();
                    for m in 0..4 {
                        data[m * d * h * w + at] = 100.0 * field;
                    }
                }
            }
        }
        let volume = Tensor::new(vec![4, d, h, w], data).unwrap();
        let mask = Mask { extents: [d, h, w], inside };
        let corrected = bias_correct(&volume, &mask, 2).unwrap();
        let vol = d * h * w;
        for m in 0..4 {
            let chunk = &corrected.data()[m * vol..(m + 1) * vol];
            // Correction preserves the masked mean (global gain is killed by
            // the z-score that follows), so flatness is measured against it.
            let mut mean = 0.0f64;
            let mut n = 0usize;
            for (v, &ins) in chunk.iter().zip(&mask.inside) {
                if ins {
                    mean += v;
                    n += 1;
                }
            }
            mean /= n as f64;
            let mut rms = 0.0f64;
            for (v, &ins) in chunk.iter().zip(&mask.inside) {
                if ins {
                    let rel = v / mean - 1.0;
                    rms += rel * rel;
                }
            }
            let rms = (rms / n as f64).sqrt();
            assert!(rms < 0.02, "modality {m}: residual RMS {rms}");
        }
    }

    #[test]
    fn constant_volume_passes_through_bias_correction() {
        let volume = Tensor::new(vec![4, 4, 4, 4], vec![7.0f64; 4 * 64]).unwrap();
        let mask = Mask { extents: [4, 4, 4], inside: vec![true; 64] };
        let out = bias_correct(&volume, &mask, 2).unwrap();
        for (a, b) in out.data().iter().zip(volume.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_degree_is_a_parameter_error() {
        let volume = Tensor::new(vec![4, 4, 4, 4], vec![1.0f64; 4 * 64]).unwrap();
        let mask = Mask { extents: [4, 4, 4], inside: vec![true; 64] };
        assert!(matches!(bias_correct(&volume, &mask, 5), Err(EmmaError::Parameter(_))));
    }

    #[test]
    fn v3_without_landmarks_is_a_usage_error() {
        let (case, _) = generate_phantom(4, &PhantomParams::default()).unwrap();
        let mask = Mask::from_modalities(&case.modalities).unwrap();
        let spec = NormalizationSpec {
            version: NormalizationVersion::V3,
            bias_degree: 2,
            landmarks: None,
        };
        assert!(matches!(
            apply_normalization(&case.modalities, &mask, &spec, None),
            Err(EmmaError::Usage(_))
        ));
    }

    #[test]
    fn monomial_count_matches_closed_form() {
        // (d+1)(d+2)(d+3)/6 terms for total degree d.
        assert_eq!(monomials(2).len(), 10);
        assert_eq!(monomials(3).len(), 20);
    }
}
