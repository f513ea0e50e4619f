//! Segmentation losses on class-probability maps.
//!
//! All losses take a probability tensor `[K, spatial...]` (softmax output)
//! and a one-hot target of the same shape, returning a scalar in f64 plus
//! whatever the closed-form gradient needs. Gradients are with respect to
//! the probabilities; composing with the softmax backward gives logits.

use crate::error::{EmmaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Floor for probabilities inside `log` so empty classes cannot produce
/// infinities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SoftDice,
    SoftIou,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Per-class weights for cross-entropy; `None` means uniform.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    /// Restrict overlap losses to classes >= 1, ignoring background.
    #[serde(default)]
    pub foreground_only: bool,
    /// Smoothing constant added to overlap numerators and denominators.
    #[serde(default = "default_smooth")]
    pub smooth: f64,
}

fn default_smooth() -> f64 {
    1.0
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            class_weights: None,
            foreground_only: false,
            smooth: 1.0,
        }
    }

    pub fn soft_dice() -> Self {
        LossSpec { kind: LossKind::SoftDice, ..LossSpec::cross_entropy() }
    }

    pub fn soft_iou() -> Self {
        LossSpec { kind: LossKind::SoftIou, ..LossSpec::cross_entropy() }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if let Some(w) = &self.class_weights {
            if w.len() != class_count {
                return Err(EmmaError::Config(format!(
                    "class_weights has {} entries for {} classes",
                    w.len(),
                    class_count
                )));
            }
            if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(EmmaError::Config("class_weights must be finite and >= 0".into()));
            }
        }
        if !self.smooth.is_finite() || self.smooth < 0.0 {
            return Err(EmmaError::Config("smooth must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Builds a `[K, spatial...]` one-hot tensor from class indices.
/// Every index must be `< class_count`.
pub fn one_hot<T: Scalar>(
    labels: &[u8],
    spatial_shape: &[usize],
    class_count: usize,
) -> Result<Tensor<T>> {
    let vol: usize = spatial_shape.iter().product();
    if labels.len() != vol {
        return Err(EmmaError::Dimension(format!(
            "label buffer has {} entries, spatial shape {spatial_shape:?} needs {vol}",
            labels.len()
        )));
    }
    let mut shape = vec![class_count];
    shape.extend_from_slice(spatial_shape);
    let mut out = Tensor::zeros(&shape);
    let data = out.data_mut();
    for (v, &lab) in labels.iter().enumerate() {
        let k = lab as usize;
        if k >= class_count {
            return Err(EmmaError::Data(format!(
                "label {lab} out of range for {class_count} classes"
            )));
        }
        data[k * vol + v] = T::ONE;
    }
    Ok(out)
}

fn check_pair<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<()> {
    if probs.shape() != onehot.shape() {
        return Err(EmmaError::Dimension(format!(
            "probability shape {:?} does not match target shape {:?}",
            probs.shape(),
            onehot.shape()
        )));
    }
    if probs.rank() < 1 || probs.channel_volume() == 0 {
        return Err(EmmaError::Dimension("loss requires a non-empty [K, spatial...] tensor".into()));
    }
    Ok(())
}

fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0; k]
}

/// Mean over voxels of the weighted negative log-probability of the true
/// class.
pub fn cross_entropy_forward<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    class_weights: Option<&[f64]>,
) -> Result<f64> {
    check_pair(probs, onehot)?;
    let k = probs.channels();
    let vol = probs.channel_volume();
    let weights = class_weights.map(|w| w.to_vec()).unwrap_or_else(|| uniform_weights(k));
    let mut acc = 0.0f64;
    for c in 0..k {
        let p = &probs.data()[c * vol..(c + 1) * vol];
        let g = &onehot.data()[c * vol..(c + 1) * vol];
        let w = weights[c];
        for i in 0..vol {
            let gi = g[i].to_f64();
            if gi != 0.0 {
                acc -= w * gi * p[i].to_f64().max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(acc / vol as f64)
}

pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    class_weights: Option<&[f64]>,
    upstream: f64,
) -> Tensor<T> {
    let k = probs.channels();
    let vol = probs.channel_volume();
    let weights = class_weights.map(|w| w.to_vec()).unwrap_or_else(|| uniform_weights(k));
    let mut grad = Tensor::zeros(probs.shape());
    let n = vol as f64;
    for c in 0..k {
        let p = &probs.data()[c * vol..(c + 1) * vol];
        let g = &onehot.data()[c * vol..(c + 1) * vol];
        let out = &mut grad.data_mut()[c * vol..(c + 1) * vol];
        let w = weights[c];
        for i in 0..vol {
            let gi = g[i].to_f64();
            if gi != 0.0 {
                out[i] = T::from_f64(-upstream * w * gi / (n * p[i].to_f64().max(PROB_FLOOR)));
            }
        }
    }
    grad
}

/// Per-class overlap sums saved by the soft Dice / soft IoU forward passes.
#[derive(Debug, Clone)]
pub struct OverlapSaved {
    /// Numerator per included class (`2*sum(p*g) + s` or `sum(p*g) + s`).
    pub numer: Vec<f64>,
    /// Denominator per included class.
    pub denom: Vec<f64>,
    /// First class index included in the average (1 if background skipped).
    pub first_class: usize,
}

fn overlap_sums<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = probs.channels();
    let vol = probs.channel_volume();
    let mut inter = vec![0.0f64; k];
    let mut p_sum = vec![0.0f64; k];
    let mut g_sum = vec![0.0f64; k];
    for c in 0..k {
        let p = &probs.data()[c * vol..(c + 1) * vol];
        let g = &onehot.data()[c * vol..(c + 1) * vol];
        let (mut i_acc, mut p_acc, mut g_acc) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..vol {
            let (pf, gf) = (p[i].to_f64(), g[i].to_f64());
            i_acc += pf * gf;
            p_acc += pf;
            g_acc += gf;
        }
        inter[c] = i_acc;
        p_sum[c] = p_acc;
        g_sum[c] = g_acc;
    }
    (inter, p_sum, g_sum)
}

/// `1 - mean_k (2*sum(p_k g_k) + s) / (sum(p_k) + sum(g_k) + s)`.
pub fn soft_dice_forward<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    smooth: f64,
    foreground_only: bool,
) -> Result<(f64, OverlapSaved)> {
    check_pair(probs, onehot)?;
    let k = probs.channels();
    let first = usize::from(foreground_only && k > 1);
    let (inter, p_sum, g_sum) = overlap_sums(probs, onehot);
    let mut numer = Vec::with_capacity(k - first);
    let mut denom = Vec::with_capacity(k - first);
    let mut mean = 0.0f64;
    for c in first..k {
        let n = 2.0 * inter[c] + smooth;
        let d = p_sum[c] + g_sum[c] + smooth;
        mean += n / d;
        numer.push(n);
        denom.push(d);
    }
    mean /= (k - first) as f64;
    Ok((1.0 - mean, OverlapSaved { numer, denom, first_class: first }))
}

pub fn soft_dice_backward<T: Scalar>(
    onehot: &Tensor<T>,
    saved: &OverlapSaved,
    upstream: f64,
) -> Tensor<T> {
    let k = onehot.channels();
    let vol = onehot.channel_volume();
    let included = saved.numer.len() as f64;
    let mut grad = Tensor::zeros(onehot.shape());
    for (slot, c) in (saved.first_class..k).enumerate() {
        let (n, d) = (saved.numer[slot], saved.denom[slot]);
        let g = &onehot.data()[c * vol..(c + 1) * vol];
        let out = &mut grad.data_mut()[c * vol..(c + 1) * vol];
        let scale = -upstream / (included * d * d);
        for i in 0..vol {
            out[i] = T::from_f64(scale * (2.0 * g[i].to_f64() * d - n));
        }
    }
    grad
}

/// `1 - mean_k (sum(p_k g_k) + s) / (sum(p_k) + sum(g_k) - sum(p_k g_k) + s)`.
pub fn soft_iou_forward<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    smooth: f64,
    foreground_only: bool,
) -> Result<(f64, OverlapSaved)> {
    check_pair(probs, onehot)?;
    let k = probs.channels();
    let first = usize::from(foreground_only && k > 1);
    let (inter, p_sum, g_sum) = overlap_sums(probs, onehot);
    let mut numer = Vec::with_capacity(k - first);
    let mut denom = Vec::with_capacity(k - first);
    let mut mean = 0.0f64;
    for c in first..k {
        let n = inter[c] + smooth;
        let d = p_sum[c] + g_sum[c] - inter[c] + smooth;
        mean += n / d;
        numer.push(n);
        denom.push(d);
    }
    mean /= (k - first) as f64;
    Ok((1.0 - mean, OverlapSaved { numer, denom, first_class: first }))
}

pub fn soft_iou_backward<T: Scalar>(
    onehot: &Tensor<T>,
    saved: &OverlapSaved,
    upstream: f64,
) -> Tensor<T> {
    let k = onehot.channels();
    let vol = onehot.channel_volume();
    let included = saved.numer.len() as f64;
    let mut grad = Tensor::zeros(onehot.shape());
    for (slot, c) in (saved.first_class..k).enumerate() {
        let (n, d) = (saved.numer[slot], saved.denom[slot]);
        let g = &onehot.data()[c * vol..(c + 1) * vol];
        let out = &mut grad.data_mut()[c * vol..(c + 1) * vol];
        let scale = -upstream / (included * d * d);
        for i in 0..vol {
            let gf = g[i].to_f64();
            out[i] = T::from_f64(scale * (gf * d - n * (1.0 - gf)));
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_marks_true_class() {
        let t: Tensor<f64> = one_hot(&[0, 2, 1, 1], &[4], 3).unwrap();
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[2 * 4 + 1], 1.0);
        assert_eq!(t.data()[4 + 2], 1.0);
        assert_eq!(t.data()[4 + 3], 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        assert!(one_hot::<f64>(&[0, 5], &[2], 3).is_err());
    }

    #[test]
    fn cross_entropy_of_perfect_prediction_is_zero_ish() {
        let onehot: Tensor<f64> = one_hot(&[1, 0], &[2], 2).unwrap();
        let probs = Tensor::new(vec![2, 2], vec![1e-9, 1.0, 1.0, 1e-9]).unwrap();
        let loss = cross_entropy_forward(&probs, &onehot, None).unwrap();
        assert!(loss.abs() < 1e-8, "loss {loss}");
    }

    #[test]
    fn soft_dice_is_zero_on_exact_match() {
        let onehot: Tensor<f64> = one_hot(&[0, 1, 1, 0], &[4], 2).unwrap();
        let (loss, _) = soft_dice_forward(&onehot, &onehot, 1.0, false).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn absent_class_contributes_no_dice_loss() {
        let onehot: Tensor<f64> = one_hot(&[0, 0], &[2], 3).unwrap();
        let (loss, _) = soft_dice_forward(&onehot, &onehot, 1.0, false).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn iou_term_never_exceeds_dice_term() {
        let probs = Tensor::new(vec![2, 3], vec![0.7, 0.2, 0.5, 0.3, 0.8, 0.5]).unwrap();
        let onehot: Tensor<f64> = one_hot(&[0, 1, 1], &[3], 2).unwrap();
        let (dice, _) = soft_dice_forward(&probs, &onehot, 1.0, false).unwrap();
        let (iou, _) = soft_iou_forward(&probs, &onehot, 1.0, false).unwrap();
        assert!(iou >= dice - 1e-12, "iou {iou} dice {dice}");
    }
}
