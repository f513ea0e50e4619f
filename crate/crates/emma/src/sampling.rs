//! Training patch sampling: centre selection strategies, window extraction
//! with zero padding, the low-resolution context pathway, and mirror
//! augmentation applied consistently to every pathway and the target.

use crate::builders::{DEEPMEDIC_CONTEXT, LOW_RES_FACTOR};
use crate::arch::{Family, Network};
use crate::error::{EmmaError, Result};
use crate::losses::one_hot;
use crate::ops;
use crate::preprocess::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{label_to_class, SEG_LABELS};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Half the centres on tumour voxels, half on healthy voxels.
    HealthyTumour5050,
    /// Centres drawn uniformly across the present label classes.
    UniformPerLabel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub strategy: SamplingStrategy,
    /// Edge length of the (cubic) full-resolution input patch.
    pub patch_extent: usize,
    /// When true, healthy centres may fall anywhere in the volume; when
    /// false (the default) they are restricted to the brain mask.
    #[serde(default)]
    pub background_in_labels: bool,
    /// Random mirror flips along each axis during training.
    #[serde(default = "default_augment")]
    pub augment: bool,
}

fn default_augment() -> bool {
    true
}

/// Window arithmetic for one architecture family. Centres map to windows via
/// corner arithmetic so that every pathway and the target stay concentric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchGeometry {
    /// One full-resolution window; output extents equal input extents.
    SamePadded { extent: usize },
    /// Normal plus factor-3 context pathway around a smaller output block.
    TwoPathway { normal_extent: usize },
}

impl PatchGeometry {
    pub fn for_network(net: &Network, patch_extent: usize) -> Result<Self> {
        match net.spec.family {
            Family::Deepmedic => {
                let e = [patch_extent; 3];
                crate::builders::deepmedic_low_extents(e)
                    .map_err(|err| EmmaError::Parameter(format!("patch_extent {patch_extent}: {err}")))?;
                Ok(PatchGeometry::TwoPathway { normal_extent: patch_extent })
            }
            _ => {
                let unit = net.divisibility_unit();
                if patch_extent == 0 || patch_extent % unit != 0 {
                    return Err(EmmaError::Parameter(format!(
                        "patch_extent {patch_extent} must be a positive multiple of {unit} for this architecture"
                    )));
                }
                Ok(PatchGeometry::SamePadded { extent: patch_extent })
            }
        }
    }

    /// Edge length of the supervised output block.
    pub fn output_extent(&self) -> usize {
        match *self {
            PatchGeometry::SamePadded { extent } => extent,
            PatchGeometry::TwoPathway { normal_extent } => normal_extent - 2 * DEEPMEDIC_CONTEXT,
        }
    }

    /// Input extents per pathway, in network input order.
    pub fn input_extents(&self) -> Vec<[usize; 3]> {
        match *self {
            PatchGeometry::SamePadded { extent } => vec![[extent; 3]],
            PatchGeometry::TwoPathway { normal_extent } => {
                let low = crate::builders::deepmedic_low_extents([normal_extent; 3])
                    .expect("validated at construction");
                vec![[normal_extent; 3], low]
            }
        }
    }
}

/// Per-case centre index: eligible voxels of each class, precomputed once.
#[derive(Debug)]
pub struct CaseSampler {
    extents: [usize; 3],
    class_centers: [Vec<u32>; 4],
    /// Raw labels with no eligible voxel in this case.
    pub absent: Vec<u8>,
}

impl CaseSampler {
    /// Indexes the eligible centre voxels. Healthy centres (label 0) come
    /// from inside the brain mask unless `background_in_labels` is set.
    /// Classes without a single eligible voxel are recorded in `absent`;
    /// their share of the draw is redistributed over the present classes.
    pub fn new(labels: &[u8], mask: &Mask, background_in_labels: bool) -> Result<Self> {
        let extents = mask.extents;
        let n: usize = extents.iter().product();
        if labels.len() != n {
            return Err(EmmaError::Dimension(format!(
                "label buffer holds {} voxels, mask extents {:?} need {n}",
                labels.len(),
                extents
            )));
        }
        let mut class_centers: [Vec<u32>; 4] = Default::default();
        for (i, &label) in labels.iter().enumerate() {
            let class = label_to_class(label)?;
            if class == 0 && !background_in_labels && !mask.inside[i] {
                continue;
            }
            class_centers[class].push(i as u32);
        }
        let absent: Vec<u8> = SEG_LABELS
            .iter()
            .enumerate()
            .filter(|&(c, _)| class_centers[c].is_empty())
            .map(|(_, &l)| l)
            .collect();
        if class_centers.iter().all(|v| v.is_empty()) {
            return Err(EmmaError::Data("no eligible sampling centres in case".into()));
        }
        if !absent.is_empty() {
            log::warn!(
                "labels {absent:?} absent from case; their sampling share is redistributed"
            );
        }
        Ok(CaseSampler { extents, class_centers, absent })
    }

    fn voxel_coords(&self, flat: u32) -> [usize; 3] {
        let f = flat as usize;
        let (h, w) = (self.extents[1], self.extents[2]);
        [f / (h * w), (f / w) % h, f % w]
    }

    /// Draws one centre. Missing groups fall back to whatever is present.
    pub fn draw_center<R: Rng>(&self, strategy: SamplingStrategy, rng: &mut R) -> [usize; 3] {
        let flat = match strategy {
            SamplingStrategy::HealthyTumour5050 => {
                let healthy = &self.class_centers[0];
                let tumour_total: usize =
                    self.class_centers[1..].iter().map(|v| v.len()).sum();
                let pick_tumour = if healthy.is_empty() {
                    true
                } else if tumour_total == 0 {
                    false
                } else {
                    rng.gen_bool(0.5)
                };
                if pick_tumour {
                    let mut idx = rng.gen_range(0..tumour_total);
                    let mut flat = 0;
                    for list in &self.class_centers[1..] {
                        if idx < list.len() {
                            flat = list[idx];
                            break;
                        }
                        idx -= list.len();
                    }
                    flat
                } else {
                    healthy[rng.gen_range(0..healthy.len())]
                }
            }
            SamplingStrategy::UniformPerLabel => {
                let present: Vec<&Vec<u32>> =
                    self.class_centers.iter().filter(|v| !v.is_empty()).collect();
                let list = present[rng.gen_range(0..present.len())];
                list[rng.gen_range(0..list.len())]
            }
        };
        self.voxel_coords(flat)
    }
}

/// One training example: pathway inputs, the one-hot target over the output
/// block, and the raw class indices behind it.
pub struct PatchSample<T: Scalar> {
    pub inputs: Vec<Tensor<T>>,
    pub target: Tensor<T>,
    pub target_classes: Vec<u8>,
    pub center: [usize; 3],
}

fn crop_labels_zero_pad(
    labels: &[u8],
    extents: [usize; 3],
    corner: [i64; 3],
    out: usize,
) -> Vec<u8> {
    let mut dst = vec![0u8; out * out * out];
    let (d, h, w) = (extents[0] as i64, extents[1] as i64, extents[2] as i64);
    for z in 0..out as i64 {
        let sz = corner[0] + z;
        if sz < 0 || sz >= d {
            continue;
        }
        for y in 0..out as i64 {
            let sy = corner[1] + y;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..out as i64 {
                let sx = corner[2] + x;
                if sx < 0 || sx >= w {
                    continue;
                }
                dst[((z * out as i64 + y) * out as i64 + x) as usize] =
                    labels[((sz * h + sy) * w + sx) as usize];
            }
        }
    }
    dst
}

fn flip_classes(classes: &[u8], out: usize, flips: [bool; 3]) -> Vec<u8> {
    let mut dst = vec![0u8; classes.len()];
    for z in 0..out {
        let sz = if flips[0] { out - 1 - z } else { z };
        for y in 0..out {
            let sy = if flips[1] { out - 1 - y } else { y };
            for x in 0..out {
                let sx = if flips[2] { out - 1 - x } else { x };
                dst[(z * out + y) * out + x] = classes[(sz * out + sy) * out + sx];
            }
        }
    }
    dst
}

/// Cuts the pathway windows and the target block around `center`, applying
/// the same mirror flips to every tensor. Windows reaching outside the
/// volume are zero padded.
pub fn extract_patch<T: Scalar>(
    modalities: &Tensor<T>,
    labels: &[u8],
    geometry: &PatchGeometry,
    class_count: usize,
    center: [usize; 3],
    flips: [bool; 3],
) -> Result<PatchSample<T>> {
    let spatial = modalities.spatial()?;
    let n: usize = spatial.iter().product();
    if labels.len() != n {
        return Err(EmmaError::Dimension(format!(
            "label buffer holds {} voxels, volume has {n}",
            labels.len()
        )));
    }
    let o = geometry.output_extent();
    let p_out = [
        center[0] as i64 - (o / 2) as i64,
        center[1] as i64 - (o / 2) as i64,
        center[2] as i64 - (o / 2) as i64,
    ];

    let raw = crop_labels_zero_pad(labels, spatial, p_out, o);
    let mut classes = Vec::with_capacity(raw.len());
    for &l in &raw {
        let c = label_to_class(l)?;
        if c >= class_count {
            return Err(EmmaError::Data(format!(
                "label {l} maps to class {c}, outside class_count {class_count}"
            )));
        }
        classes.push(c as u8);
    }
    let classes = flip_classes(&classes, o, flips);
    let target = one_hot::<T>(&classes, &[o, o, o], class_count)?;

    let mut inputs = Vec::new();
    match *geometry {
        PatchGeometry::SamePadded { extent } => {
            debug_assert_eq!(extent, o);
            let patch = ops::crop_channels_zero_pad(modalities, p_out, [o; 3])?;
            inputs.push(ops::flip_spatial(&patch, flips)?);
        }
        PatchGeometry::TwoPathway { .. } => {
            let ctx = DEEPMEDIC_CONTEXT as i64;
            let normal_corner = [p_out[0] - ctx, p_out[1] - ctx, p_out[2] - ctx];
            let normal_extent = o + 2 * DEEPMEDIC_CONTEXT;
            let normal =
                ops::crop_channels_zero_pad(modalities, normal_corner, [normal_extent; 3])?;
            inputs.push(ops::flip_spatial(&normal, flips)?);

            let reach = (LOW_RES_FACTOR * DEEPMEDIC_CONTEXT) as i64;
            let low_corner = [p_out[0] - reach, p_out[1] - reach, p_out[2] - reach];
            let low_src_extent = o + 2 * LOW_RES_FACTOR * DEEPMEDIC_CONTEXT;
            let low_src =
                ops::crop_channels_zero_pad(modalities, low_corner, [low_src_extent; 3])?;
            let low = ops::downsample_average(&low_src, LOW_RES_FACTOR)?;
            inputs.push(ops::flip_spatial(&low, flips)?);
        }
    }

    Ok(PatchSample { inputs, target, target_classes: classes, center })
}

/// Draws a centre (and, when augmenting, three axis flips) and extracts the
/// corresponding sample. The RNG is consumed in a fixed order: centre
/// strategy draws first, then one flip decision per axis.
pub fn sample_patch<T: Scalar, R: Rng>(
    modalities: &Tensor<T>,
    labels: &[u8],
    sampler: &CaseSampler,
    strategy: SamplingStrategy,
    geometry: &PatchGeometry,
    class_count: usize,
    augment: bool,
    rng: &mut R,
) -> Result<PatchSample<T>> {
    let center = sampler.draw_center(strategy, rng);
    let flips = if augment {
        [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)]
    } else {
        [false; 3]
    };
    extract_patch(modalities, labels, geometry, class_count, center, flips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchitectureSpec, Family};
    use crate::builders::build_architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 12x12x12 case: mask covers z in 2..10, tumour labels in small boxes.
    fn toy_case() -> (Tensor<f64>, Vec<u8>, Mask) {
        let e = [12usize, 12, 12];
        let n = e.iter().product::<usize>();
        let mut intensities = vec![0.0f64; 4 * n];
        let mut labels = vec![0u8; n];
        for z in 2..10 {
            for y in 2..10 {
                for x in 2..10 {
                    let i = (z * 12 + y) * 12 + x;
                    for c in 0..4 {
                        intensities[c * n + i] = 1.0 + (c + 1) as f64 * 0.1 * (i % 7) as f64;
                    }
                    labels[i] = match (z, y) {
                        (4..=5, 4..=5) => 1,
                        (6..=7, 4..=5) => 2,
                        (4..=5, 6..=7) => 4,
                        _ => 0,
                    };
                }
            }
        }
        let t = Tensor::new(vec![4, 12, 12, 12], intensities).unwrap();
        let mask = Mask::from_modalities(&t).unwrap();
        (t, labels, mask)
    }

    #[test]
    fn healthy_tumour_split_is_binomially_balanced() {
        let (_, labels, mask) = toy_case();
        let s = CaseSampler::new(&labels, &mask, false).unwrap();
        assert!(s.absent.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 4000;
        let mut tumour = 0usize;
        for _ in 0..draws {
            let c = s.draw_center(SamplingStrategy::HealthyTumour5050, &mut rng);
            if labels[(c[0] * 12 + c[1]) * 12 + c[2]] != 0 {
                tumour += 1;
            }
        }
        let sigma = (draws as f64 * 0.25).sqrt();
        assert!(
            (tumour as f64 - draws as f64 / 2.0).abs() <= 3.0 * sigma,
            "tumour draws {tumour} of {draws}"
        );
    }

    #[test]
    fn uniform_per_label_balances_present_classes() {
        let (_, labels, mask) = toy_case();
        let s = CaseSampler::new(&labels, &mask, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 4000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let c = s.draw_center(SamplingStrategy::UniformPerLabel, &mut rng);
            let l = labels[(c[0] * 12 + c[1]) * 12 + c[2]];
            counts[label_to_class(l).unwrap()] += 1;
        }
        let p = 0.25;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (k, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - draws as f64 * p).abs() <= 3.0 * sigma,
                "class {k}: {n} of {draws}"
            );
        }
    }

    #[test]
    fn absent_class_share_goes_to_present_ones() {
        let (_, mut labels, mask) = toy_case();
        for l in labels.iter_mut() {
            if *l == 4 {
                *l = 2; // remove the enhancing class entirely
            }
        }
        let s = CaseSampler::new(&labels, &mask, false).unwrap();
        assert_eq!(s.absent, vec![4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 3000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let c = s.draw_center(SamplingStrategy::UniformPerLabel, &mut rng);
            counts[label_to_class(labels[(c[0] * 12 + c[1]) * 12 + c[2]]).unwrap()] += 1;
        }
        assert_eq!(counts[3], 0);
        let p = 1.0 / 3.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for k in 0..3 {
            assert!(
                (counts[k] as f64 - draws as f64 * p).abs() <= 3.0 * sigma,
                "class {k}: {} of {draws}",
                counts[k]
            );
        }
    }

    #[test]
    fn healthy_centres_respect_the_mask() {
        let (_, labels, mask) = toy_case();
        let s = CaseSampler::new(&labels, &mask, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let c = s.draw_center(SamplingStrategy::HealthyTumour5050, &mut rng);
            let flat = (c[0] * 12 + c[1]) * 12 + c[2];
            if labels[flat] == 0 {
                assert!(mask.inside[flat], "healthy centre outside mask at {c:?}");
            }
        }
    }

    #[test]
    fn background_in_labels_extends_healthy_centres_beyond_mask() {
        let (_, labels, mask) = toy_case();
        let s = CaseSampler::new(&labels, &mask, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let outside = (0..2000)
            .map(|_| s.draw_center(SamplingStrategy::HealthyTumour5050, &mut rng))
            .filter(|c| {
                let flat = (c[0] * 12 + c[1]) * 12 + c[2];
                labels[flat] == 0 && !mask.inside[flat]
            })
            .count();
        assert!(outside > 0, "no healthy centre ever left the mask");
    }

    #[test]
    fn empty_case_is_a_data_error() {
        let t = Tensor::<f64>::zeros(&[4, 4, 4, 4]);
        let mask = Mask::from_modalities(&t).unwrap();
        let labels = vec![0u8; 64];
        let err = CaseSampler::new(&labels, &mask, false).unwrap_err();
        assert_eq!(err.kind(), "data");
    }

    #[test]
    fn two_pathway_extraction_shapes() {
        let (t, labels, _) = toy_case();
        let net = build_architecture(
            &ArchitectureSpec::new(Family::Deepmedic, "base", 4).with_width_scale(0.1),
        )
        .unwrap();
        let geom = PatchGeometry::for_network(&net, 25).unwrap();
        assert_eq!(geom.output_extent(), 9);
        assert_eq!(geom.input_extents(), vec![[25, 25, 25], [19, 19, 19]]);
        let s = extract_patch(&t, &labels, &geom, 4, [6, 6, 6], [false; 3]).unwrap();
        assert_eq!(s.inputs[0].shape(), &[4, 25, 25, 25]);
        assert_eq!(s.inputs[1].shape(), &[4, 19, 19, 19]);
        assert_eq!(s.target.shape(), &[4, 9, 9, 9]);
    }

    #[test]
    fn target_block_is_centred_on_the_drawn_voxel() {
        let (t, labels, _) = toy_case();
        let geom = PatchGeometry::SamePadded { extent: 9 };
        let center = [5usize, 5, 5];
        let s = extract_patch(&t, &labels, &geom, 4, center, [false; 3]).unwrap();
        let mid = (4 * 9 + 4) * 9 + 4;
        let center_label = labels[(5 * 12 + 5) * 12 + 5];
        assert_eq!(s.target_classes[mid] as usize, label_to_class(center_label).unwrap());
    }

    #[test]
    fn windows_touching_the_border_are_zero_padded() {
        let (t, labels, _) = toy_case();
        let net = build_architecture(
            &ArchitectureSpec::new(Family::Deepmedic, "base", 4).with_width_scale(0.1),
        )
        .unwrap();
        let geom = PatchGeometry::for_network(&net, 25).unwrap();
        let s = extract_patch(&t, &labels, &geom, 4, [0, 0, 0], [false; 3]).unwrap();
        // Normal window corner sits at -12; its first voxel is outside.
        assert_eq!(s.inputs[0].data()[0], 0.0);
        // Target corner sits at -4: class 0 padding there.
        assert_eq!(s.target_classes[0], 0);
    }

    #[test]
    fn mirror_flips_are_consistent_across_pathways_and_target() {
        let (t, labels, _) = toy_case();
        let net = build_architecture(
            &ArchitectureSpec::new(Family::Deepmedic, "base", 4).with_width_scale(0.1),
        )
        .unwrap();
        let geom = PatchGeometry::for_network(&net, 25).unwrap();
        let flips = [true, false, true];
        let plain = extract_patch(&t, &labels, &geom, 4, [6, 6, 6], [false; 3]).unwrap();
        let flipped = extract_patch(&t, &labels, &geom, 4, [6, 6, 6], flips).unwrap();
        for (a, b) in plain.inputs.iter().zip(&flipped.inputs) {
            let manual = ops::flip_spatial(a, flips).unwrap();
            assert_eq!(manual.data(), b.data());
        }
        let o = geom.output_extent();
        assert_eq!(flip_classes(&plain.target_classes, o, flips), flipped.target_classes);
    }

    #[test]
    fn low_res_pathway_averages_the_context_window() {
        // A constant volume stays constant through downsampling; padding
        // zeros dilute border blocks but interior blocks keep the value.
        let n = 27usize * 27 * 27;
        let t = Tensor::new(vec![4, 27, 27, 27], vec![2.0f64; 4 * n]).unwrap();
        let labels = vec![0u8; n];
        let geom = PatchGeometry::TwoPathway { normal_extent: 25 };
        let s = extract_patch(&t, &labels, &geom, 4, [13, 13, 13], [false; 3]).unwrap();
        let low = &s.inputs[1];
        // Centre voxel of the low-res patch: fully interior source block.
        let mid = ((9 * 19) + 9) * 19 + 9;
        assert!((low.data()[mid] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_patch_extent_is_a_parameter_error() {
        let dm = build_architecture(
            &ArchitectureSpec::new(Family::Deepmedic, "base", 4).with_width_scale(0.1),
        )
        .unwrap();
        assert_eq!(PatchGeometry::for_network(&dm, 24).unwrap_err().kind(), "parameter");
        let unet = build_architecture(
            &ArchitectureSpec::new(Family::Unet, "sum_skip", 4).with_width_scale(0.1),
        )
        .unwrap();
        assert_eq!(PatchGeometry::for_network(&unet, 20).unwrap_err().kind(), "parameter");
        assert!(PatchGeometry::for_network(&unet, 32).is_ok());
    }

    #[test]
    fn sampled_patches_feed_the_network() {
        let (t, labels, mask) = toy_case();
        let spec = ArchitectureSpec::new(Family::Deepmedic, "base", 4).with_width_scale(0.1);
        let net = build_architecture(&spec).unwrap();
        let geom = PatchGeometry::for_network(&net, 25).unwrap();
        let sampler = CaseSampler::new(&labels, &mask, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sample = sample_patch(
            &t,
            &labels,
            &sampler,
            SamplingStrategy::HealthyTumour5050,
            &geom,
            4,
            true,
            &mut rng,
        )
        .unwrap();
        let params = crate::arch::ParamStore::<f64>::init(&net, 1);
        let probs = crate::forward::forward_infer(&net, &params, &sample.inputs).unwrap();
        assert_eq!(probs.shape(), &[4, 9, 9, 9]);
    }
}
