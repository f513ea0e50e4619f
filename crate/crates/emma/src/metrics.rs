//! Evaluation: nested tumour regions, Dice and sensitivity overlap scores,
//! the exact 95th-percentile Hausdorff surface distance, and confidence
//! histograms for qualitative calibration checks.

use crate::error::{EmmaError, Result};
use crate::tensor::Tensor;
use crate::volume::label_to_class;
use serde::{Deserialize, Serialize};

/// Reported when either surface is empty: a diagonal-scale penalty rather
/// than an undefined distance. Flagged as degenerate wherever it appears.
pub const HD95_EMPTY_SENTINEL: f64 = 373.13;

/// Evaluation regions in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Enhancing,
    Whole,
    Core,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Enhancing, Region::Whole, Region::Core];

    pub fn name(self) -> &'static str {
        match self {
            Region::Enhancing => "enhancing",
            Region::Whole => "whole",
            Region::Core => "core",
        }
    }

    /// Label values belonging to the region.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Enhancing => &[4],
            Region::Whole => &[1, 2, 4],
            Region::Core => &[1, 4],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.labels().contains(&label)
    }
}

/// The three nested binary masks derived from one label volume.
#[derive(Debug, Clone)]
pub struct RegionSet {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub whole: Vec<bool>,
    pub core: Vec<bool>,
    pub enhancing: Vec<bool>,
}

impl RegionSet {
    pub fn mask(&self, region: Region) -> &[bool] {
        match region {
            Region::Enhancing => &self.enhancing,
            Region::Whole => &self.whole,
            Region::Core => &self.core,
        }
    }
}

pub fn merge_regions(labels: &[u8], extents: [usize; 3], spacing: [f64; 3]) -> Result<RegionSet> {
    let n: usize = extents.iter().product();
    if labels.len() != n {
        return Err(EmmaError::Dimension(format!(
            "label buffer holds {} voxels, extents {extents:?} need {n}",
            labels.len()
        )));
    }
    let mut whole = vec![false; n];
    let mut core = vec![false; n];
    let mut enhancing = vec![false; n];
    for (i, &l) in labels.iter().enumerate() {
        label_to_class(l)?; // rejects anything outside {0,1,2,4}
        whole[i] = l != 0;
        core[i] = l == 1 || l == 4;
        enhancing[i] = l == 4;
    }
    Ok(RegionSet { extents, spacing, whole, core, enhancing })
}

fn check_same_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(EmmaError::Dimension(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`. Two empty masks agree perfectly
/// (1.0); one empty mask is a total miss (0.0).
pub fn dice(pred: &[bool], reference: &[bool]) -> Result<f64> {
    check_same_len(pred, reference)?;
    let mut inter = 0usize;
    let (mut na, mut nb) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(reference) {
        na += usize::from(a);
        nb += usize::from(b);
        inter += usize::from(a && b);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Recall `TP / (TP + FN)`; an empty reference has nothing to miss (1.0).
pub fn sensitivity(pred: &[bool], reference: &[bool]) -> Result<f64> {
    check_same_len(pred, reference)?;
    let mut tp = 0usize;
    let mut refs = 0usize;
    for (&a, &b) in pred.iter().zip(reference) {
        if b {
            refs += 1;
            tp += usize::from(a);
        }
    }
    if refs == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / refs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hd95 {
    pub millimetres: f64,
    /// Set when a surface was empty and the sentinel was substituted.
    pub degenerate: bool,
}

/// Mask voxels with at least one face-adjacent neighbour outside the mask;
/// the volume border counts as outside.
fn surface_voxels(mask: &[bool], extents: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = extents;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut surface = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let exposed = z == 0
                    || !at(z - 1, y, x)
                    || z == d - 1
                    || !at(z + 1, y, x)
                    || y == 0
                    || !at(z, y - 1, x)
                    || y == h - 1
                    || !at(z, y + 1, x)
                    || x == 0
                    || !at(z, y, x - 1)
                    || x == w - 1
                    || !at(z, y, x + 1);
                if exposed {
                    surface.push([z, y, x]);
                }
            }
        }
    }
    surface
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas), restricted to the finite entries of `f`. Grid positions are
/// `step * index`.
fn dt1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = step * q as f64;
        loop {
            match v.last() {
                None => {
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = step * p as f64;
                    let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if s <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                    } else {
                        z.push(s);
                        break;
                    }
                }
            }
        }
        v.push(q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0usize;
    for q in 0..n {
        let xq = step * q as f64;
        while z[k + 1] < xq {
            k += 1;
        }
        let p = v[k];
        let xp = step * p as f64;
        out[q] = (xq - xp) * (xq - xp) + f[p];
    }
}

/// Exact squared Euclidean distance transform to the source voxels, with
/// anisotropic spacing, via three separable parabola-envelope passes.
fn squared_edt(sources: &[[usize; 3]], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = extents;
    let n = d * h * w;
    let mut field = vec![f64::INFINITY; n];
    for &[z, y, x] in sources {
        field[(z * h + y) * w + x] = 0.0;
    }
    let mut row = vec![0.0f64; d.max(h).max(w)];
    let mut out = vec![0.0f64; d.max(h).max(w)];
    // x pass
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            row[..w].copy_from_slice(&field[base..base + w]);
            dt1d(&row[..w], spacing[2], &mut out[..w]);
            field[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // y pass
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                row[y] = field[(z * h + y) * w + x];
            }
            dt1d(&row[..h], spacing[1], &mut out[..h]);
            for y in 0..h {
                field[(z * h + y) * w + x] = out[y];
            }
        }
    }
    // z pass
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                row[z] = field[(z * h + y) * w + x];
            }
            dt1d(&row[..d], spacing[0], &mut out[..d]);
            for z in 0..d {
                field[(z * h + y) * w + x] = out[z];
            }
        }
    }
    field
}

/// Nearest-rank 95th percentile of an unsorted distance multiset.
fn percentile95(mut distances: Vec<f64>) -> f64 {
    distances.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = distances.len();
    let rank = ((0.95 * n as f64).ceil() as usize).max(1);
    distances[rank - 1]
}

/// Symmetrized 95th-percentile surface distance in millimetres: the larger
/// of the two directed nearest-rank percentiles over surface voxels. Empty
/// surfaces yield the documented sentinel with the degenerate flag set.
pub fn hausdorff95(
    pred: &[bool],
    reference: &[bool],
    extents: [usize; 3],
    spacing: [f64; 3],
) -> Result<Hd95> {
    check_same_len(pred, reference)?;
    let n: usize = extents.iter().product();
    if pred.len() != n {
        return Err(EmmaError::Dimension(format!(
            "mask holds {} voxels, extents {extents:?} need {n}",
            pred.len()
        )));
    }
    let sp = surface_voxels(pred, extents);
    let sr = surface_voxels(reference, extents);
    if sp.is_empty() || sr.is_empty() {
        return Ok(Hd95 { millimetres: HD95_EMPTY_SENTINEL, degenerate: true });
    }
    let [_, h, w] = extents;
    let to_ref = squared_edt(&sr, extents, spacing);
    let to_pred = squared_edt(&sp, extents, spacing);
    let d_pr = percentile95(
        sp.iter().map(|&[z, y, x]| to_ref[(z * h + y) * w + x].sqrt()).collect(),
    );
    let d_rp = percentile95(
        sr.iter().map(|&[z, y, x]| to_pred[(z * h + y) * w + x].sqrt()).collect(),
    );
    Ok(Hd95 { millimetres: d_pr.max(d_rp), degenerate: false })
}

/// All-pairs reference implementation; quadratic, for small oracles only.
pub fn hausdorff95_bruteforce(
    pred: &[bool],
    reference: &[bool],
    extents: [usize; 3],
    spacing: [f64; 3],
) -> Result<Hd95> {
    check_same_len(pred, reference)?;
    let sp = surface_voxels(pred, extents);
    let sr = surface_voxels(reference, extents);
    if sp.is_empty() || sr.is_empty() {
        return Ok(Hd95 { millimetres: HD95_EMPTY_SENTINEL, degenerate: true });
    }
    // Mirrors the transform's term construction and addition order so the
    // two agree bit-for-bit on integer-exact spacings.
    let sq = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        let dx = spacing[2] * a[2] as f64 - spacing[2] * b[2] as f64;
        let dy = spacing[1] * a[1] as f64 - spacing[1] * b[1] as f64;
        let dz = spacing[0] * a[0] as f64 - spacing[0] * b[0] as f64;
        dz * dz + (dy * dy + dx * dx)
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        percentile95(
            from.iter()
                .map(|a| {
                    to.iter().map(|b| sq(a, b)).fold(f64::INFINITY, f64::min).sqrt()
                })
                .collect(),
        )
    };
    Ok(Hd95 { millimetres: directed(&sp, &sr).max(directed(&sr, &sp)), degenerate: false })
}

pub const CONFIDENCE_BINS: usize = 10;

/// Histogram of winning-class confidence for voxels predicted as one class,
/// split by whether the prediction matched the reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub label: u8,
    pub correct: [u64; CONFIDENCE_BINS],
    pub incorrect: [u64; CONFIDENCE_BINS],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceDiagnostics {
    pub classes: Vec<ClassConfidence>,
}

impl ConfidenceDiagnostics {
    /// Fraction of predicted voxels whose winning confidence is ≥ 0.9.
    pub fn high_confidence_fraction(&self) -> f64 {
        let mut top = 0u64;
        let mut total = 0u64;
        for c in &self.classes {
            for bin in 0..CONFIDENCE_BINS {
                let n = c.correct[bin] + c.incorrect[bin];
                total += n;
                if bin == CONFIDENCE_BINS - 1 {
                    top += n;
                }
            }
        }
        if total == 0 {
            return 0.0;
        }
        top as f64 / total as f64
    }
}

/// Bins each voxel's winning confidence under its predicted class,
/// separating agreement with the reference labels from disagreement.
pub fn confidence_diagnostics(
    map: &Tensor<f64>,
    ref_labels: &[u8],
) -> Result<ConfidenceDiagnostics> {
    let k = map.channels();
    let vol = map.channel_volume();
    if ref_labels.len() != vol {
        return Err(EmmaError::Dimension(format!(
            "confidence map covers {vol} voxels, labels cover {}",
            ref_labels.len()
        )));
    }
    let mut classes: Vec<ClassConfidence> = (0..k)
        .map(|c| ClassConfidence {
            label: crate::volume::class_to_label(c).unwrap_or(c as u8),
            correct: [0; CONFIDENCE_BINS],
            incorrect: [0; CONFIDENCE_BINS],
        })
        .collect();
    let data = map.data();
    for v in 0..vol {
        let mut best = 0usize;
        let mut p = data[v];
        for c in 1..k {
            let q = data[c * vol + v];
            if q > p {
                best = c;
                p = q;
            }
        }
        let bin = ((p * CONFIDENCE_BINS as f64) as usize).min(CONFIDENCE_BINS - 1);
        let ref_class = label_to_class(ref_labels[v])?;
        if ref_class == best {
            classes[best].correct[bin] += 1;
        } else {
            classes[best].incorrect[bin] += 1;
        }
    }
    Ok(ConfidenceDiagnostics { classes })
}

/// Scores for one region of one case.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub hausdorff95: f64,
    pub hausdorff_degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub enhancing: RegionMetrics,
    pub whole: RegionMetrics,
    pub core: RegionMetrics,
}

impl CaseEvaluation {
    pub fn region(&self, region: Region) -> &RegionMetrics {
        match region {
            Region::Enhancing => &self.enhancing,
            Region::Whole => &self.whole,
            Region::Core => &self.core,
        }
    }
}

/// Compares a predicted label volume against the reference over all three
/// regions.
pub fn evaluate_case(
    case_id: &str,
    pred_labels: &[u8],
    ref_labels: &[u8],
    extents: [usize; 3],
    spacing: [f64; 3],
) -> Result<CaseEvaluation> {
    let pred = merge_regions(pred_labels, extents, spacing)?;
    let reference = merge_regions(ref_labels, extents, spacing)?;
    let mut out: Vec<RegionMetrics> = Vec::with_capacity(3);
    for region in Region::ALL {
        let p = pred.mask(region);
        let r = reference.mask(region);
        let hd = hausdorff95(p, r, extents, spacing)?;
        out.push(RegionMetrics {
            dice: dice(p, r)?,
            sensitivity: sensitivity(p, r)?,
            hausdorff95: hd.millimetres,
            hausdorff_degenerate: hd.degenerate,
        });
    }
    Ok(CaseEvaluation {
        case_id: case_id.to_string(),
        enhancing: out[0],
        whole: out[1],
        core: out[2],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: Vec<CaseEvaluation>,
}

impl EvaluationReport {
    /// Arithmetic mean over cases; the degenerate flag is sticky.
    pub fn mean(&self) -> CaseEvaluation {
        let n = self.cases.len().max(1) as f64;
        let avg = |pick: fn(&CaseEvaluation) -> &RegionMetrics| -> RegionMetrics {
            RegionMetrics {
                dice: self.cases.iter().map(|c| pick(c).dice).sum::<f64>() / n,
                sensitivity: self.cases.iter().map(|c| pick(c).sensitivity).sum::<f64>() / n,
                hausdorff95: self.cases.iter().map(|c| pick(c).hausdorff95).sum::<f64>() / n,
                hausdorff_degenerate: self.cases.iter().any(|c| pick(c).hausdorff_degenerate),
            }
        };
        CaseEvaluation {
            case_id: "mean".to_string(),
            enhancing: avg(|c| &c.enhancing),
            whole: avg(|c| &c.whole),
            core: avg(|c| &c.core),
        }
    }

    /// Aligned plain-text table: one row per case plus the mean, metric
    /// groups ordered Enh. / Whole / Core.
    pub fn text_table(&self) -> String {
        let mut rows = Vec::with_capacity(self.cases.len() + 1);
        rows.extend(self.cases.iter().cloned());
        rows.push(self.mean());
        let id_w = rows.iter().map(|c| c.case_id.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        s.push_str(&format!(
            "{:<id_w$}  {:<22}  {:<22}  {}\n",
            "case", "Dice", "Sensitivity", "HD95 (mm)"
        ));
        s.push_str(&format!(
            "{:<id_w$}  {:<6} {:<6} {:<6}   {:<6} {:<6} {:<6}   {:<8} {:<8} {:<8}\n",
            "", "Enh.", "Whole", "Core", "Enh.", "Whole", "Core", "Enh.", "Whole", "Core"
        ));
        let mut any_degenerate = false;
        for c in &rows {
            let hd = |m: &RegionMetrics| {
                if m.hausdorff_degenerate {
                    format!("{:.2}*", m.hausdorff95)
                } else {
                    format!("{:.2}", m.hausdorff95)
                }
            };
            any_degenerate |= c.enhancing.hausdorff_degenerate
                || c.whole.hausdorff_degenerate
                || c.core.hausdorff_degenerate;
            s.push_str(&format!(
                "{:<id_w$}  {:.4} {:.4} {:.4}   {:.4} {:.4} {:.4}   {:<8} {:<8} {:<8}\n",
                c.case_id,
                c.enhancing.dice,
                c.whole.dice,
                c.core.dice,
                c.enhancing.sensitivity,
                c.whole.sensitivity,
                c.core.sensitivity,
                hd(&c.enhancing),
                hd(&c.whole),
                hd(&c.core),
            ));
        }
        if any_degenerate {
            s.push_str("* empty-surface sentinel\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn region_membership_follows_label_semantics() {
        let labels = [0u8, 1, 2, 4];
        let set = merge_regions(&labels, [1, 1, 4], [1.0; 3]).unwrap();
        // label 4 in all three regions
        assert!(set.whole[3] && set.core[3] && set.enhancing[3]);
        // label 2 only in whole
        assert!(set.whole[2] && !set.core[2] && !set.enhancing[2]);
        // label 1 in whole and core
        assert!(set.whole[1] && set.core[1] && !set.enhancing[1]);
        // background nowhere
        assert!(!set.whole[0] && !set.core[0] && !set.enhancing[0]);
    }

    #[test]
    fn all_background_gives_three_empty_masks() {
        let labels = vec![0u8; 8];
        let set = merge_regions(&labels, [2, 2, 2], [1.0; 3]).unwrap();
        assert!(set.whole.iter().all(|&v| !v));
        assert!(set.core.iter().all(|&v| !v));
        assert!(set.enhancing.iter().all(|&v| !v));
    }

    #[test]
    fn stray_label_is_a_data_error() {
        let labels = [0u8, 3];
        assert_eq!(merge_regions(&labels, [1, 1, 2], [1.0; 3]).unwrap_err().kind(), "data");
    }

    #[test]
    fn dice_hand_arithmetic() {
        // |A| = 2, |B| = 4, overlap 2 -> 2*2/6
        let a = [true, true, false, false, false, false];
        let b = [true, true, true, true, false, false];
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false; 6]).unwrap(), 0.0);
    }

    #[test]
    fn sensitivity_hand_arithmetic() {
        let r = [true, true, true, true, false, false];
        let covers3 = [true, true, true, false, false, true];
        assert!((sensitivity(&covers3, &r).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(sensitivity(&[true; 6], &r).unwrap(), 1.0);
        assert_eq!(sensitivity(&[false; 6], &r).unwrap(), 0.0);
        assert_eq!(sensitivity(&[false; 6], &[false; 6]).unwrap(), 1.0);
    }

    #[test]
    fn sensitivity_is_not_symmetric() {
        let a = [true, true, false, false];
        let b = [true, false, false, false];
        // pred ⊇ ref gives 1.0 one way, 0.5 the other.
        assert_eq!(sensitivity(&a, &b).unwrap(), 1.0);
        assert_eq!(sensitivity(&b, &a).unwrap(), 0.5);
    }

    fn single_voxel(extents: [usize; 3], at: [usize; 3]) -> Vec<bool> {
        let mut m = vec![false; extents.iter().product()];
        m[(at[0] * extents[1] + at[1]) * extents[2] + at[2]] = true;
        m
    }

    #[test]
    fn hausdorff_identical_masks_is_zero() {
        let e = [6, 6, 6];
        let mut m = vec![false; 216];
        for i in [10usize, 43, 77, 100] {
            m[i] = true;
        }
        let hd = hausdorff95(&m, &m, e, [1.0; 3]).unwrap();
        assert_eq!(hd.millimetres, 0.0);
        assert!(!hd.degenerate);
    }

    #[test]
    fn hausdorff_three_four_five_triangle() {
        let e = [8, 8, 8];
        let a = single_voxel(e, [1, 1, 1]);
        let b = single_voxel(e, [1, 4, 5]);
        let hd = hausdorff95(&a, &b, e, [1.0; 3]).unwrap();
        assert_eq!(hd.millimetres, 5.0);
    }

    #[test]
    fn hausdorff_empty_mask_gives_sentinel() {
        let e = [4, 4, 4];
        let a = single_voxel(e, [1, 1, 1]);
        let empty = vec![false; 64];
        let hd = hausdorff95(&a, &empty, e, [1.0; 3]).unwrap();
        assert_eq!(hd.millimetres, HD95_EMPTY_SENTINEL);
        assert!(hd.degenerate);
    }

    #[test]
    fn hausdorff_respects_spacing() {
        let e = [8, 4, 4];
        let a = single_voxel(e, [1, 1, 1]);
        let b = single_voxel(e, [5, 1, 1]);
        let hd = hausdorff95(&a, &b, e, [2.5, 1.0, 1.0]).unwrap();
        assert!((hd.millimetres - 10.0).abs() < 1e-12);
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
        (0..n).map(|_| rng.gen_bool(p)).collect()
    }

    #[test]
    fn transform_matches_bruteforce_exactly_at_unit_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0dd5);
        for trial in 0..25 {
            let e = [
                rng.gen_range(2..=8usize),
                rng.gen_range(2..=8usize),
                rng.gen_range(2..=8usize),
            ];
            let n = e.iter().product();
            let a = random_mask(&mut rng, n, 0.3);
            let b = random_mask(&mut rng, n, 0.3);
            let fast = hausdorff95(&a, &b, e, [1.0; 3]).unwrap();
            let slow = hausdorff95_bruteforce(&a, &b, e, [1.0; 3]).unwrap();
            assert_eq!(fast.millimetres, slow.millimetres, "trial {trial} extents {e:?}");
            assert_eq!(fast.degenerate, slow.degenerate);
        }
    }

    #[test]
    fn transform_matches_bruteforce_under_anisotropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa150);
        for _ in 0..10 {
            let e = [6usize, 5, 7];
            let n = e.iter().product();
            let a = random_mask(&mut rng, n, 0.25);
            let b = random_mask(&mut rng, n, 0.25);
            let sp = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
            let fast = hausdorff95(&a, &b, e, sp).unwrap();
            let slow = hausdorff95_bruteforce(&a, &b, e, sp).unwrap();
            if !fast.degenerate {
                assert!(
                    (fast.millimetres - slow.millimetres).abs() <= 1e-9 * slow.millimetres.max(1.0),
                    "{} vs {}",
                    fast.millimetres,
                    slow.millimetres
                );
            }
        }
    }

    #[test]
    fn one_hot_map_lands_in_the_top_confidence_bin() {
        let mut data = vec![0.0f64; 4 * 8];
        for v in 0..8 {
            data[2 * 8 + v] = 1.0; // class 2 everywhere
        }
        let map = Tensor::new(vec![4, 2, 2, 2], data).unwrap();
        let refs = vec![2u8; 8]; // stored label 2 = class 2
        let d = confidence_diagnostics(&map, &refs).unwrap();
        assert_eq!(d.classes[2].correct[CONFIDENCE_BINS - 1], 8);
        assert!((d.high_confidence_fraction() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_map_lands_at_a_quarter() {
        let map = Tensor::new(vec![4, 1, 1, 2], vec![0.25f64; 8]).unwrap();
        let refs = vec![0u8; 2];
        let d = confidence_diagnostics(&map, &refs).unwrap();
        // Ties keep the first class; 0.25 falls in bin 2 of 10.
        assert_eq!(d.classes[0].correct[2], 2);
        assert_eq!(d.high_confidence_fraction(), 0.0);
    }

    #[test]
    fn evaluate_identical_case_is_perfect() {
        let mut labels = vec![0u8; 4 * 4 * 4];
        labels[21] = 1;
        labels[22] = 2;
        labels[25] = 4;
        let eval =
            evaluate_case("t", &labels, &labels, [4, 4, 4], [1.0; 3]).unwrap();
        for region in Region::ALL {
            let m = eval.region(region);
            assert_eq!(m.dice, 1.0, "{}", region.name());
            assert_eq!(m.sensitivity, 1.0);
            assert_eq!(m.hausdorff95, 0.0);
            assert!(!m.hausdorff_degenerate);
        }
    }

    #[test]
    fn report_table_lists_cases_and_mean() {
        let mut labels = vec![0u8; 27];
        labels[13] = 4;
        let eval = evaluate_case("phantom-0001", &labels, &labels, [3, 3, 3], [1.0; 3]).unwrap();
        let report = EvaluationReport { cases: vec![eval] };
        let table = report.text_table();
        assert!(table.contains("phantom-0001"));
        assert!(table.contains("mean"));
        assert!(table.contains("Enh."));
        assert!(table.contains("HD95 (mm)"));
    }

    proptest! {
        #[test]
        fn regions_nest(labels in proptest::collection::vec(
            prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], 27)) {
            let set = merge_regions(&labels, [3, 3, 3], [1.0; 3]).unwrap();
            for i in 0..27 {
                prop_assert!(!set.enhancing[i] || set.core[i]);
                prop_assert!(!set.core[i] || set.whole[i]);
            }
        }

        #[test]
        fn dice_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, 64, 0.4);
            let b = random_mask(&mut rng, 64, 0.4);
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }

        #[test]
        fn dice_one_means_equal(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, 64, 0.4);
            let b = random_mask(&mut rng, 64, 0.4);
            let d = dice(&a, &b).unwrap();
            prop_assert_eq!(d == 1.0, a == b || (a.iter().all(|v| !v) && b.iter().all(|v| !v)));
        }
    }
}
