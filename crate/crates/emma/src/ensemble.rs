//! The ensemble combination rule: members predict full volumes
//! independently, the confidence maps are averaged voxelwise with uniform
//! weights, and the mean is argmaxed into labels. Tiled full-volume
//! inference lives here too, since members only ever see windows.

use crate::arch::{Family, Network, ParamStore};
use crate::builders::{build_architecture, DEEPMEDIC_CONTEXT, LOW_RES_FACTOR};
use crate::checkpoint::{CheckpointFile, ModelMeta};
use crate::error::{EmmaError, Result};
use crate::forward::forward_infer;
use crate::fsio;
use crate::landmarks::Landmarks;
use crate::ops;
use crate::preprocess::{apply_normalization, Mask, NormalizationSpec, NormalizationVersion};
use crate::tensor::Tensor;
use crate::volume::{class_to_label, LabelVolume, VolumeCase, SEG_LABELS};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Per-voxel probabilities must sum to one within this bound.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

/// Class probabilities over a whole volume, as produced by one member or by
/// averaging several.
#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    /// `[K, D, H, W]` probabilities.
    pub map: Tensor<f64>,
    pub member_id: String,
    /// Version the member's input was normalized with; `None` for averages.
    pub normalization: Option<NormalizationVersion>,
}

impl ConfidenceMap {
    pub fn class_count(&self) -> usize {
        self.map.channels()
    }

    pub fn extents(&self) -> [usize; 3] {
        self.map.spatial().expect("confidence maps are rank 4")
    }

    /// Checks the per-voxel simplex invariant.
    pub fn validate(&self) -> Result<()> {
        let vol = self.map.channel_volume();
        let k = self.map.channels();
        let data = self.map.data();
        for v in 0..vol {
            let mut sum = 0.0;
            for c in 0..k {
                let p = data[c * vol + v];
                if !(0.0..=1.0).contains(&p) {
                    return Err(EmmaError::Data(format!(
                        "confidence of member {} escapes [0, 1] at voxel {v}: {p}",
                        self.member_id
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(EmmaError::Data(format!(
                    "confidences of member {} sum to {sum} at voxel {v}",
                    self.member_id
                )));
            }
        }
        Ok(())
    }
}

/// Inference tiling. One extent serves every family: two-pathway networks
/// read it as the normal-pathway window (output tile = extent − 16),
/// same-padded networks as the window itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingParams {
    #[serde(default = "default_tile_extent")]
    pub tile_extent: usize,
}

fn default_tile_extent() -> usize {
    64
}

impl Default for TilingParams {
    fn default() -> Self {
        TilingParams { tile_extent: default_tile_extent() }
    }
}

/// One axis of one tile: where its output block sits and the sub-interval
/// of the volume this tile alone contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisTile {
    pub corner: usize,
    pub extent: usize,
    pub own_lo: usize,
    pub own_hi: usize,
}

/// Valid-output tiling: blocks abut at multiples of the output tile. The
/// final block may overhang the volume (inputs are zero-padded windows
/// anyway) and is cropped when written, so corners stay multiples of the
/// low-resolution factor and the downsampling grid is tile-independent.
fn axis_plan_valid(d: usize, out_tile: usize) -> Vec<AxisTile> {
    let mut plan = Vec::new();
    let mut corner = 0;
    while corner < d {
        let extent = out_tile.min((d - corner).div_ceil(LOW_RES_FACTOR) * LOW_RES_FACTOR);
        plan.push(AxisTile { corner, extent, own_lo: corner, own_hi: d.min(corner + extent) });
        corner += extent;
    }
    plan
}

/// Same-padded tiling: windows step by `tile − 2·margin` and contribute
/// only their centres, except that the first and last keep their outer
/// borders — the volume ends there, so no wider context exists to crop in
/// favour of. The last window is clamped inside the volume.
fn axis_plan_same(d: usize, tile: usize, margin: usize) -> Vec<AxisTile> {
    if tile >= d {
        return vec![AxisTile { corner: 0, extent: tile, own_lo: 0, own_hi: d }];
    }
    let step = tile - 2 * margin;
    let mut corners = vec![0usize];
    while corners.last().unwrap() + tile < d {
        corners.push((corners.last().unwrap() + step).min(d - tile));
    }
    let last = corners.len() - 1;
    corners
        .iter()
        .enumerate()
        .map(|(j, &q)| AxisTile {
            corner: q,
            extent: tile,
            own_lo: if j == 0 { 0 } else { corners[j - 1] + tile - margin },
            own_hi: if j == last { d } else { q + tile - margin },
        })
        .collect()
}

/// Plans the tiling per axis. The owned intervals of each plan partition
/// `[0, extent)`, so stitching covers every voxel exactly once.
pub fn tile_plan(
    network: &Network,
    extents: [usize; 3],
    tiling: &TilingParams,
) -> Result<[Vec<AxisTile>; 3]> {
    let mut plans: [Vec<AxisTile>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    match network.spec.family {
        Family::Deepmedic => {
            let reach = 2 * DEEPMEDIC_CONTEXT;
            let t = tiling.tile_extent;
            if t <= reach || (t - reach) % LOW_RES_FACTOR != 0 {
                return Err(EmmaError::Parameter(format!(
                    "tile extent {t} does not fit the two-pathway geometry; \
                     need {reach} plus a positive multiple of {LOW_RES_FACTOR}"
                )));
            }
            for (axis, &d) in extents.iter().enumerate() {
                if d < LOW_RES_FACTOR {
                    return Err(EmmaError::Dimension(format!(
                        "volume extent {d} on axis {axis} is below the minimum \
                         {LOW_RES_FACTOR}-voxel output tile"
                    )));
                }
                plans[axis] = axis_plan_valid(d, t - reach);
            }
        }
        _ => {
            let unit = network.divisibility_unit();
            let t = tiling.tile_extent;
            if t == 0 || t % unit != 0 {
                return Err(EmmaError::Parameter(format!(
                    "tile extent {t} is not a positive multiple of the \
                     network's divisibility unit {unit}"
                )));
            }
            let rf = network.receptive_field()?;
            for (axis, &d) in extents.iter().enumerate() {
                if d < unit {
                    return Err(EmmaError::Dimension(format!(
                        "volume extent {d} on axis {axis} is below the minimum \
                         {unit}-voxel tile"
                    )));
                }
                let t_ax = t.min(d.div_ceil(unit) * unit);
                // Half the receptive field would be the borderless margin,
                // but encoder-decoder fields outgrow practical tiles, so the
                // margin is capped at a quarter tile to keep a core.
                let margin = rf[axis].div_ceil(2).min(t_ax / 4);
                plans[axis] = axis_plan_same(d, t_ax, margin);
            }
        }
    }
    Ok(plans)
}

fn write_owned(map: &mut Tensor<f64>, probs: &Tensor<f64>, tz: &AxisTile, ty: &AxisTile, tx: &AxisTile) {
    let k = probs.channels();
    let [ez, ey, ex] = probs.spatial().expect("tile outputs are rank 4");
    let [d, h, w] = map.spatial().expect("the stitched map is rank 4");
    let src = probs.data().to_vec();
    let dst = map.data_mut();
    let n = tx.own_hi - tx.own_lo;
    for c in 0..k {
        for z in tz.own_lo..tz.own_hi {
            let pz = z - tz.corner;
            for y in ty.own_lo..ty.own_hi {
                let py = y - ty.corner;
                let s = ((c * ez + pz) * ey + py) * ex + (tx.own_lo - tx.corner);
                let t = ((c * d + z) * h + y) * w + tx.own_lo;
                dst[t..t + n].copy_from_slice(&src[s..s + n]);
            }
        }
    }
}

/// Runs one member over a whole normalized volume, window by window, and
/// stitches the class probabilities into a dense map.
pub fn predict_full_volume(
    network: &Network,
    params: &ParamStore<f64>,
    member_id: &str,
    normalization: Option<NormalizationVersion>,
    volume: &Tensor<f64>,
    tiling: &TilingParams,
) -> Result<ConfidenceMap> {
    let extents = volume.spatial()?;
    let [d, h, w] = extents;
    let plans = tile_plan(network, extents, tiling)?;
    let mut map = Tensor::<f64>::zeros(&[network.spec.class_count, d, h, w]);
    let two_pathway = matches!(network.spec.family, Family::Deepmedic);
    let ctx = DEEPMEDIC_CONTEXT as i64;
    let reach = ctx * LOW_RES_FACTOR as i64;
    for tz in &plans[0] {
        for ty in &plans[1] {
            for tx in &plans[2] {
                let out = [tz.extent, ty.extent, tx.extent];
                let corner = [tz.corner as i64, ty.corner as i64, tx.corner as i64];
                let probs = if two_pathway {
                    let normal = ops::crop_channels_zero_pad(
                        volume,
                        [corner[0] - ctx, corner[1] - ctx, corner[2] - ctx],
                        [out[0] + 2 * ctx as usize, out[1] + 2 * ctx as usize, out[2] + 2 * ctx as usize],
                    )?;
                    let low_src = ops::crop_channels_zero_pad(
                        volume,
                        [corner[0] - reach, corner[1] - reach, corner[2] - reach],
                        [
                            out[0] + 2 * reach as usize,
                            out[1] + 2 * reach as usize,
                            out[2] + 2 * reach as usize,
                        ],
                    )?;
                    let low = ops::downsample_average(&low_src, LOW_RES_FACTOR)?;
                    forward_infer(network, params, &[normal, low])?
                } else {
                    let window = ops::crop_channels_zero_pad(volume, corner, out)?;
                    forward_infer(network, params, &[window])?
                };
                write_owned(&mut map, &probs, tz, ty, tx);
            }
        }
    }
    Ok(ConfidenceMap { map, member_id: member_id.to_string(), normalization })
}

/// Voxelwise arithmetic mean with uniform weights, summed in the listed
/// order so reruns are bit-identical.
pub fn average_confidences(maps: &[ConfidenceMap]) -> Result<ConfidenceMap> {
    let first = maps
        .first()
        .ok_or_else(|| EmmaError::Parameter("an ensemble needs at least one confidence map".into()))?;
    for m in &maps[1..] {
        if m.map.shape() != first.map.shape() {
            return Err(EmmaError::Dimension(format!(
                "confidence maps disagree: member {} is {:?}, member {} is {:?}",
                first.member_id,
                first.map.shape(),
                m.member_id,
                m.map.shape()
            )));
        }
    }
    let mut acc = first.map.data().to_vec();
    for m in &maps[1..] {
        for (a, &v) in acc.iter_mut().zip(m.map.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / maps.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(ConfidenceMap {
        map: Tensor::new(first.map.shape().to_vec(), acc)?,
        member_id: "emma".to_string(),
        normalization: None,
    })
}

/// One label per voxel: the highest-confidence class, ties resolved toward
/// the lower stored label value.
pub fn argmax_segment(map: &ConfidenceMap) -> Result<Vec<u8>> {
    let k = map.map.channels();
    let vol = map.map.channel_volume();
    let data = map.map.data();
    let mut labels = Vec::with_capacity(vol);
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
        labels.push(class_to_label(best)?);
    }
    Ok(labels)
}

/// One line of the ensemble manifest: where the weights live, which
/// architecture they belong to, and how the member's input is normalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub checkpoint: PathBuf,
    pub spec_id: String,
    pub normalization: NormalizationSpec,
}

/// The set of members to combine, plus shared prediction settings. On disk
/// this is a JSON array of entries; class count and tiling are fixed here.
#[derive(Debug, Clone)]
pub struct EnsembleManifest {
    pub members: Vec<ManifestEntry>,
    pub class_count: usize,
    pub tiling: TilingParams,
}

impl EnsembleManifest {
    pub fn new(members: Vec<ManifestEntry>) -> Result<Self> {
        if members.is_empty() {
            return Err(EmmaError::Parameter("the ensemble manifest lists no members".into()));
        }
        Ok(EnsembleManifest {
            members,
            class_count: SEG_LABELS.len(),
            tiling: TilingParams::default(),
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let members: Vec<ManifestEntry> = serde_json::from_slice(bytes)
            .map_err(|e| EmmaError::Format(format!("invalid ensemble manifest: {e}")))?;
        Self::new(members)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsio::read_bytes(path)?;
        Self::from_json(&bytes).map_err(|e| match e {
            EmmaError::Format(m) => EmmaError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// A member checkpoint rebuilt into a runnable network.
#[derive(Debug)]
pub struct LoadedMember {
    pub member_id: String,
    pub network: Network,
    pub params: ParamStore<f64>,
    pub normalization: NormalizationSpec,
    pub landmarks: Option<Landmarks>,
}

/// Loads and cross-checks one member: the manifest entry must agree with
/// what the checkpoint says about itself.
pub fn load_member(entry: &ManifestEntry) -> Result<LoadedMember> {
    let ck = CheckpointFile::read_file(&entry.checkpoint)?;
    let meta: ModelMeta = ck.meta()?;
    if meta.spec.id() != entry.spec_id {
        return Err(EmmaError::Format(format!(
            "{}: checkpoint holds {}, manifest expects {}",
            entry.checkpoint.display(),
            meta.spec.id(),
            entry.spec_id
        )));
    }
    if meta.normalization.version != entry.normalization.version {
        return Err(EmmaError::Format(format!(
            "{}: trained with normalization {}, manifest lists {}",
            entry.checkpoint.display(),
            meta.normalization.version.tag(),
            entry.normalization.version.tag()
        )));
    }
    let network = build_architecture(&meta.spec)?;
    let params = ParamStore::from_checkpoint(&network, &ck)?;
    let landmarks = match (entry.normalization.needs_landmarks(), &entry.normalization.landmarks) {
        (false, _) => None,
        (true, Some(p)) => Some(Landmarks::read_file(p)?),
        (true, None) => {
            return Err(EmmaError::Usage(format!(
                "member {} uses landmark normalization but lists no landmark file",
                entry.spec_id
            )))
        }
    };
    Ok(LoadedMember {
        member_id: format!("{}+{}", entry.spec_id, entry.normalization.version.tag()),
        network,
        params,
        normalization: entry.normalization.clone(),
        landmarks,
    })
}

/// The full combination rule over one raw case: each member normalizes the
/// case its own way and predicts; the stack is averaged and argmaxed. Any
/// member failure aborts the run — members are never dropped silently.
pub fn run_emma(manifest: &EnsembleManifest, case: &VolumeCase) -> Result<(ConfidenceMap, LabelVolume)> {
    if manifest.members.is_empty() {
        return Err(EmmaError::Parameter("the ensemble manifest lists no members".into()));
    }
    let mask = Mask::from_modalities(&case.modalities)?;
    let mut maps = Vec::with_capacity(manifest.members.len());
    for entry in &manifest.members {
        let member = load_member(entry)?;
        if member.network.spec.class_count != manifest.class_count {
            return Err(EmmaError::Parameter(format!(
                "member {} predicts {} classes, the manifest expects {}",
                member.member_id, member.network.spec.class_count, manifest.class_count
            )));
        }
        let normalized = apply_normalization(
            &case.modalities,
            &mask,
            &member.normalization,
            member.landmarks.as_ref(),
        )?;
        maps.push(predict_full_volume(
            &member.network,
            &member.params,
            &member.member_id,
            Some(member.normalization.version),
            &normalized,
            &manifest.tiling,
        )?);
    }
    let mean = average_confidences(&maps)?;
    let labels = argmax_segment(&mean)?;
    let volume = LabelVolume::new(case.extents(), case.spacing, labels)?;
    Ok((mean, volume))
}
