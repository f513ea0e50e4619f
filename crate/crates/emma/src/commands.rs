//! One function per CLI subcommand. The binary stays a thin argument-parsing
//! shell, and integration tests drive the exact code paths users hit.

use std::path::{Path, PathBuf};

use crate::checkpoint::{CheckpointFile, ModelMeta};
use crate::config::RunConfig;
use crate::ensemble::{run_emma, ConfidenceMap, EnsembleManifest, ManifestEntry};
use crate::error::{EmmaError, Result};
use crate::fsio;
use crate::gradcheck::{standard_checks, CheckOutcome};
use crate::landmarks::Landmarks;
use crate::metrics::{evaluate_case, EvaluationReport};
use crate::phantom::{generate_phantom, PhantomParams};
use crate::preprocess::{apply_normalization, Mask, NormalizationSpec};
use crate::tensor::Tensor;
use crate::toy::{toy_demo, ToyReport};
use crate::train::{train, TrainOutcome};
use crate::volume::{LabelVolume, VolumeCase, VolumeContainer, SEG_LABELS};

/// Floating-point width for training. Inference always runs in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Generates `count` phantoms with consecutive derived seeds.
pub fn phantom_generate(
    seed: u64,
    count: usize,
    extents: [usize; 3],
) -> Result<Vec<(VolumeCase, LabelVolume)>> {
    if count == 0 {
        return Err(EmmaError::Parameter("phantom count must be at least 1".into()));
    }
    let params = PhantomParams { extents, ..PhantomParams::default() };
    (0..count as u64).map(|i| generate_phantom(seed.wrapping_add(i), &params)).collect()
}

/// Writes generated phantoms and their labels into `out_dir`; returns the ids.
pub fn cmd_phantom(
    seed: u64,
    count: usize,
    extents: [usize; 3],
    out_dir: &Path,
) -> Result<Vec<String>> {
    let cases = phantom_generate(seed, count, extents)?;
    std::fs::create_dir_all(out_dir)?;
    let mut ids = Vec::with_capacity(cases.len());
    for (case, labels) in &cases {
        case.write(out_dir)?;
        labels.write_file(&VolumeCase::labels_path(out_dir, &case.id))?;
        ids.push(case.id.clone());
    }
    Ok(ids)
}

/// Fits intensity landmarks over the listed cases and writes them as JSON.
pub fn cmd_fit_landmarks(data_dir: &Path, case_ids: &[String], out: &Path) -> Result<()> {
    if case_ids.is_empty() {
        return Err(EmmaError::Parameter("landmark fitting needs at least one case".into()));
    }
    let mut cases: Vec<(Tensor<f64>, Mask)> = Vec::with_capacity(case_ids.len());
    for id in case_ids {
        let case = VolumeCase::read(data_dir, id)?;
        let mask = Mask::from_modalities(&case.modalities)?;
        cases.push((case.modalities, mask));
    }
    let pairs: Vec<(&Tensor<f64>, &Mask)> = cases.iter().map(|(t, m)| (t, m)).collect();
    Landmarks::train(&pairs)?.write_file(out)
}

/// Normalizes one case and writes it under the same id in `out_dir`.
pub fn cmd_normalize(
    data_dir: &Path,
    case_id: &str,
    spec: &NormalizationSpec,
    out_dir: &Path,
) -> Result<PathBuf> {
    let landmarks = match (&spec.landmarks, spec.needs_landmarks()) {
        (Some(path), true) => Some(Landmarks::read_file(path)?),
        (None, true) => {
            return Err(EmmaError::Usage(
                "this normalization version needs a trained landmarks file".into(),
            ))
        }
        _ => None,
    };
    let case = VolumeCase::read(data_dir, case_id)?;
    let mask = Mask::from_modalities(&case.modalities)?;
    let modalities = apply_normalization(&case.modalities, &mask, spec, landmarks.as_ref())?;
    let normalized = VolumeCase { id: case.id, spacing: case.spacing, modalities };
    std::fs::create_dir_all(out_dir)?;
    normalized.write(out_dir)?;
    Ok(out_dir.join(format!("{}.emv", normalized.id)))
}

/// Loads a run configuration and trains at the requested precision.
pub fn cmd_train(config_path: &Path, precision: Precision) -> Result<TrainOutcome> {
    let config = RunConfig::load(config_path)?;
    match precision {
        Precision::F32 => train::<f32>(&config),
        Precision::F64 => train::<f64>(&config),
    }
}

/// Builds a one-member manifest from a checkpoint's own stored description,
/// so a lone model predicts exactly as a one-member ensemble would.
fn manifest_from_checkpoint(
    checkpoint: &Path,
    landmarks: Option<PathBuf>,
    tile: Option<usize>,
) -> Result<EnsembleManifest> {
    let meta: ModelMeta = CheckpointFile::read_file(checkpoint)?.meta()?;
    let mut normalization = meta.normalization.clone();
    if landmarks.is_some() {
        normalization.landmarks = landmarks;
    }
    let mut manifest = EnsembleManifest::new(vec![ManifestEntry {
        checkpoint: checkpoint.to_path_buf(),
        spec_id: meta.spec.id(),
        normalization,
    }])?;
    if let Some(t) = tile {
        manifest.tiling.tile_extent = t;
    }
    Ok(manifest)
}

/// Writes the confidence map (one channel per class) and the argmax labels.
fn write_prediction(
    out_dir: &Path,
    case: &VolumeCase,
    confidence: &ConfidenceMap,
    labels: &LabelVolume,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let channel_names: Vec<String> = SEG_LABELS.iter().map(|l| format!("prob{l}")).collect();
    let container = VolumeContainer::from_tensor(&confidence.map, case.spacing, channel_names)?;
    let prob_path = out_dir.join(format!("{}.prob.emv", case.id));
    container.write_file(&prob_path)?;
    let pred_path = out_dir.join(format!("{}.pred.emv", case.id));
    labels.write_file(&pred_path)?;
    Ok((prob_path, pred_path))
}

/// Single-model prediction; equivalent to a one-member ensemble.
pub fn cmd_predict(
    checkpoint: &Path,
    data_dir: &Path,
    case_id: &str,
    out_dir: &Path,
    tile: Option<usize>,
    landmarks: Option<PathBuf>,
) -> Result<(PathBuf, PathBuf)> {
    let manifest = manifest_from_checkpoint(checkpoint, landmarks, tile)?;
    let case = VolumeCase::read(data_dir, case_id)?;
    let (confidence, labels) = run_emma(&manifest, &case)?;
    write_prediction(out_dir, &case, &confidence, &labels)
}

/// Full ensemble prediction from a manifest file.
pub fn cmd_ensemble(
    manifest_path: &Path,
    data_dir: &Path,
    case_id: &str,
    out_dir: &Path,
    tile: Option<usize>,
) -> Result<(PathBuf, PathBuf)> {
    let mut manifest = EnsembleManifest::load(manifest_path)?;
    if let Some(t) = tile {
        manifest.tiling.tile_extent = t;
    }
    let case = VolumeCase::read(data_dir, case_id)?;
    let (confidence, labels) = run_emma(&manifest, &case)?;
    write_prediction(out_dir, &case, &confidence, &labels)
}

/// Compares a predicted label volume against a reference one.
pub fn cmd_evaluate(pred: &Path, reference: &Path, case_id: &str) -> Result<EvaluationReport> {
    let predicted = LabelVolume::read_file(pred)?;
    let truth = LabelVolume::read_file(reference)?;
    if predicted.extents != truth.extents {
        return Err(EmmaError::Dimension(format!(
            "prediction is {:?} but reference is {:?}",
            predicted.extents, truth.extents
        )));
    }
    let case =
        evaluate_case(case_id, &predicted.labels, &truth.labels, truth.extents, truth.spacing)?;
    Ok(EvaluationReport { cases: vec![case] })
}

/// Runs the finite-difference gradient suite; `scope` is `all` or one check
/// name. Returns the per-check outcomes without judging them.
pub fn cmd_gradcheck(scope: &str, instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let checks = standard_checks();
    let selected: Vec<_> = if scope == "all" {
        checks
    } else {
        checks.into_iter().filter(|c| c.name == scope).collect()
    };
    if selected.is_empty() {
        let names: Vec<&str> = standard_checks().iter().map(|c| c.name).collect();
        return Err(EmmaError::Parameter(format!(
            "unknown gradient check {scope:?}; available: all, {}",
            names.join(", ")
        )));
    }
    selected.iter().map(|c| c.run_instances(instances, seed)).collect()
}

/// Runs the averaging demo and optionally writes the full report as JSON.
pub fn cmd_toydemo(seed: u64, out: Option<&Path>) -> Result<ToyReport> {
    let report = toy_demo(seed)?;
    if let Some(path) = out {
        fsio::write_json(path, &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchitectureSpec, Family, ParamStore};
    use crate::builders::build_architecture;
    use crate::preprocess::NormalizationVersion;
    use tempfile::tempdir;

    fn write_tiny_checkpoint(dir: &Path) -> (PathBuf, String) {
        let spec = ArchitectureSpec::new(Family::Unet, "sum_skip", SEG_LABELS.len())
            .with_width_scale(0.1);
        let network = build_architecture(&spec).unwrap();
        let params: ParamStore<f64> = ParamStore::init(&network, 99);
        let mut file = params.to_checkpoint();
        file.set_meta(&ModelMeta {
            spec: spec.clone(),
            normalization: NormalizationSpec::v1(),
            seed: 99,
            iterations: 0,
        })
        .unwrap();
        let path = dir.join("member.ckpt");
        file.write_file(&path).unwrap();
        (path, spec.id())
    }

    #[test]
    fn phantom_command_writes_cases_their_labels_and_is_deterministic() {
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ids = cmd_phantom(5, 2, [48, 48, 48], &a).unwrap();
        assert_eq!(ids.len(), 2);
        assert_ne!(ids[0], ids[1]);
        let again = cmd_phantom(5, 2, [48, 48, 48], &b).unwrap();
        assert_eq!(ids, again);
        for id in &ids {
            let case = VolumeCase::read(&a, id).unwrap();
            assert_eq!(case.extents(), [48, 48, 48]);
            VolumeCase::read_labels(&a, id).unwrap();
            let bytes_a = std::fs::read(a.join(format!("{id}.emv"))).unwrap();
            let bytes_b = std::fs::read(b.join(format!("{id}.emv"))).unwrap();
            assert_eq!(bytes_a, bytes_b);
        }
    }

    #[test]
    fn undersized_phantom_extents_are_rejected() {
        let dir = tempdir().unwrap();
        let err = cmd_phantom(1, 1, [32, 48, 48], dir.path()).unwrap_err();
        assert_eq!(err.kind(), "parameter");
    }

    #[test]
    fn one_member_ensemble_output_matches_predict_byte_for_byte() {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_phantom(21, 1, [48, 48, 48], &data).unwrap();
        let (ckpt, spec_id) = write_tiny_checkpoint(dir.path());

        let manifest = serde_json::json!([{
            "checkpoint": ckpt,
            "spec_id": spec_id,
            "normalization": { "version": "v1" },
        }]);
        let manifest_path = dir.path().join("manifest.json");
        fsio::write_json(&manifest_path, &manifest).unwrap();

        let out_p = dir.path().join("predict");
        let out_e = dir.path().join("ensemble");
        let (prob_p, pred_p) =
            cmd_predict(&ckpt, &data, "phantom-0021", &out_p, None, None).unwrap();
        let (prob_e, pred_e) =
            cmd_ensemble(&manifest_path, &data, "phantom-0021", &out_e, None).unwrap();
        assert_eq!(std::fs::read(prob_p).unwrap(), std::fs::read(prob_e).unwrap());
        assert_eq!(std::fs::read(pred_p).unwrap(), std::fs::read(pred_e).unwrap());
    }

    #[test]
    fn evaluating_a_prediction_against_itself_is_perfect() {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        let ids = cmd_phantom(33, 1, [48, 48, 48], &data).unwrap();
        let labels = VolumeCase::labels_path(&data, &ids[0]);
        let report = cmd_evaluate(&labels, &labels, &ids[0]).unwrap();
        for region in [&report.cases[0].enhancing, &report.cases[0].whole, &report.cases[0].core] {
            assert_eq!(region.dice, 1.0);
            assert_eq!(region.hausdorff95, 0.0);
        }
    }

    #[test]
    fn mismatched_extents_fail_evaluation() {
        let dir = tempdir().unwrap();
        let a = cmd_phantom(1, 1, [48, 48, 48], &dir.path().join("a")).unwrap();
        let b = cmd_phantom(1, 1, [50, 48, 48], &dir.path().join("b")).unwrap();
        let pa = VolumeCase::labels_path(&dir.path().join("a"), &a[0]);
        let pb = VolumeCase::labels_path(&dir.path().join("b"), &b[0]);
        assert_eq!(cmd_evaluate(&pa, &pb, "x").unwrap_err().kind(), "dimension");
    }

    #[test]
    fn gradcheck_scope_selects_one_suite_and_rejects_unknown_names() {
        let outcomes = cmd_gradcheck("relu", 2, 7).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].name, "relu");
        assert!(outcomes[0].passed());
        assert_eq!(cmd_gradcheck("no_such_op", 2, 7).unwrap_err().kind(), "parameter");
    }

    #[test]
    fn toydemo_writes_a_json_report_when_asked() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let report = cmd_toydemo(4, Some(&path)).unwrap();
        let loaded: ToyReport = fsio::read_json(&path).unwrap();
        assert_eq!(loaded.crossing, report.crossing);
        assert_eq!(loaded.members.len(), report.members.len());
    }

    #[test]
    fn normalize_command_round_trips_and_landmark_fitting_feeds_v3() {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        let ids = cmd_phantom(8, 2, [48, 48, 48], &data).unwrap();

        let out = dir.path().join("norm");
        let path = cmd_normalize(&data, &ids[0], &NormalizationSpec::v1(), &out).unwrap();
        assert!(path.exists());
        let normalized = VolumeCase::read(&out, &ids[0]).unwrap();
        assert_eq!(normalized.extents(), [48, 48, 48]);

        let lm_path = dir.path().join("landmarks.json");
        cmd_fit_landmarks(&data, &ids, &lm_path).unwrap();
        let spec = NormalizationSpec {
            version: NormalizationVersion::V3,
            landmarks: Some(lm_path),
            ..NormalizationSpec::v1()
        };
        cmd_normalize(&data, &ids[1], &spec, &dir.path().join("norm3")).unwrap();

        let missing = NormalizationSpec { version: NormalizationVersion::V3, ..NormalizationSpec::v1() };
        assert_eq!(cmd_normalize(&data, &ids[0], &missing, &out).unwrap_err().kind(), "usage");
    }
}
