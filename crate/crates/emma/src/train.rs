//! The training loop: sample a batch of patches, run the taped forward
//! pass, backpropagate, and step the optimizer — with one RNG stream, so a
//! (config, seed) pair determines every byte of the outputs.

use crate::arch::ParamStore;
use crate::builders::build_architecture;
use crate::checkpoint::ModelMeta;
use crate::config::RunConfig;
use crate::error::{EmmaError, Result};
use crate::forward::forward_train;
use crate::fsio;
use crate::landmarks::Landmarks;
use crate::losses::LossKind;
use crate::optim::Optimizer;
use crate::preprocess::{apply_normalization, Mask};
use crate::sampling::{sample_patch, CaseSampler, PatchGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::VolumeCase;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// A case made ready for sampling: normalized modalities in the training
/// precision, raw labels, and the precomputed centre index.
struct PreparedCase<T: Scalar> {
    modalities: Tensor<T>,
    labels: Vec<u8>,
    sampler: CaseSampler,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: u64,
    /// (iteration, mean batch loss) at the logging cadence.
    pub losses: Vec<(u64, f64)>,
}

fn prepare_cases<T: Scalar>(config: &RunConfig) -> Result<Vec<PreparedCase<T>>> {
    let landmarks = match &config.normalization.landmarks {
        Some(path) if config.normalization.needs_landmarks() => Some(Landmarks::read_file(path)?),
        _ => None,
    };
    let mut cases = Vec::with_capacity(config.train_cases.len());
    for id in &config.train_cases {
        let case = VolumeCase::read(&config.data_dir, id)?;
        let labels = VolumeCase::read_labels(&config.data_dir, id)?;
        if labels.extents != case.extents() {
            return Err(EmmaError::Dimension(format!(
                "case {id}: labels are {:?}, modalities are {:?}",
                labels.extents,
                case.extents()
            )));
        }
        let mask = Mask::from_modalities(&case.modalities)?;
        let normalized =
            apply_normalization(&case.modalities, &mask, &config.normalization, landmarks.as_ref())?;
        let sampler = CaseSampler::new(&labels.labels, &mask, config.sampling.background_in_labels)?;
        let modalities = Tensor::new(
            normalized.shape().to_vec(),
            normalized.data().iter().map(|&v| T::from_f64(v)).collect(),
        )?;
        cases.push(PreparedCase { modalities, labels: labels.labels, sampler });
    }
    Ok(cases)
}

/// Runs the configured training loop in precision `T`. Checkpoints are
/// written atomically at the configured cadence and at the final iteration;
/// a non-finite loss aborts immediately, leaving the last-good checkpoint
/// in place.
pub fn train<T: Scalar>(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let network = build_architecture(&config.architecture)?;
    let geometry = PatchGeometry::for_network(&network, config.sampling.patch_extent)?;
    let class_count = config.architecture.class_count;
    let cases = prepare_cases::<T>(config)?;

    std::fs::create_dir_all(&config.output_dir)?;
    let checkpoint_path = config.output_dir.join("checkpoint.ckpt");
    let log_path = config.output_dir.join("train.log");

    let mut params: ParamStore<T> = ParamStore::init(&network, config.seed);
    let mut optimizer = Optimizer::new(&config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let trainable = params.trainable_names();
    // Per-parameter f64 accumulators, zeroed after every optimizer step.
    let mut grad_acc: Vec<Vec<f64>> = trainable
        .iter()
        .map(|name| vec![0.0; params.get(name).expect("trainable names come from the store").numel()])
        .collect();

    let write_checkpoint = |params: &ParamStore<T>, iterations: u64| -> Result<()> {
        let mut ck = params.to_checkpoint();
        ck.set_meta(&ModelMeta {
            spec: config.architecture.clone(),
            normalization: config.normalization.clone(),
            seed: config.seed,
            iterations,
        })?;
        ck.write_file(&checkpoint_path)
    };

    let mut log_lines: Vec<String> = Vec::new();
    let mut losses: Vec<(u64, f64)> = Vec::new();
    for iter in 1..=config.iterations {
        let mut batch_loss = 0.0f64;
        for _ in 0..config.batch_size {
            let case = &cases[rng.gen_range(0..cases.len())];
            let patch = sample_patch(
                &case.modalities,
                &case.labels,
                &case.sampler,
                config.sampling.strategy,
                &geometry,
                class_count,
                config.sampling.augment,
                &mut rng,
            )?;
            let fwd = forward_train(&network, &params, &patch.inputs, Some(&mut rng))?;
            let mut tape = fwd.tape;
            let loss_id = match config.loss.kind {
                LossKind::CrossEntropy => {
                    tape.cross_entropy(fwd.probs, patch.target, config.loss.class_weights.clone())?
                }
                LossKind::SoftDice => {
                    tape.soft_dice(fwd.probs, patch.target, config.loss.smooth, config.loss.foreground_only)?
                }
                LossKind::SoftIou => {
                    tape.soft_iou(fwd.probs, patch.target, config.loss.smooth, config.loss.foreground_only)?
                }
            };
            let loss = tape.value(loss_id).data()[0].to_f64();
            if !loss.is_finite() {
                let mut lines = log_lines;
                lines.push(format!("{iter}\tnon-finite"));
                fsio::atomic_write(&log_path, (lines.join("\n") + "\n").as_bytes())?;
                return Err(EmmaError::Numeric(format!(
                    "loss became non-finite at iteration {iter}; the last-good checkpoint is retained"
                )));
            }
            batch_loss += loss;
            let mut grads = tape.backward(loss_id)?;
            for (slot, name) in grad_acc.iter_mut().zip(&trainable) {
                if let Some(&id) = fwd.param_ids.get(name) {
                    if let Some(g) = grads.take(id) {
                        for (a, &v) in slot.iter_mut().zip(g.data()) {
                            *a += v.to_f64();
                        }
                    }
                }
            }
            // Refresh the normalization statistics after every forward pass.
            for (layer, mean, var) in &fwd.batch_stats {
                params.update_running_stats(layer, mean, var)?;
            }
        }
        batch_loss /= config.batch_size as f64;

        optimizer.begin_step();
        let inv_batch = 1.0 / config.batch_size as f64;
        for (slot, name) in grad_acc.iter_mut().zip(&trainable) {
            let grad: Vec<T> = slot.iter().map(|&g| T::from_f64(g * inv_batch)).collect();
            optimizer.update(name, params.get_mut(name)?.data_mut(), &grad)?;
            slot.fill(0.0);
        }

        if iter == 1 || iter % config.log_every == 0 || iter == config.iterations {
            log::info!("iteration {iter}: loss {batch_loss:.6}");
            log_lines.push(format!("{iter}\t{batch_loss:.9}"));
            losses.push((iter, batch_loss));
        }
        if iter % config.checkpoint_every == 0 || iter == config.iterations {
            write_checkpoint(&params, iter)?;
        }
    }
    fsio::atomic_write(&log_path, (log_lines.join("\n") + "\n").as_bytes())?;
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        log: log_path,
        iterations: config.iterations,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::CheckpointFile;
    use crate::losses::LossSpec;
    use crate::optim::{OptimizerKind, OptimizerSpec};
    use crate::phantom::{generate_phantom, PhantomParams};
    use crate::preprocess::NormalizationSpec;
    use crate::sampling::{SamplingSpec, SamplingStrategy};
    use crate::arch::{ArchitectureSpec, Family};
    use std::path::Path;

    fn write_training_set(dir: &Path, seeds: &[u64]) -> Vec<String> {
        seeds
            .iter()
            .map(|&s| {
                let params = PhantomParams { extents: [48, 48, 48], ..PhantomParams::default() };
                let (case, labels) = generate_phantom(s, &params).unwrap();
                case.write(dir).unwrap();
                labels.write_file(&VolumeCase::labels_path(dir, &case.id)).unwrap();
                case.id.clone()
            })
            .collect()
    }

    fn tiny_config(data_dir: &Path, out_dir: &Path, cases: Vec<String>) -> RunConfig {
        RunConfig {
            seed: 11,
            architecture: ArchitectureSpec::new(Family::Unet, "sum_skip", 4).with_width_scale(0.1),
            loss: LossSpec::cross_entropy(),
            optimizer: OptimizerSpec::new(OptimizerKind::Adam).with_learning_rate(1e-3),
            sampling: SamplingSpec {
                strategy: SamplingStrategy::HealthyTumour5050,
                patch_extent: 16,
                background_in_labels: false,
                augment: true,
            },
            normalization: NormalizationSpec::v1(),
            batch_size: 2,
            iterations: 6,
            log_every: 2,
            checkpoint_every: 3,
            data_dir: data_dir.to_path_buf(),
            train_cases: cases,
            output_dir: out_dir.to_path_buf(),
        }
    }

    #[test]
    fn training_produces_checkpoint_log_and_finite_losses() {
        let dir = tempfile::tempdir().unwrap();
        let cases = write_training_set(dir.path(), &[1, 2]);
        let config = tiny_config(dir.path(), &dir.path().join("run"), cases);
        let outcome = train::<f32>(&config).unwrap();
        assert!(outcome.checkpoint.exists());
        assert!(outcome.log.exists());
        assert!(!outcome.losses.is_empty());
        assert!(outcome.losses.iter().all(|(_, l)| l.is_finite()));

        let ck = CheckpointFile::read_file(&outcome.checkpoint).unwrap();
        let meta: ModelMeta = ck.meta().unwrap();
        assert_eq!(meta.iterations, 6);
        assert_eq!(meta.spec.id(), "unet_sum_skip");
    }

    #[test]
    fn identical_config_and_seed_give_bit_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cases = write_training_set(dir.path(), &[3, 4]);
        let a = tiny_config(dir.path(), &dir.path().join("a"), cases.clone());
        let b = tiny_config(dir.path(), &dir.path().join("b"), cases);
        let out_a = train::<f32>(&a).unwrap();
        let out_b = train::<f32>(&b).unwrap();
        let bytes_a = std::fs::read(&out_a.checkpoint).unwrap();
        let bytes_b = std::fs::read(&out_b.checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b, "the training loop must be bit-reproducible");
        assert_eq!(out_a.losses, out_b.losses);
    }

    #[test]
    fn different_seeds_actually_change_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let cases = write_training_set(dir.path(), &[5]);
        let a = tiny_config(dir.path(), &dir.path().join("a"), cases.clone());
        let mut b = tiny_config(dir.path(), &dir.path().join("b"), cases);
        b.seed = 12;
        let out_a = train::<f32>(&a).unwrap();
        let out_b = train::<f32>(&b).unwrap();
        assert_ne!(
            std::fs::read(&out_a.checkpoint).unwrap(),
            std::fs::read(&out_b.checkpoint).unwrap()
        );
    }

    #[test]
    fn exploding_run_aborts_and_retains_the_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cases = write_training_set(dir.path(), &[6]);
        let mut config = tiny_config(dir.path(), &dir.path().join("run"), cases);
        config.optimizer = OptimizerSpec::new(OptimizerKind::SgdMomentum).with_learning_rate(1e25);
        config.iterations = 10;
        config.checkpoint_every = 1;
        let err = train::<f32>(&config).unwrap_err();
        assert_eq!(err.kind(), "numeric");
        // The periodic write from the last finite iteration survives.
        let ck = CheckpointFile::read_file(&config.output_dir.join("checkpoint.ckpt")).unwrap();
        let meta: ModelMeta = ck.meta().unwrap();
        assert!(meta.iterations >= 1);
    }
}
