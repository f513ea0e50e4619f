//! Graph execution: a tape-recording training pass and a plain inference
//! pass that uses running statistics and frees activations eagerly.

use crate::arch::{Network, ParamStore, SLOT_BETA, SLOT_BIAS, SLOT_GAMMA, SLOT_KERNEL, SLOT_RUNNING_MEAN, SLOT_RUNNING_VAR};
use crate::arch::{BN_EPS, GraphOp};
use crate::error::{EmmaError, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Result of a recorded forward pass: the tape ready for `backward`, the
/// softmax output, one leaf per trainable parameter, and the batch-norm
/// statistics observed by each normalized layer.
pub struct TrainForward<T: Scalar> {
    pub tape: Tape<T>,
    pub probs: ValueId,
    pub param_ids: BTreeMap<String, ValueId>,
    pub batch_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

fn check_input_arity(net: &Network, supplied: usize) -> Result<()> {
    let want = net.input_kinds().len();
    if supplied != want {
        return Err(EmmaError::Dimension(format!(
            "network takes {want} input pathway(s), got {supplied}"
        )));
    }
    Ok(())
}

fn arg<'a, T: Scalar>(values: &'a [Option<Tensor<T>>], idx: usize) -> &'a Tensor<T> {
    values[idx].as_ref().expect("topological order keeps inputs alive")
}

/// Records the full forward computation on a tape. Dropout draws fresh masks
/// from `dropout_rng` in graph order; pass `None` to run the layers as
/// identities (gradient checking, deterministic probes).
pub fn forward_train<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    inputs: &[Tensor<T>],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TrainForward<T>> {
    check_input_arity(net, inputs.len())?;
    let mut tape = Tape::new();
    let mut param_ids: BTreeMap<String, ValueId> = BTreeMap::new();
    let mut batch_stats = Vec::new();
    let mut values: Vec<ValueId> = Vec::with_capacity(net.nodes.len());
    let mut next_input = 0usize;

    for node in &net.nodes {
        let leaf = |tape: &mut Tape<T>, param_ids: &mut BTreeMap<String, ValueId>, slot: &str| -> Result<ValueId> {
            let name = format!("{}.{slot}", node.name);
            if let Some(&id) = param_ids.get(&name) {
                return Ok(id);
            }
            let id = tape.leaf(params.get(&name)?.clone());
            param_ids.insert(name, id);
            Ok(id)
        };
        let id = match &node.op {
            GraphOp::Input(_) => {
                let id = tape.leaf(inputs[next_input].clone());
                next_input += 1;
                id
            }
            GraphOp::Conv(c) => {
                let kernel = leaf(&mut tape, &mut param_ids, SLOT_KERNEL)?;
                let bias = leaf(&mut tape, &mut param_ids, SLOT_BIAS)?;
                let x = values[node.inputs[0]];
                let mut y = tape.conv3d(x, kernel, c.stride, c.padding)?;
                y = tape.bias_add(y, bias)?;
                if c.batch_norm {
                    let gamma = leaf(&mut tape, &mut param_ids, SLOT_GAMMA)?;
                    let beta = leaf(&mut tape, &mut param_ids, SLOT_BETA)?;
                    let vol = tape.value(y).channel_volume();
                    let (bn, mean, var) = tape.batch_norm(y, gamma, beta, BN_EPS)?;
                    // Running stats keep the unbiased variance; normalization
                    // itself stays biased. A single-voxel field has no
                    // variance estimate, so its running value is left as is.
                    let var = if vol > 1 {
                        let corr = T::from_f64(vol as f64 / (vol - 1) as f64);
                        var.iter().map(|&v| corr * v).collect()
                    } else {
                        params.get(&format!("{}.{SLOT_RUNNING_VAR}", node.name))?.data().to_vec()
                    };
                    batch_stats.push((node.name.clone(), mean, var));
                    y = bn;
                }
                if c.relu {
                    y = tape.relu(y);
                }
                y
            }
            GraphOp::MaxPool { window, stride } => {
                tape.max_pool(values[node.inputs[0]], *window, *stride)?
            }
            GraphOp::UpsampleRepeat { factor } => {
                tape.upsample_repeat(values[node.inputs[0]], *factor)?
            }
            GraphOp::CropToMatch { target } => {
                let extents = tape.value(values[*target]).spatial()?;
                tape.crop_center(values[node.inputs[0]], extents)?
            }
            GraphOp::Concat => {
                let mut acc = values[node.inputs[0]];
                for &inp in &node.inputs[1..] {
                    acc = tape.concat(acc, values[inp])?;
                }
                acc
            }
            GraphOp::Add => {
                let mut acc = values[node.inputs[0]];
                for &inp in &node.inputs[1..] {
                    acc = tape.add(acc, values[inp])?;
                }
                acc
            }
            GraphOp::Dropout { keep } => {
                let x = values[node.inputs[0]];
                match dropout_rng.as_deref_mut() {
                    Some(rng) => {
                        let mask: Vec<u8> = (0..tape.value(x).numel())
                            .map(|_| u8::from(rng.gen::<f64>() < *keep))
                            .collect();
                        tape.dropout(x, mask, *keep)?
                    }
                    None => x,
                }
            }
            GraphOp::Softmax => tape.softmax(values[node.inputs[0]])?,
        };
        values.push(id);
    }

    Ok(TrainForward { tape, probs: values[net.output], param_ids, batch_stats })
}

/// Plain forward pass for prediction: batch norm uses the stored running
/// statistics, dropout is an identity, and intermediate activations are
/// freed as soon as their last consumer has run.
pub fn forward_infer<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    inputs: &[Tensor<T>],
) -> Result<Tensor<T>> {
    check_input_arity(net, inputs.len())?;
    let mut consumers = vec![0usize; net.nodes.len()];
    for node in &net.nodes {
        for &inp in &node.inputs {
            consumers[inp] += 1;
        }
    }
    consumers[net.output] += 1; // the caller consumes the output

    let mut values: Vec<Option<Tensor<T>>> = (0..net.nodes.len()).map(|_| None).collect();
    // Spatial extents survive the value so CropToMatch can free its target.
    let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(net.nodes.len());
    let mut next_input = 0usize;

    for (i, node) in net.nodes.iter().enumerate() {
        let out = match &node.op {
            GraphOp::Input(_) => {
                let t = inputs[next_input].clone();
                next_input += 1;
                t
            }
            GraphOp::Conv(c) => {
                let kernel = params.get(&format!("{}.{SLOT_KERNEL}", node.name))?;
                let bias = params.get(&format!("{}.{SLOT_BIAS}", node.name))?;
                let x = arg(&values, node.inputs[0]);
                let mut y = ops::conv3d_forward(x, kernel, c.stride, c.padding)?;
                y = ops::add_channel_bias(&y, bias)?;
                if c.batch_norm {
                    y = ops::batch_norm_infer(
                        &y,
                        params.get(&format!("{}.{SLOT_GAMMA}", node.name))?,
                        params.get(&format!("{}.{SLOT_BETA}", node.name))?,
                        params.get(&format!("{}.{SLOT_RUNNING_MEAN}", node.name))?,
                        params.get(&format!("{}.{SLOT_RUNNING_VAR}", node.name))?,
                        BN_EPS,
                    )?;
                }
                if c.relu {
                    y = ops::relu(&y);
                }
                y
            }
            GraphOp::MaxPool { window, stride } => {
                ops::max_pool3d_forward(arg(&values, node.inputs[0]), *window, *stride)?.0
            }
            GraphOp::UpsampleRepeat { factor } => {
                ops::upsample_repeat(arg(&values, node.inputs[0]), *factor)?
            }
            GraphOp::CropToMatch { target } => {
                let x = arg(&values, node.inputs[0]);
                let src = x.spatial()?;
                let dst = shapes[*target];
                let mut offset = [0usize; 3];
                for a in 0..3 {
                    if dst[a] > src[a] || (src[a] - dst[a]) % 2 != 0 {
                        return Err(EmmaError::Dimension(format!(
                            "{}: cannot centre-crop {src:?} to {dst:?}",
                            node.name
                        )));
                    }
                    offset[a] = (src[a] - dst[a]) / 2;
                }
                ops::crop_spatial(x, offset, dst)?
            }
            GraphOp::Concat => {
                let mut acc = arg(&values, node.inputs[0]).clone();
                for &inp in &node.inputs[1..] {
                    acc = ops::concat_channels(&acc, arg(&values, inp))?;
                }
                acc
            }
            GraphOp::Add => {
                let mut acc = arg(&values, node.inputs[0]).clone();
                for &inp in &node.inputs[1..] {
                    acc = ops::add(&acc, arg(&values, inp))?;
                }
                acc
            }
            GraphOp::Dropout { .. } => arg(&values, node.inputs[0]).clone(),
            GraphOp::Softmax => ops::softmax_channels(arg(&values, node.inputs[0]))?,
        };
        shapes.push(out.spatial()?);
        values[i] = Some(out);
        for &inp in &node.inputs {
            consumers[inp] -= 1;
            if consumers[inp] == 0 {
                values[inp] = None;
            }
        }
    }

    values[net.output]
        .take()
        .ok_or_else(|| EmmaError::Config("network output was consumed internally".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchitectureSpec, Family};
    use crate::builders::build_architecture;
    use rand::SeedableRng;

    fn rand_input(extents: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4 * extents[0] * extents[1] * extents[2];
        Tensor::new(
            vec![4, extents[0], extents[1], extents[2]],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tiny(family: Family, variant: &str) -> ArchitectureSpec {
        ArchitectureSpec::new(family, variant, 4).with_width_scale(0.1)
    }

    #[test]
    fn unet_inference_output_is_a_simplex_field() {
        let net = build_architecture(&tiny(Family::Unet, "sum_skip")).unwrap();
        let params = ParamStore::<f64>::init(&net, 5);
        let probs = forward_infer(&net, &params, &[rand_input([16, 16, 16], 1)]).unwrap();
        assert_eq!(probs.shape(), &[4, 16, 16, 16]);
        for v in 0..probs.channel_volume() {
            let sum: f64 = (0..4).map(|c| probs.data()[c * probs.channel_volume() + v]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deepmedic_inference_center_shape() {
        let net = build_architecture(&tiny(Family::Deepmedic, "base")).unwrap();
        let params = ParamStore::<f64>::init(&net, 5);
        let probs = forward_infer(
            &net,
            &params,
            &[rand_input([25, 25, 25], 1), rand_input([19, 19, 19], 2)],
        )
        .unwrap();
        assert_eq!(probs.shape(), &[4, 9, 9, 9]);
    }

    #[test]
    fn fcn_variants_run_on_a_32_cube() {
        for variant in ["vgg", "residual", "residual_shallow"] {
            let net = build_architecture(&tiny(Family::Fcn, variant)).unwrap();
            let params = ParamStore::<f64>::init(&net, 5);
            let probs = forward_infer(&net, &params, &[rand_input([32, 32, 32], 1)]).unwrap();
            assert_eq!(probs.shape(), &[4, 32, 32, 32], "{variant}");
        }
    }

    #[test]
    fn train_pass_backpropagates_to_every_parameter() {
        let net = build_architecture(&tiny(Family::Unet, "sum_skip")).unwrap();
        let params = ParamStore::<f64>::init(&net, 5);
        let input = rand_input([8, 8, 8], 3);
        let onehot = crate::losses::one_hot::<f64>(&[1u8; 512], &[8, 8, 8], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = forward_train(&net, &params, &[input], Some(&mut rng)).unwrap();
        let mut tape = fwd.tape;
        let loss = tape.cross_entropy(fwd.probs, onehot, None).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        for (name, id) in &fwd.param_ids {
            let g = grads.take(*id).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(g.data().iter().all(|v| v.is_finite()), "{name}");
        }
        assert!(!fwd.batch_stats.is_empty());
    }

    #[test]
    fn dropout_masks_change_with_the_rng_stream() {
        let net = build_architecture(&tiny(Family::Unet, "sum_skip")).unwrap();
        let params = ParamStore::<f64>::init(&net, 5);
        let input = rand_input([8, 8, 8], 3);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fwd = forward_train(&net, &params, &[input.clone()], Some(&mut rng)).unwrap();
            fwd.tape.value(fwd.probs).data().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn both_execution_paths_produce_simplex_fields() {
        let net = build_architecture(&tiny(Family::Unet, "concat_skip")).unwrap();
        let params = ParamStore::<f64>::init(&net, 5);
        let input = rand_input([8, 8, 8], 3);
        let probs_i = forward_infer(&net, &params, &[input.clone()]).unwrap();
        let fwd = forward_train(&net, &params, &[input], None).unwrap();
        let probs_t = fwd.tape.value(fwd.probs);
        for probs in [&probs_i, probs_t] {
            let vol = probs.channel_volume();
            for v in 0..vol {
                let sum: f64 = (0..4).map(|c| probs.data()[c * vol + v]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrong_input_arity_is_rejected() {
        let net = build_architecture(&tiny(Family::Deepmedic, "base")).unwrap();
        let params = ParamStore::<f64>::init(&net, 5);
        let err = forward_infer(&net, &params, &[rand_input([25, 25, 25], 1)]).unwrap_err();
        assert_eq!(err.kind(), "dimension");
    }
}
