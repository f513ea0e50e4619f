//! Finite-difference verification of tape gradients.
//!
//! Every differentiable operation gets a family of randomized instances.
//! Analytic gradients from the reverse sweep are compared coordinate by
//! coordinate against central differences of the rebuilt forward pass.
//! Checks run in f64; non-smooth points (relu kinks, pool ties) are kept
//! out of the sampled inputs by construction.

use crate::error::{EmmaError, Result};
use crate::losses;
use crate::ops::Padding;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Relative error floor: differences below this denominator scale are
/// treated as matching zeros.
const DENOM_FLOOR: f64 = 1e-6;

/// Maximum coordinates sampled per input tensor; small tensors are checked
/// exhaustively.
const MAX_COORDS: usize = 40;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares analytic and numeric gradients of `build` with respect to every
/// tensor in `inputs`. `build` must be deterministic in its inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, rng: &mut ChaCha8Rng) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        if tape.value(root).numel() != 1 {
            return Err(EmmaError::Dimension("gradient check root must be scalar".into()));
        }
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let mut grads = tape.backward(root)?;

    let mut max_err = 0.0f64;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = grads.take_or_zeros(ids[slot], input.shape());
        let n = input.numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..n).collect();
            picked.shuffle(rng);
            picked.truncate(MAX_COORDS);
            picked
        };
        for at in coords {
            let x = input.data()[at];
            let h = 1e-4 * x.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[at] = x + h;
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[at] = x - h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[at];
            let err = (a - numeric).abs() / DENOM_FLOOR.max(a.abs() + numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data sizes agree")
}

/// Uniform values nudged away from zero so relu inputs sit off the kink.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        let sign = if *v >= 0.0 { 1.0 } else { -1.0 };
        *v = sign * (0.05 + v.abs());
    }
    t
}

/// A random permutation scaled to guarantee pairwise separation, so pool
/// windows have unique maxima even under finite-difference nudges.
fn rand_tensor_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data: Vec<f64> = order.iter().map(|&r| (r as f64 - n as f64 / 2.0) * 0.02).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data sizes agree")
}

fn rand_labels(rng: &mut ChaCha8Rng, count: usize, class_count: usize) -> Vec<u8> {
    (0..count).map(|_| rng.gen_range(0..class_count) as u8).collect()
}

type InstanceFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64> + Sync>;

/// One named family of randomized gradient-check instances.
pub struct OpCheck {
    pub name: &'static str,
    run: InstanceFn,
}

impl OpCheck {
    pub fn run_instances(&self, instances: usize, seed: u64) -> Result<CheckOutcome> {
        let mut max_err = 0.0f64;
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ fxhash(self.name)
                    .wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            );
            let err = (self.run)(&mut rng)?;
            if err > max_err {
                max_err = err;
            }
        }
        Ok(CheckOutcome {
            name: self.name,
            instances,
            max_rel_err: max_err,
            tolerance: GRAD_TOLERANCE,
        })
    }
}

fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mask a tensor with fixed random coefficients and reduce to a scalar.
/// Keeps the checked gradients non-degenerate without touching the op
/// under test.
fn masked_sum(
    tape: &mut Tape<f64>,
    value: ValueId,
    rng_mask: &Tensor<f64>,
) -> Result<ValueId> {
    let m = tape.leaf(rng_mask.clone());
    let prod = tape.mul(value, m)?;
    Ok(tape.sum_all(prod))
}

/// The full per-operation check suite. Shapes stay tiny so exhaustive
/// coordinate sweeps fit the runtime budget.
pub fn standard_checks() -> Vec<OpCheck> {
    let mut checks: Vec<OpCheck> = Vec::new();

    checks.push(OpCheck {
        name: "conv3d_valid",
        run: Box::new(|rng| {
            let (ci, co) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let k = [1usize, 3][rng.gen_range(0..2usize)];
            let s = rng.gen_range(k.max(3)..6usize);
            let x = rand_tensor(rng, &[ci, s, s, s], -1.0, 1.0);
            let w = rand_tensor(rng, &[co, ci, k, k, k], -0.7, 0.7);
            let out_shape = crate::ops::conv3d_output_shape(
                x.shape(),
                w.shape(),
                [1, 1, 1],
                Padding::Valid,
            )?;
            let m = rand_tensor(rng, &out_shape, -1.0, 1.0);
            check_gradients(
                &[x, w],
                |tape, ids| {
                    let y = tape.conv3d(ids[0], ids[1], [1, 1, 1], Padding::Valid)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "conv3d_zero_same",
        run: Box::new(|rng| {
            let (ci, co) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let s = rng.gen_range(3..6usize);
            let x = rand_tensor(rng, &[ci, s, s, s], -1.0, 1.0);
            let w = rand_tensor(rng, &[co, ci, 3, 3, 3], -0.7, 0.7);
            let m = rand_tensor(rng, &[co, s, s, s], -1.0, 1.0);
            check_gradients(
                &[x, w],
                |tape, ids| {
                    let y = tape.conv3d(ids[0], ids[1], [1, 1, 1], Padding::ZeroSame)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "conv3d_strided",
        run: Box::new(|rng| {
            let (ci, co) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let k = rng.gen_range(2..4usize);
            let s = rng.gen_range(5..8usize);
            let x = rand_tensor(rng, &[ci, s, s, s], -1.0, 1.0);
            let w = rand_tensor(rng, &[co, ci, k, k, k], -0.7, 0.7);
            let out_shape = crate::ops::conv3d_output_shape(
                x.shape(),
                w.shape(),
                [2, 2, 2],
                Padding::Valid,
            )?;
            let m = rand_tensor(rng, &out_shape, -1.0, 1.0);
            check_gradients(
                &[x, w],
                |tape, ids| {
                    let y = tape.conv3d(ids[0], ids[1], [2, 2, 2], Padding::Valid)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "bias_add",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..4usize);
            let s = rng.gen_range(2..5usize);
            let x = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let b = rand_tensor(rng, &[c], -0.5, 0.5);
            let m = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            check_gradients(
                &[x, b],
                |tape, ids| {
                    let y = tape.bias_add(ids[0], ids[1])?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "batch_norm",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = rng.gen_range(3..5usize);
            let x = rand_tensor(rng, &[c, s, s, s], -2.0, 2.0);
            let gamma = rand_tensor(rng, &[c], 0.5, 1.5);
            let beta = rand_tensor(rng, &[c], -0.5, 0.5);
            let m = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            check_gradients(
                &[x, gamma, beta],
                |tape, ids| {
                    let (y, _, _) = tape.batch_norm(ids[0], ids[1], ids[2], 1e-5)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "relu",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = rng.gen_range(3..6usize);
            let x = rand_tensor_off_kink(rng, &[c, s, s, s]);
            let m = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.relu(ids[0]);
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "max_pool",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = [4usize, 6][rng.gen_range(0..2usize)];
            let x = rand_tensor_distinct(rng, &[c, s, s, s]);
            let out_shape =
                crate::ops::max_pool3d_output_shape(x.shape(), [2, 2, 2], [2, 2, 2])?;
            let m = rand_tensor(rng, &out_shape, -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.max_pool(ids[0], [2, 2, 2], [2, 2, 2])?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "downsample_average",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let f = rng.gen_range(2..4usize);
            let s = f * rng.gen_range(1..3usize);
            let x = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let m = rand_tensor(rng, &[c, s / f, s / f, s / f], -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.downsample_avg(ids[0], f)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "upsample_repeat",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let f = rng.gen_range(2..4usize);
            let s = rng.gen_range(2..4usize);
            let x = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let m = rand_tensor(rng, &[c, s * f, s * f, s * f], -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.upsample_repeat(ids[0], f)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "upsample_trilinear",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = rng.gen_range(2..4usize);
            let x = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let m = rand_tensor(rng, &[c, s * 2, s * 2, s * 2], -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.upsample_trilinear(ids[0], 2)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "softmax_channels",
        run: Box::new(|rng| {
            let k = rng.gen_range(2..5usize);
            let s = rng.gen_range(2..4usize);
            let x = rand_tensor(rng, &[k, s, s, s], -2.0, 2.0);
            let m = rand_tensor(rng, &[k, s, s, s], -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.softmax(ids[0])?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "concat_channels",
        run: Box::new(|rng| {
            let (ca, cb) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let s = rng.gen_range(2..4usize);
            let a = rand_tensor(rng, &[ca, s, s, s], -1.0, 1.0);
            let b = rand_tensor(rng, &[cb, s, s, s], -1.0, 1.0);
            let m = rand_tensor(rng, &[ca + cb, s, s, s], -1.0, 1.0);
            check_gradients(
                &[a, b],
                |tape, ids| {
                    let y = tape.concat(ids[0], ids[1])?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "add",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = rng.gen_range(2..5usize);
            let a = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let b = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let m = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            check_gradients(
                &[a, b],
                |tape, ids| {
                    let y = tape.add(ids[0], ids[1])?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "mul",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = rng.gen_range(2..5usize);
            let a = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let b = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            check_gradients(
                &[a, b],
                |tape, ids| {
                    let y = tape.mul(ids[0], ids[1])?;
                    Ok(tape.sum_all(y))
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "crop_center",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = 2 * rng.gen_range(2..4usize) + 1;
            let t = s - 2;
            let x = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let m = rand_tensor(rng, &[c, t, t, t], -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.crop_center(ids[0], [t, t, t])?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "dropout",
        run: Box::new(|rng| {
            let c = rng.gen_range(1..3usize);
            let s = rng.gen_range(2..5usize);
            let x = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            let keep = 0.5;
            let mask: Vec<u8> = (0..x.numel()).map(|_| u8::from(rng.gen_bool(keep))).collect();
            let m = rand_tensor(rng, &[c, s, s, s], -1.0, 1.0);
            check_gradients(
                &[x],
                |tape, ids| {
                    let y = tape.dropout(ids[0], mask.clone(), keep)?;
                    masked_sum(tape, y, &m)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "cross_entropy",
        run: Box::new(|rng| {
            let k = rng.gen_range(2..5usize);
            let s = rng.gen_range(2..4usize);
            let logits = rand_tensor(rng, &[k, s, s, s], -2.0, 2.0);
            let labels = rand_labels(rng, s * s * s, k);
            let onehot: Tensor<f64> = losses::one_hot(&labels, &[s, s, s], k)?;
            let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
            check_gradients(
                &[logits],
                |tape, ids| {
                    let probs = tape.softmax(ids[0])?;
                    tape.cross_entropy(probs, onehot.clone(), Some(weights.clone()))
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "soft_dice",
        run: Box::new(|rng| {
            let k = rng.gen_range(2..5usize);
            let s = rng.gen_range(2..4usize);
            let logits = rand_tensor(rng, &[k, s, s, s], -2.0, 2.0);
            let labels = rand_labels(rng, s * s * s, k);
            let onehot: Tensor<f64> = losses::one_hot(&labels, &[s, s, s], k)?;
            let fg = rng.gen_bool(0.5);
            check_gradients(
                &[logits],
                |tape, ids| {
                    let probs = tape.softmax(ids[0])?;
                    tape.soft_dice(probs, onehot.clone(), 1.0, fg)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "soft_iou",
        run: Box::new(|rng| {
            let k = rng.gen_range(2..5usize);
            let s = rng.gen_range(2..4usize);
            let logits = rand_tensor(rng, &[k, s, s, s], -2.0, 2.0);
            let labels = rand_labels(rng, s * s * s, k);
            let onehot: Tensor<f64> = losses::one_hot(&labels, &[s, s, s], k)?;
            let fg = rng.gen_bool(0.5);
            check_gradients(
                &[logits],
                |tape, ids| {
                    let probs = tape.softmax(ids[0])?;
                    tape.soft_iou(probs, onehot.clone(), 1.0, fg)
                },
                rng,
            )
        }),
    });

    checks.push(OpCheck {
        name: "conv_bn_relu_chain",
        run: Box::new(|rng| {
            let s = 5;
            let k = 2;
            let x = rand_tensor(rng, &[2, s, s, s], -1.0, 1.0);
            let w1 = rand_tensor(rng, &[3, 2, 3, 3, 3], -0.5, 0.5);
            let b1 = rand_tensor(rng, &[3], -0.2, 0.2);
            let gamma = rand_tensor(rng, &[3], 0.8, 1.2);
            let beta = rand_tensor(rng, &[3], -0.2, 0.2);
            let w2 = rand_tensor(rng, &[k, 3, 1, 1, 1], -0.5, 0.5);
            let so = s - 2;
            let labels = rand_labels(rng, so * so * so, k);
            let onehot: Tensor<f64> = losses::one_hot(&labels, &[so, so, so], k)?;
            check_gradients(
                &[x, w1, b1, gamma, beta, w2],
                |tape, ids| {
                    let c1 = tape.conv3d(ids[0], ids[1], [1, 1, 1], Padding::Valid)?;
                    let c1 = tape.bias_add(c1, ids[2])?;
                    let (bn, _, _) = tape.batch_norm(c1, ids[3], ids[4], 1e-5)?;
                    let a = tape.relu(bn);
                    let c2 = tape.conv3d(a, ids[5], [1, 1, 1], Padding::Valid)?;
                    let probs = tape.softmax(c2)?;
                    tape.cross_entropy(probs, onehot.clone(), None)
                },
                rng,
            )
        }),
    });

    checks
}

/// Runs every standard check with `instances` randomized cases each.
pub fn run_standard_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    standard_checks().iter().map(|c| c.run_instances(instances, seed)).collect()
}
