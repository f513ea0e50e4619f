//! Reverse-mode autodiff over an append-only operation tape.
//!
//! Forward passes run eagerly: each builder method computes its output
//! immediately and records the operation plus whatever the backward pass
//! needs (pool argmaxes, normalization statistics, dropout masks).
//! Because nodes only ever reference earlier nodes, walking the tape in
//! reverse index order is a reverse topological traversal.

use crate::error::{EmmaError, Result};
use crate::losses::{self, OverlapSaved};
use crate::ops::{self, BatchNormSaved, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv3d { input: ValueId, kernel: ValueId, stride: [usize; 3], padding: Padding },
    BiasAdd { input: ValueId, bias: ValueId },
    BatchNorm { input: ValueId, gamma: ValueId, beta: ValueId, saved: BatchNormSaved<T> },
    Relu { input: ValueId },
    MaxPool { input: ValueId, argmax: Vec<u32> },
    DownsampleAvg { input: ValueId, factor: usize },
    UpsampleRepeat { input: ValueId, factor: usize },
    UpsampleTrilinear { input: ValueId, factor: usize },
    Softmax { input: ValueId },
    Concat { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    CropCenter { input: ValueId, offset: [usize; 3] },
    Dropout { input: ValueId, mask: Vec<u8>, keep: f64 },
    SumAll { input: ValueId },
    CrossEntropy { probs: ValueId, onehot: Tensor<T>, class_weights: Option<Vec<f64>> },
    SoftDice { probs: ValueId, onehot: Tensor<T>, saved: OverlapSaved },
    SoftIou { probs: ValueId, onehot: Tensor<T>, saved: OverlapSaved },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of a scalar root with respect to tape values. Only leaves
/// retain gradients after the backward sweep; interior activations free
/// theirs as soon as they have been propagated.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Gradient for `id`, or zeros of `shape` when the value did not
    /// influence the root.
    pub fn take_or_zeros(&mut self, id: ValueId, shape: &[usize]) -> Tensor<T> {
        self.take(id).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn conv3d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<ValueId> {
        let out = ops::conv3d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(out, Op::Conv3d { input, kernel, stride, padding }))
    }

    pub fn bias_add(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push(out, Op::BiasAdd { input, bias }))
    }

    /// Training-mode batch norm. Returns the output id plus the batch mean
    /// and variance per channel so the caller can maintain running
    /// statistics.
    pub fn batch_norm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<(ValueId, Vec<T>, Vec<T>)> {
        let (out, saved) =
            ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let id = self.push(out, Op::BatchNorm { input, gamma, beta, saved });
        Ok((id, mean, var))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn max_pool(
        &mut self,
        input: ValueId,
        window: [usize; 3],
        stride: [usize; 3],
    ) -> Result<ValueId> {
        let (out, argmax) = ops::max_pool3d_forward(self.value(input), window, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn downsample_avg(&mut self, input: ValueId, factor: usize) -> Result<ValueId> {
        let out = ops::downsample_average(self.value(input), factor)?;
        Ok(self.push(out, Op::DownsampleAvg { input, factor }))
    }

    pub fn upsample_repeat(&mut self, input: ValueId, factor: usize) -> Result<ValueId> {
        let out = ops::upsample_repeat(self.value(input), factor)?;
        Ok(self.push(out, Op::UpsampleRepeat { input, factor }))
    }

    pub fn upsample_trilinear(&mut self, input: ValueId, factor: usize) -> Result<ValueId> {
        let out = ops::upsample_trilinear(self.value(input), factor)?;
        Ok(self.push(out, Op::UpsampleTrilinear { input, factor }))
    }

    pub fn softmax(&mut self, input: ValueId) -> Result<ValueId> {
        let out = ops::softmax_channels(self.value(input))?;
        Ok(self.push(out, Op::Softmax { input }))
    }

    pub fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Crops the centre spatial box of the given extents. Extent differences
    /// must be even so the crop is symmetric.
    pub fn crop_center(&mut self, input: ValueId, extents: [usize; 3]) -> Result<ValueId> {
        let spatial = self.value(input).spatial()?;
        let mut offset = [0usize; 3];
        for a in 0..3 {
            if extents[a] > spatial[a] || (spatial[a] - extents[a]) % 2 != 0 {
                return Err(EmmaError::Dimension(format!(
                    "cannot centre-crop {spatial:?} to {extents:?}"
                )));
            }
            offset[a] = (spatial[a] - extents[a]) / 2;
        }
        let out = ops::crop_spatial(self.value(input), offset, extents)?;
        Ok(self.push(out, Op::CropCenter { input, offset }))
    }

    pub fn dropout(&mut self, input: ValueId, mask: Vec<u8>, keep: f64) -> Result<ValueId> {
        if mask.len() != self.value(input).numel() {
            return Err(EmmaError::Dimension(format!(
                "dropout mask has {} entries for {} activations",
                mask.len(),
                self.value(input).numel()
            )));
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(EmmaError::Parameter(format!("dropout keep probability {keep} not in (0, 1]")));
        }
        let out = ops::dropout_apply(self.value(input), &mask, keep);
        Ok(self.push(out, Op::Dropout { input, mask, keep }))
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let out = ops::sum_all(self.value(input));
        self.push(out, Op::SumAll { input })
    }

    pub fn cross_entropy(
        &mut self,
        probs: ValueId,
        onehot: Tensor<T>,
        class_weights: Option<Vec<f64>>,
    ) -> Result<ValueId> {
        let loss =
            losses::cross_entropy_forward(self.value(probs), &onehot, class_weights.as_deref())?;
        let value = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(value, Op::CrossEntropy { probs, onehot, class_weights }))
    }

    pub fn soft_dice(
        &mut self,
        probs: ValueId,
        onehot: Tensor<T>,
        smooth: f64,
        foreground_only: bool,
    ) -> Result<ValueId> {
        let (loss, saved) =
            losses::soft_dice_forward(self.value(probs), &onehot, smooth, foreground_only)?;
        let value = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(value, Op::SoftDice { probs, onehot, saved }))
    }

    pub fn soft_iou(
        &mut self,
        probs: ValueId,
        onehot: Tensor<T>,
        smooth: f64,
        foreground_only: bool,
    ) -> Result<ValueId> {
        let (loss, saved) =
            losses::soft_iou_forward(self.value(probs), &onehot, smooth, foreground_only)?;
        let value = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(value, Op::SoftIou { probs, onehot, saved }))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every leaf
    /// the root depends on.
    pub fn backward(&self, root: ValueId) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(EmmaError::Dimension(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // Keep leaf gradients for the caller.
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Conv3d { input, kernel, stride, padding } => {
                    let gin = ops::conv3d_backward_input(
                        &gout,
                        self.value(*kernel),
                        self.shape(*input),
                        *stride,
                        *padding,
                    )?;
                    let gw = ops::conv3d_backward_kernel(
                        &gout,
                        self.value(*input),
                        self.shape(*kernel),
                        *stride,
                        *padding,
                    )?;
                    accumulate(&mut grads, *input, gin);
                    accumulate(&mut grads, *kernel, gw);
                }
                Op::BiasAdd { input, bias } => {
                    let gb = ops::add_channel_bias_backward(&gout);
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *input, gout);
                }
                Op::BatchNorm { input, gamma, beta, saved } => {
                    let (gin, dgamma, dbeta) =
                        ops::batch_norm_backward(&gout, saved, self.value(*gamma));
                    accumulate(&mut grads, *input, gin);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu { input } => {
                    let gin = ops::relu_backward(&gout, self.value(*input));
                    accumulate(&mut grads, *input, gin);
                }
                Op::MaxPool { input, argmax } => {
                    let gin = ops::max_pool3d_backward(&gout, argmax, self.shape(*input));
                    accumulate(&mut grads, *input, gin);
                }
                Op::DownsampleAvg { input, factor } => {
                    let gin = ops::downsample_average_backward(&gout, *factor, self.shape(*input));
                    accumulate(&mut grads, *input, gin);
                }
                Op::UpsampleRepeat { input, factor } => {
                    let gin = ops::upsample_repeat_backward(&gout, *factor, self.shape(*input));
                    accumulate(&mut grads, *input, gin);
                }
                Op::UpsampleTrilinear { input, factor } => {
                    let gin =
                        ops::upsample_trilinear_backward(&gout, *factor, self.shape(*input));
                    accumulate(&mut grads, *input, gin);
                }
                Op::Softmax { input } => {
                    let gin = ops::softmax_channels_backward(&gout, &node.value);
                    accumulate(&mut grads, *input, gin);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).channels();
                    let vol = self.value(*a).channel_volume();
                    let ga_data = gout.data()[..ca * vol].to_vec();
                    let gb_data = gout.data()[ca * vol..].to_vec();
                    let ga = Tensor::new(self.shape(*a).to_vec(), ga_data)?;
                    let gb = Tensor::new(self.shape(*b).to_vec(), gb_data)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout);
                }
                Op::Mul { a, b } => {
                    let ga = ops::mul(&gout, self.value(*b))?;
                    let gb = ops::mul(&gout, self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::CropCenter { input, offset } => {
                    let gin = ops::crop_spatial_backward(&gout, *offset, self.shape(*input));
                    accumulate(&mut grads, *input, gin);
                }
                Op::Dropout { input, mask, keep } => {
                    let gin = ops::dropout_apply(&gout, mask, *keep);
                    accumulate(&mut grads, *input, gin);
                }
                Op::SumAll { input } => {
                    let g = gout.item();
                    let gin = Tensor::filled(self.shape(*input), g);
                    accumulate(&mut grads, *input, gin);
                }
                Op::CrossEntropy { probs, onehot, class_weights } => {
                    let gin = losses::cross_entropy_backward(
                        self.value(*probs),
                        onehot,
                        class_weights.as_deref(),
                        gout.item().to_f64(),
                    );
                    accumulate(&mut grads, *probs, gin);
                }
                Op::SoftDice { probs, onehot, saved } => {
                    let gin = losses::soft_dice_backward(onehot, saved, gout.item().to_f64());
                    accumulate(&mut grads, *probs, gin);
                }
                Op::SoftIou { probs, onehot, saved } => {
                    let gin = losses::soft_iou_backward(onehot, saved, gout.item().to_f64());
                    accumulate(&mut grads, *probs, gin);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: ValueId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
