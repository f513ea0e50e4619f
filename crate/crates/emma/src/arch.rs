//! Network graphs: a small static DAG of layer nodes, the parameter store
//! keyed by layer names, symbolic shape inference, and receptive-field
//! computation by exact interval propagation.

use crate::checkpoint::CheckpointFile;
use crate::error::{EmmaError, Result};
use crate::ops::Padding;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Deepmedic,
    Fcn,
    Unet,
}

/// Which kind of patch a graph input consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathwayKind {
    /// Full-resolution patch.
    Normal,
    /// Factor-3 average-downsampled context patch.
    LowRes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub variant: String,
    /// Multiplier on every hidden width; 1.0 is the published size.
    #[serde(default = "default_width_scale")]
    pub width_scale: f64,
    pub class_count: usize,
}

fn default_width_scale() -> f64 {
    1.0
}

impl ArchitectureSpec {
    pub fn new(family: Family, variant: &str, class_count: usize) -> Self {
        ArchitectureSpec { family, variant: variant.to_string(), width_scale: 1.0, class_count }
    }

    pub fn with_width_scale(mut self, s: f64) -> Self {
        self.width_scale = s;
        self
    }

    /// The member identifier used in manifests and reports.
    pub fn id(&self) -> String {
        let family = match self.family {
            Family::Deepmedic => "deepmedic",
            Family::Fcn => "fcn",
            Family::Unet => "unet",
        };
        format!("{family}_{}", self.variant)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(EmmaError::Config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(EmmaError::Config("width_scale must be finite and > 0".into()));
        }
        let known: &[&str] = match self.family {
            Family::Deepmedic => &["base", "wide"],
            Family::Fcn => &["vgg", "residual", "residual_shallow"],
            Family::Unet => &["sum_skip", "concat_skip"],
        };
        if !known.contains(&self.variant.as_str()) {
            return Err(EmmaError::Config(format!(
                "unknown variant {:?} for this family; expected one of {known:?}",
                self.variant
            )));
        }
        Ok(())
    }

    /// Hidden width after scaling; never collapses below one channel.
    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_scale).round() as usize).max(1)
    }
}

/// Convolution layer description. `batch_norm`/`relu` make it a standard
/// hidden block; both off is a plain linear layer (heads, projections).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
    pub batch_norm: bool,
    pub relu: bool,
}

impl ConvLayer {
    pub fn hidden(in_channels: usize, out_channels: usize, kernel: [usize; 3], padding: Padding) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride: [1, 1, 1],
            padding,
            batch_norm: true,
            relu: true,
        }
    }

    pub fn linear(in_channels: usize, out_channels: usize, kernel: [usize; 3], padding: Padding) -> Self {
        ConvLayer { batch_norm: false, relu: false, ..ConvLayer::hidden(in_channels, out_channels, kernel, padding) }
    }
}

#[derive(Debug, Clone)]
pub enum GraphOp {
    Input(PathwayKind),
    Conv(ConvLayer),
    MaxPool { window: [usize; 3], stride: [usize; 3] },
    UpsampleRepeat { factor: usize },
    /// Centre-crop spatial extents to match another node's output.
    CropToMatch { target: usize },
    /// Channel concatenation of all inputs, in order.
    Concat,
    /// Elementwise sum of all inputs.
    Add,
    Dropout { keep: f64 },
    Softmax,
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub name: String,
    pub op: GraphOp,
    pub inputs: Vec<usize>,
}

/// A built network: nodes in topological order ending at a softmax output.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ArchitectureSpec,
    pub nodes: Vec<GraphNode>,
    pub output: usize,
}

impl Network {
    pub fn input_kinds(&self) -> Vec<PathwayKind> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                GraphOp::Input(k) => Some(k),
                _ => None,
            })
            .collect()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (&str, &ConvLayer)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            GraphOp::Conv(c) => Some((n.name.as_str(), c)),
            _ => None,
        })
    }

    /// Total learnable parameter count: kernel + bias per conv, plus the
    /// batch-norm affine pair per normalized conv.
    pub fn parameter_count(&self) -> usize {
        self.conv_layers()
            .map(|(_, c)| {
                let k = c.kernel[0] * c.kernel[1] * c.kernel[2];
                let mut n = c.out_channels * c.in_channels * k + c.out_channels;
                if c.batch_norm {
                    n += 2 * c.out_channels;
                }
                n
            })
            .sum()
    }

    /// Structural validation: topological input references, channel
    /// consistency, and a shape dry run on a nominal input.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (i, node) in self.nodes.iter().enumerate() {
            for &inp in &node.inputs {
                if inp >= i {
                    return Err(EmmaError::Config(format!(
                        "node {} references a later node; graph must be topological",
                        node.name
                    )));
                }
            }
            if let GraphOp::CropToMatch { target } = node.op {
                if target >= i {
                    return Err(EmmaError::Config(format!(
                        "node {} crops to a later node's extents",
                        node.name
                    )));
                }
            }
        }
        match self.nodes[self.output].op {
            GraphOp::Softmax => {}
            _ => return Err(EmmaError::Config("network output must be a softmax node".into())),
        }
        let extents = self.nominal_input_extents();
        let shapes = self.infer_shapes(&extents)?;
        let out = &shapes[self.output];
        if out[0] != self.spec.class_count {
            return Err(EmmaError::Config(format!(
                "output has {} channels, class_count is {}",
                out[0], self.spec.class_count
            )));
        }
        Ok(())
    }

    /// A valid input extent per pathway used for dry-run validation.
    pub fn nominal_input_extents(&self) -> Vec<[usize; 3]> {
        self.input_kinds()
            .iter()
            .map(|k| match (self.spec.family, k) {
                (Family::Deepmedic, PathwayKind::Normal) => [25, 25, 25],
                (Family::Deepmedic, PathwayKind::LowRes) => [19, 19, 19],
                _ => [32, 32, 32],
            })
            .collect()
    }

    /// Computes every node's `[C, D, H, W]` output shape for the given input
    /// extents (one entry per input node, in graph order).
    pub fn infer_shapes(&self, input_extents: &[[usize; 3]]) -> Result<Vec<[usize; 4]>> {
        let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(self.nodes.len());
        let mut next_input = 0usize;
        for node in &self.nodes {
            let shape = match &node.op {
                GraphOp::Input(_) => {
                    let e = *input_extents.get(next_input).ok_or_else(|| {
                        EmmaError::Dimension(format!(
                            "network has more input pathways than provided extents ({})",
                            input_extents.len()
                        ))
                    })?;
                    next_input += 1;
                    [4, e[0], e[1], e[2]]
                }
                GraphOp::Conv(c) => {
                    let s = shapes[node.inputs[0]];
                    if s[0] != c.in_channels {
                        return Err(EmmaError::Dimension(format!(
                            "{}: expects {} input channels, got {}",
                            node.name, c.in_channels, s[0]
                        )));
                    }
                    let out = crate::ops::conv3d_output_shape(
                        &s,
                        &[c.out_channels, c.in_channels, c.kernel[0], c.kernel[1], c.kernel[2]],
                        c.stride,
                        c.padding,
                    )
                    .map_err(|e| EmmaError::Dimension(format!("{}: {e}", node.name)))?;
                    [out[0], out[1], out[2], out[3]]
                }
                GraphOp::MaxPool { window, stride } => {
                    let s = shapes[node.inputs[0]];
                    let out = crate::ops::max_pool3d_output_shape(&s, *window, *stride)
                        .map_err(|e| EmmaError::Dimension(format!("{}: {e}", node.name)))?;
                    [out[0], out[1], out[2], out[3]]
                }
                GraphOp::UpsampleRepeat { factor } => {
                    let s = shapes[node.inputs[0]];
                    [s[0], s[1] * factor, s[2] * factor, s[3] * factor]
                }
                GraphOp::CropToMatch { target } => {
                    let s = shapes[node.inputs[0]];
                    let t = shapes[*target];
                    for a in 1..4 {
                        if t[a] > s[a] || (s[a] - t[a]) % 2 != 0 {
                            return Err(EmmaError::Dimension(format!(
                                "{}: cannot centre-crop {:?} to {:?}",
                                node.name,
                                &s[1..],
                                &t[1..]
                            )));
                        }
                    }
                    [s[0], t[1], t[2], t[3]]
                }
                GraphOp::Concat => {
                    let first = shapes[node.inputs[0]];
                    let mut c = 0;
                    for &inp in &node.inputs {
                        let s = shapes[inp];
                        if s[1..] != first[1..] {
                            return Err(EmmaError::Dimension(format!(
                                "{}: concat operands differ spatially: {:?} vs {:?}",
                                node.name,
                                &first[1..],
                                &s[1..]
                            )));
                        }
                        c += s[0];
                    }
                    [c, first[1], first[2], first[3]]
                }
                GraphOp::Add => {
                    let first = shapes[node.inputs[0]];
                    for &inp in &node.inputs {
                        if shapes[inp] != first {
                            return Err(EmmaError::Dimension(format!(
                                "{}: add operands differ in shape",
                                node.name
                            )));
                        }
                    }
                    first
                }
                GraphOp::Dropout { .. } | GraphOp::Softmax => shapes[node.inputs[0]],
            };
            if shape[1] == 0 || shape[2] == 0 || shape[3] == 0 {
                return Err(EmmaError::Dimension(format!(
                    "{}: spatial extent collapsed to zero",
                    node.name
                )));
            }
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Output spatial extents for given input extents.
    pub fn output_extents(&self, input_extents: &[[usize; 3]]) -> Result<[usize; 3]> {
        let shapes = self.infer_shapes(input_extents)?;
        let o = shapes[self.output];
        Ok([o[1], o[2], o[3]])
    }

    /// Interval of input coordinates that can influence output voxel zero,
    /// per input node, propagated backward through every path on a concrete
    /// geometry. Graphs are small, so path enumeration is fine.
    fn reach_intervals(&self) -> Result<BTreeMap<usize, [(i64, i64); 3]>> {
        let extents = self.nominal_input_extents();
        let shapes = self.infer_shapes(&extents)?;
        let mut reach: BTreeMap<usize, [(i64, i64); 3]> = BTreeMap::new();
        self.walk_reach(&shapes, self.output, [(0, 0); 3], &mut reach);
        if reach.is_empty() {
            return Err(EmmaError::Config("network has no path from output to any input".into()));
        }
        Ok(reach)
    }

    fn walk_reach(
        &self,
        shapes: &[[usize; 4]],
        node: usize,
        iv: [(i64, i64); 3],
        reach: &mut BTreeMap<usize, [(i64, i64); 3]>,
    ) {
        let n = &self.nodes[node];
        match &n.op {
            GraphOp::Input(_) => {
                let e = reach.entry(node).or_insert(iv);
                for a in 0..3 {
                    e[a].0 = e[a].0.min(iv[a].0);
                    e[a].1 = e[a].1.max(iv[a].1);
                }
            }
            GraphOp::Conv(c) => {
                let mut next = iv;
                for a in 0..3 {
                    let (k, s) = (c.kernel[a] as i64, c.stride[a] as i64);
                    let pad = match c.padding {
                        Padding::Valid => 0,
                        Padding::ZeroSame => (k - 1) / 2,
                    };
                    next[a] = (iv[a].0 * s - pad, iv[a].1 * s + k - 1 - pad);
                }
                self.walk_reach(shapes, n.inputs[0], next, reach);
            }
            GraphOp::MaxPool { window, stride } => {
                let mut next = iv;
                for a in 0..3 {
                    let (k, s) = (window[a] as i64, stride[a] as i64);
                    next[a] = (iv[a].0 * s, iv[a].1 * s + k - 1);
                }
                self.walk_reach(shapes, n.inputs[0], next, reach);
            }
            GraphOp::UpsampleRepeat { factor } => {
                let f = *factor as i64;
                let mut next = iv;
                for a in 0..3 {
                    next[a] = (iv[a].0.div_euclid(f), iv[a].1.div_euclid(f));
                }
                self.walk_reach(shapes, n.inputs[0], next, reach);
            }
            GraphOp::CropToMatch { target } => {
                let src = shapes[n.inputs[0]];
                let dst = shapes[*target];
                let mut next = iv;
                for a in 0..3 {
                    let off = ((src[a + 1] - dst[a + 1]) / 2) as i64;
                    next[a] = (iv[a].0 + off, iv[a].1 + off);
                }
                self.walk_reach(shapes, n.inputs[0], next, reach);
            }
            GraphOp::Concat | GraphOp::Add => {
                for &inp in &n.inputs {
                    self.walk_reach(shapes, inp, iv, reach);
                }
            }
            GraphOp::Dropout { .. } | GraphOp::Softmax => {
                self.walk_reach(shapes, n.inputs[0], iv, reach);
            }
        }
    }

    /// Receptive field extent per axis: the size of the input region that
    /// can influence one output voxel. The widest pathway is reported.
    pub fn receptive_field(&self) -> Result<[usize; 3]> {
        let reach = self.reach_intervals()?;
        let mut rf = [0usize; 3];
        for iv in reach.values() {
            for a in 0..3 {
                rf[a] = rf[a].max((iv[a].1 - iv[a].0 + 1) as usize);
            }
        }
        Ok(rf)
    }

    /// Smallest full-resolution extent the graph downsamples cleanly: the
    /// largest internal downscale factor reached on any path. Inputs must be
    /// a multiple of this to keep pooled maps and their upsampled copies
    /// aligned.
    pub fn divisibility_unit(&self) -> usize {
        let mut f: Vec<f64> = Vec::with_capacity(self.nodes.len());
        let mut unit = 1.0f64;
        for node in &self.nodes {
            let v = match &node.op {
                GraphOp::Input(_) => 1.0,
                GraphOp::Conv(c) => {
                    f[node.inputs[0]] * (*c.stride.iter().max().expect("stride rank 3") as f64)
                }
                GraphOp::MaxPool { stride, .. } => {
                    f[node.inputs[0]] * (*stride.iter().max().expect("stride rank 3") as f64)
                }
                GraphOp::UpsampleRepeat { factor } => f[node.inputs[0]] / *factor as f64,
                GraphOp::Concat | GraphOp::Add => node
                    .inputs
                    .iter()
                    .map(|&i| f[i])
                    .fold(1.0, f64::max),
                GraphOp::CropToMatch { .. } | GraphOp::Dropout { .. } | GraphOp::Softmax => {
                    f[node.inputs[0]]
                }
            };
            unit = unit.max(v);
            f.push(v);
        }
        // Real factors are small integer powers; round defensively.
        unit.round().max(1.0) as usize
    }

    /// Receptive field per input pathway, in graph order.
    pub fn receptive_field_per_pathway(&self) -> Result<Vec<[usize; 3]>> {
        let reach = self.reach_intervals()?;
        Ok(reach
            .values()
            .map(|iv| {
                [
                    (iv[0].1 - iv[0].0 + 1) as usize,
                    (iv[1].1 - iv[1].0 + 1) as usize,
                    (iv[2].1 - iv[2].0 + 1) as usize,
                ]
            })
            .collect())
    }
}

/// Learnable tensors plus batch-norm running statistics, keyed by
/// `<layer>.<slot>` names. Iteration order is lexicographic, which keeps
/// optimizer traversal and checkpoints deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

pub const SLOT_KERNEL: &str = "kernel";
pub const SLOT_BIAS: &str = "bias";
pub const SLOT_GAMMA: &str = "gamma";
pub const SLOT_BETA: &str = "beta";
pub const SLOT_RUNNING_MEAN: &str = "running_mean";
pub const SLOT_RUNNING_VAR: &str = "running_var";

impl<T: Scalar> ParamStore<T> {
    /// He-normal initialization: kernel std `sqrt(2 / fan_in)`, biases and
    /// beta zero, gamma one, running stats at the identity transform.
    pub fn init(network: &Network, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, c) in network.conv_layers() {
            let k = c.kernel[0] * c.kernel[1] * c.kernel[2];
            let fan_in = (c.in_channels * k) as f64;
            let std = (2.0 / fan_in).sqrt();
            let shape = vec![c.out_channels, c.in_channels, c.kernel[0], c.kernel[1], c.kernel[2]];
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n).map(|_| T::from_f64(std * normal(&mut rng))).collect();
            map.insert(
                format!("{name}.{SLOT_KERNEL}"),
                Tensor::new(shape, data).expect("kernel shape is consistent"),
            );
            map.insert(format!("{name}.{SLOT_BIAS}"), Tensor::zeros(&[c.out_channels]));
            if c.batch_norm {
                map.insert(format!("{name}.{SLOT_GAMMA}"), Tensor::filled(&[c.out_channels], T::ONE));
                map.insert(format!("{name}.{SLOT_BETA}"), Tensor::zeros(&[c.out_channels]));
                map.insert(
                    format!("{name}.{SLOT_RUNNING_MEAN}"),
                    Tensor::zeros(&[c.out_channels]),
                );
                map.insert(
                    format!("{name}.{SLOT_RUNNING_VAR}"),
                    Tensor::filled(&[c.out_channels], T::ONE),
                );
            }
        }
        ParamStore { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| EmmaError::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| EmmaError::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    /// Names of parameters the optimizer updates (running stats excluded).
    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .keys()
            .filter(|k| {
                !k.ends_with(SLOT_RUNNING_MEAN) && !k.ends_with(SLOT_RUNNING_VAR)
            })
            .cloned()
            .collect()
    }

    pub fn value_count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Blends fresh batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, layer: &str, mean: &[T], var: &[T]) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        let one_minus = T::from_f64(1.0 - BN_MOMENTUM);
        let rm = self.get_mut(&format!("{layer}.{SLOT_RUNNING_MEAN}"))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(mean) {
            *r = m * *r + one_minus * b;
        }
        let rv = self.get_mut(&format!("{layer}.{SLOT_RUNNING_VAR}"))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(var) {
            *r = m * *r + one_minus * b;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> CheckpointFile {
        let mut ck = CheckpointFile::default();
        for (name, tensor) in &self.map {
            ck.push_tensor(name, tensor);
        }
        ck
    }

    /// Loads parameters for `network`, validating that every expected record
    /// is present with the right shape.
    pub fn from_checkpoint(network: &Network, ck: &CheckpointFile) -> Result<Self> {
        let expected = ParamStore::<T>::init(network, 0);
        let mut map = BTreeMap::new();
        for (name, proto) in &expected.map {
            let rec = ck.find(name).ok_or_else(|| {
                EmmaError::Format(format!("checkpoint is missing parameter {name}"))
            })?;
            let tensor: Tensor<T> = rec.to_tensor()?;
            if tensor.shape() != proto.shape() {
                return Err(EmmaError::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, network needs {:?}",
                    tensor.shape(),
                    proto.shape()
                )));
            }
            map.insert(name.clone(), tensor);
        }
        Ok(ParamStore { map })
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
