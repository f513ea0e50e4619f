//! The seven member architectures, assembled as layer graphs.
//!
//! Conventions shared by every family: all hidden convolutions carry a bias,
//! batch norm, and a relu; classification and projection convolutions are
//! plain linear layers. Residual additions merge post-activation streams,
//! centre-cropping the earlier map and inserting a learned 1x1x1 projection
//! whenever widths differ.

use crate::arch::{ArchitectureSpec, ConvLayer, Family, GraphNode, GraphOp, Network, PathwayKind};
use crate::error::{EmmaError, Result};
use crate::ops::Padding;

/// Per-side spatial shrink of the valid two-pathway column: eight 3x3x3
/// convolutions remove sixteen voxels in total.
pub const DEEPMEDIC_CONTEXT: usize = 8;

/// Downsampling factor of the low-resolution context pathway.
pub const LOW_RES_FACTOR: usize = 3;

/// Low-resolution patch extents paired with a normal-resolution patch, such
/// that both pathway outputs align: `(low - 16) * 3 == normal - 16`.
pub fn deepmedic_low_extents(normal: [usize; 3]) -> Result<[usize; 3]> {
    let mut low = [0usize; 3];
    for a in 0..3 {
        let shrink = 2 * DEEPMEDIC_CONTEXT;
        if normal[a] <= shrink || (normal[a] - shrink) % LOW_RES_FACTOR != 0 {
            return Err(EmmaError::Dimension(format!(
                "normal patch extent {} must exceed {shrink} by a positive multiple of {LOW_RES_FACTOR}",
                normal[a]
            )));
        }
        low[a] = (normal[a] - shrink) / LOW_RES_FACTOR + shrink;
    }
    Ok(low)
}

pub fn build_architecture(spec: &ArchitectureSpec) -> Result<Network> {
    spec.validate()?;
    let net = match (spec.family, spec.variant.as_str()) {
        (Family::Deepmedic, "base") => build_deepmedic(spec, 1),
        (Family::Deepmedic, "wide") => build_deepmedic(spec, 2),
        (Family::Fcn, "vgg") => build_fcn(spec, FcnKind::Vgg),
        (Family::Fcn, "residual") => build_fcn(spec, FcnKind::Residual),
        (Family::Fcn, "residual_shallow") => build_fcn(spec, FcnKind::ResidualShallow),
        (Family::Unet, "sum_skip") => build_unet(spec, Merge::Sum),
        (Family::Unet, "concat_skip") => build_unet(spec, Merge::Concat),
        _ => unreachable!("spec.validate() rejects unknown variants"),
    };
    net.validate()?;
    Ok(net)
}

struct GraphBuilder {
    nodes: Vec<GraphNode>,
}

impl GraphBuilder {
    fn new() -> Self {
        GraphBuilder { nodes: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, op: GraphOp, inputs: Vec<usize>) -> usize {
        self.nodes.push(GraphNode { name: name.into(), op, inputs });
        self.nodes.len() - 1
    }

    fn input(&mut self, name: &str, kind: PathwayKind) -> usize {
        self.push(name, GraphOp::Input(kind), vec![])
    }

    fn conv(&mut self, name: impl Into<String>, from: usize, layer: ConvLayer) -> usize {
        self.push(name, GraphOp::Conv(layer), vec![from])
    }

    /// Hidden 3x3x3 stride-1 block: conv + bias + batch norm + relu.
    fn hidden3(&mut self, name: impl Into<String>, from: usize, cin: usize, cout: usize, padding: Padding) -> usize {
        self.conv(name, from, ConvLayer::hidden(cin, cout, [3, 3, 3], padding))
    }

    /// Hidden 1x1x1 block.
    fn hidden1(&mut self, name: impl Into<String>, from: usize, cin: usize, cout: usize) -> usize {
        self.conv(name, from, ConvLayer::hidden(cin, cout, [1, 1, 1], Padding::Valid))
    }

    /// Linear 1x1x1 layer (classifier head, residual projection).
    fn linear1(&mut self, name: impl Into<String>, from: usize, cin: usize, cout: usize) -> usize {
        self.conv(name, from, ConvLayer::linear(cin, cout, [1, 1, 1], Padding::Valid))
    }

    fn max_pool2(&mut self, name: impl Into<String>, from: usize) -> usize {
        self.push(name, GraphOp::MaxPool { window: [2, 2, 2], stride: [2, 2, 2] }, vec![from])
    }

    fn upsample(&mut self, name: impl Into<String>, from: usize, factor: usize) -> usize {
        self.push(name, GraphOp::UpsampleRepeat { factor }, vec![from])
    }

    fn crop_to(&mut self, name: impl Into<String>, from: usize, target: usize) -> usize {
        self.push(name, GraphOp::CropToMatch { target }, vec![from])
    }

    fn concat(&mut self, name: impl Into<String>, inputs: Vec<usize>) -> usize {
        self.push(name, GraphOp::Concat, inputs)
    }

    fn add(&mut self, name: impl Into<String>, a: usize, b: usize) -> usize {
        self.push(name, GraphOp::Add, vec![a, b])
    }

    fn dropout(&mut self, name: impl Into<String>, from: usize, keep: f64) -> usize {
        self.push(name, GraphOp::Dropout { keep }, vec![from])
    }

    fn finish(mut self, spec: &ArchitectureSpec, from: usize) -> Network {
        let output = self.push("softmax", GraphOp::Softmax, vec![from]);
        Network { spec: spec.clone(), nodes: self.nodes, output }
    }
}

/// Two-pathway valid-convolution column. `width_factor` doubles every width
/// for the wide variant.
fn build_deepmedic(spec: &ArchitectureSpec, width_factor: usize) -> Network {
    let w: Vec<usize> =
        [30, 30, 40, 40, 40, 40, 50, 50].iter().map(|&v| spec.scaled(v * width_factor)).collect();
    let head_w = spec.scaled(150 * width_factor);
    let mut g = GraphBuilder::new();

    // One pathway: eight valid 3x3x3 blocks with residual sums closing over
    // layer pairs 3-4, 5-6, and 7-8. The skip source is the stream entering
    // the pair, centre-cropped to the later map and projected when widths
    // change.
    let pathway = |g: &mut GraphBuilder, prefix: &str, kind: PathwayKind| -> usize {
        let input = g.input(&format!("{prefix}.input"), kind);
        let mut stream = input;
        let mut cin = 4;
        let mut block_input = input;
        let mut block_input_w = 0usize;
        for (i, &cout) in w.iter().enumerate() {
            if i == 2 || i == 4 || i == 6 {
                block_input = stream;
                block_input_w = cin;
            }
            stream = g.hidden3(format!("{prefix}.conv{}", i + 1), stream, cin, cout, Padding::Valid);
            cin = cout;
            if i == 3 || i == 5 || i == 7 {
                let cropped =
                    g.crop_to(format!("{prefix}.skip{}.crop", i + 1), block_input, stream);
                let skip = if block_input_w == cout {
                    cropped
                } else {
                    g.linear1(format!("{prefix}.skip{}.proj", i + 1), cropped, block_input_w, cout)
                };
                stream = g.add(format!("{prefix}.res{}", i + 1), stream, skip);
            }
        }
        stream
    };

    let normal = pathway(&mut g, "normal", PathwayKind::Normal);
    let low = pathway(&mut g, "low", PathwayKind::LowRes);
    let low_up = g.upsample("low.upsample", low, LOW_RES_FACTOR);
    let joined = g.concat("join", vec![normal, low_up]);
    let c_join = 2 * w[7];
    let h1 = g.hidden1("head.conv1", joined, c_join, head_w);
    let h2 = g.hidden1("head.conv2", h1, head_w, head_w);
    let logits = g.linear1("head.classifier", h2, head_w, spec.class_count);
    g.finish(spec, logits)
}

#[derive(Clone, Copy, PartialEq)]
enum FcnKind {
    Vgg,
    Residual,
    ResidualShallow,
}

/// Multi-scale same-padded column: convolution scales separated by 2x2x2
/// max-pools, every scale's tail repeated back up to full resolution and
/// concatenated in front of a 1x1x1 head.
fn build_fcn(spec: &ArchitectureSpec, kind: FcnKind) -> Network {
    let s = |w: usize| spec.scaled(w);
    let mut g = GraphBuilder::new();
    let input = g.input("input", PathwayKind::Normal);

    // taps: (node, channels, upsample factor back to full resolution)
    let mut taps: Vec<(usize, usize, usize)> = Vec::new();

    let c1a = g.hidden3("scale1.conv1", input, 4, s(16), Padding::ZeroSame);
    let c1b = g.hidden3("scale1.conv2", c1a, s(16), s(16), Padding::ZeroSame);
    taps.push((c1b, s(16), 1));
    let p1 = g.max_pool2("pool1", c1b);

    let c2a = g.hidden3("scale2.conv1", p1, s(16), s(32), Padding::ZeroSame);
    let c2b = g.hidden3("scale2.conv2", c2a, s(32), s(32), Padding::ZeroSame);
    taps.push((c2b, s(32), 2));
    let p2 = g.max_pool2("pool2", c2b);

    let scale3_end = match kind {
        FcnKind::Vgg => {
            let a = g.hidden3("scale3.conv1", p2, s(32), s(64), Padding::ZeroSame);
            let b = g.hidden3("scale3.conv2", a, s(64), s(64), Padding::ZeroSame);
            g.hidden3("scale3.conv3", b, s(64), s(64), Padding::ZeroSame)
        }
        FcnKind::Residual | FcnKind::ResidualShallow => {
            // Four two-convolution residual blocks at width 64.
            let mut stream = p2;
            let mut cin = s(32);
            for b in 1..=4 {
                let prefix = format!("scale3.block{b}");
                let a = g.hidden3(format!("{prefix}.conv1"), stream, cin, s(64), Padding::ZeroSame);
                let c = g.hidden3(format!("{prefix}.conv2"), a, s(64), s(64), Padding::ZeroSame);
                let skip = if cin == s(64) {
                    stream
                } else {
                    g.linear1(format!("{prefix}.proj"), stream, cin, s(64))
                };
                stream = g.add(format!("{prefix}.sum"), c, skip);
                cin = s(64);
            }
            stream
        }
    };
    taps.push((scale3_end, s(64), 4));
    let p3 = g.max_pool2("pool3", scale3_end);

    let scale4_end = match kind {
        FcnKind::Vgg => {
            let a = g.hidden3("scale4.conv1", p3, s(64), s(128), Padding::ZeroSame);
            let b = g.hidden3("scale4.conv2", a, s(128), s(128), Padding::ZeroSame);
            let end = g.hidden3("scale4.conv3", b, s(128), s(128), Padding::ZeroSame);
            taps.push((end, s(128), 8));
            end
        }
        FcnKind::Residual | FcnKind::ResidualShallow => {
            // Four bottleneck blocks: 1x1x1 down to 128, 3x3x3 at 128,
            // 1x1x1 out to 512.
            let mut stream = p3;
            let mut cin = s(64);
            for b in 1..=4 {
                let prefix = format!("scale4.block{b}");
                let a = g.hidden1(format!("{prefix}.conv1"), stream, cin, s(128));
                let c = g.hidden3(format!("{prefix}.conv2"), a, s(128), s(128), Padding::ZeroSame);
                let d = g.hidden1(format!("{prefix}.conv3"), c, s(128), s(512));
                let skip = if cin == s(512) {
                    stream
                } else {
                    g.linear1(format!("{prefix}.proj"), stream, cin, s(512))
                };
                stream = g.add(format!("{prefix}.sum"), d, skip);
                cin = s(512);
            }
            taps.push((stream, s(512), 8));
            stream
        }
    };

    if kind != FcnKind::ResidualShallow {
        let p4 = g.max_pool2("pool4", scale4_end);
        let cin = match kind {
            FcnKind::Vgg => s(128),
            _ => s(512),
        };
        let a = g.hidden3("scale5.conv1", p4, cin, s(256), Padding::ZeroSame);
        let b = g.hidden3("scale5.conv2", a, s(256), s(256), Padding::ZeroSame);
        let end = g.hidden3("scale5.conv3", b, s(256), s(256), Padding::ZeroSame);
        taps.push((end, s(256), 16));
    }

    let mut merged = Vec::new();
    let mut c_total = 0;
    for (i, &(node, channels, factor)) in taps.iter().enumerate() {
        c_total += channels;
        merged.push(if factor == 1 {
            node
        } else {
            g.upsample(format!("up{}", i + 1), node, factor)
        });
    }
    let joined = g.concat("join", merged);
    let h1 = g.hidden1("head.conv1", joined, c_total, s(64));
    let h2 = g.hidden1("head.conv2", h1, s(64), s(64));
    let logits = g.linear1("head.classifier", h2, s(64), spec.class_count);
    g.finish(spec, logits)
}

#[derive(Clone, Copy, PartialEq)]
enum Merge {
    Sum,
    Concat,
}

/// Encoder/decoder column at full output resolution. Skips merge either by
/// sum (max-pool downsampling) or concatenation (strided-conv downsampling).
fn build_unet(spec: &ArchitectureSpec, merge: Merge) -> Network {
    let widths = [spec.scaled(16), spec.scaled(32), spec.scaled(64)];
    let bottom_w = spec.scaled(128);
    const DROP_KEEP: f64 = 0.5;
    let mut g = GraphBuilder::new();
    let input = g.input("input", PathwayKind::Normal);

    // Encoder: double-conv stages, downsampling between them.
    let mut stream = input;
    let mut cin = 4;
    let mut skips = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        let prefix = format!("enc{}", i + 1);
        let a = g.hidden3(format!("{prefix}.conv1"), stream, cin, w, Padding::ZeroSame);
        let b = g.hidden3(format!("{prefix}.conv2"), a, w, w, Padding::ZeroSame);
        skips.push(b);
        let down_name = format!("down{}", i + 1);
        stream = match merge {
            Merge::Sum => g.max_pool2(down_name, b),
            Merge::Concat => {
                // Strided conv adopts the width of the following stage.
                let next_w = if i + 1 < widths.len() { widths[i + 1] } else { bottom_w };
                let mut layer = ConvLayer::hidden(w, next_w, [3, 3, 3], Padding::ZeroSame);
                layer.stride = [2, 2, 2];
                g.conv(down_name, b, layer)
            }
        };
        cin = match merge {
            Merge::Sum => w,
            Merge::Concat => match &g.nodes[stream].op {
                GraphOp::Conv(c) => c.out_channels,
                _ => unreachable!(),
            },
        };
    }

    let ba = g.hidden3("bottom.conv1", stream, cin, bottom_w, Padding::ZeroSame);
    let bb = g.hidden3("bottom.conv2", ba, bottom_w, bottom_w, Padding::ZeroSame);
    let bdrop = g.dropout("bottom.dropout", bb, DROP_KEEP);

    // Decoder: upsample, halve width, merge the skip, refine. The deeper two
    // stages regularize their second convolution with dropout.
    let mut up_stream = bdrop;
    let mut up_cin = bottom_w;
    for (i, &w) in widths.iter().enumerate().rev() {
        let prefix = format!("dec{}", i + 1);
        let up = g.upsample(format!("{prefix}.up"), up_stream, 2);
        let a = g.hidden3(format!("{prefix}.conv1"), up, up_cin, w, Padding::ZeroSame);
        let (merged, c_merged) = match merge {
            Merge::Sum => (g.add(format!("{prefix}.merge"), a, skips[i]), w),
            Merge::Concat => (g.concat(format!("{prefix}.merge"), vec![a, skips[i]]), 2 * w),
        };
        let mut b = g.hidden3(format!("{prefix}.conv2"), merged, c_merged, w, Padding::ZeroSame);
        if i >= 1 {
            b = g.dropout(format!("{prefix}.dropout"), b, DROP_KEEP);
        }
        up_stream = b;
        up_cin = w;
    }

    let logits = g.conv(
        "final.classifier",
        up_stream,
        ConvLayer::linear(widths[0], spec.class_count, [3, 3, 3], Padding::ZeroSame),
    );
    g.finish(spec, logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ParamStore;

    fn spec(family: Family, variant: &str) -> ArchitectureSpec {
        ArchitectureSpec::new(family, variant, 4)
    }

    fn all_specs() -> Vec<ArchitectureSpec> {
        vec![
            spec(Family::Deepmedic, "base"),
            spec(Family::Deepmedic, "wide"),
            spec(Family::Fcn, "vgg"),
            spec(Family::Fcn, "residual"),
            spec(Family::Fcn, "residual_shallow"),
            spec(Family::Unet, "sum_skip"),
            spec(Family::Unet, "concat_skip"),
        ]
    }

    #[test]
    fn every_variant_builds_and_validates() {
        for s in all_specs() {
            let net = build_architecture(&s).unwrap();
            assert!(net.parameter_count() > 0, "{}", s.id());
        }
    }

    #[test]
    fn deepmedic_base_maps_25_19_to_9() {
        let net = build_architecture(&spec(Family::Deepmedic, "base")).unwrap();
        let out = net.output_extents(&[[25, 25, 25], [19, 19, 19]]).unwrap();
        assert_eq!(out, [9, 9, 9]);
    }

    #[test]
    fn deepmedic_wide_maps_34_22_to_18() {
        let net = build_architecture(&spec(Family::Deepmedic, "wide")).unwrap();
        let out = net.output_extents(&[[34, 34, 34], [22, 22, 22]]).unwrap();
        assert_eq!(out, [18, 18, 18]);
    }

    #[test]
    fn deepmedic_rejects_mismatched_pathway_extents() {
        let net = build_architecture(&spec(Family::Deepmedic, "base")).unwrap();
        // 20 low-res voxels upsample to 12, not 9.
        let err = net.output_extents(&[[25, 25, 25], [20, 20, 20]]).unwrap_err();
        assert_eq!(err.kind(), "dimension");
    }

    #[test]
    fn low_extent_pairing() {
        assert_eq!(deepmedic_low_extents([25, 25, 25]).unwrap(), [19, 19, 19]);
        assert_eq!(deepmedic_low_extents([34, 34, 34]).unwrap(), [22, 22, 22]);
        assert!(deepmedic_low_extents([24, 24, 24]).is_err());
        assert!(deepmedic_low_extents([16, 16, 16]).is_err());
    }

    #[test]
    fn same_padded_families_preserve_extents() {
        for s in all_specs().into_iter().filter(|s| s.family != Family::Deepmedic) {
            let net = build_architecture(&s).unwrap();
            let out = net.output_extents(&[[32, 32, 32]]).unwrap();
            assert_eq!(out, [32, 32, 32], "{}", s.id());
        }
    }

    #[test]
    fn fcn_concat_widths() {
        for (variant, want) in [("vgg", 496), ("residual", 880), ("residual_shallow", 624)] {
            let net = build_architecture(&spec(Family::Fcn, variant)).unwrap();
            let shapes = net.infer_shapes(&[[32, 32, 32]]).unwrap();
            let join = net.nodes.iter().position(|n| n.name == "join").unwrap();
            assert_eq!(shapes[join][0], want, "{variant}");
        }
    }

    #[test]
    fn deepmedic_pathway_receptive_fields_are_17() {
        let net = build_architecture(&spec(Family::Deepmedic, "base")).unwrap();
        let per = net.receptive_field_per_pathway().unwrap();
        assert_eq!(per, vec![[17, 17, 17], [17, 17, 17]]);
        assert_eq!(net.receptive_field().unwrap(), [17, 17, 17]);
    }

    #[test]
    fn unet_receptive_field_spans_the_volume() {
        for variant in ["sum_skip", "concat_skip"] {
            let net = build_architecture(&spec(Family::Unet, variant)).unwrap();
            let rf = net.receptive_field().unwrap();
            assert!(rf[0] >= 40, "{variant}: rf {rf:?}");
            assert_eq!(rf[0], rf[1]);
            assert_eq!(rf[1], rf[2]);
        }
    }

    #[test]
    fn unet_sum_skip_parameter_count_matches_hand_tally() {
        // Kernel + bias + affine pair per hidden conv, summed over the
        // fixed published widths with four classes.
        let net = build_architecture(&spec(Family::Unet, "sum_skip")).unwrap();
        assert_eq!(net.parameter_count(), 1_318_852);
    }

    #[test]
    fn unet_has_three_dropout_layers() {
        for variant in ["sum_skip", "concat_skip"] {
            let net = build_architecture(&spec(Family::Unet, variant)).unwrap();
            let n = net.nodes.iter().filter(|n| matches!(n.op, GraphOp::Dropout { .. })).count();
            assert_eq!(n, 3, "{variant}");
        }
    }

    #[test]
    fn wide_variant_doubles_widths() {
        let base = build_architecture(&spec(Family::Deepmedic, "base")).unwrap();
        let wide = build_architecture(&spec(Family::Deepmedic, "wide")).unwrap();
        let wb = base.conv_layers().find(|(n, _)| *n == "normal.conv1").unwrap().1.out_channels;
        let ww = wide.conv_layers().find(|(n, _)| *n == "normal.conv1").unwrap().1.out_channels;
        assert_eq!(ww, 2 * wb);
    }

    #[test]
    fn width_scale_shrinks_but_never_to_zero() {
        let s = spec(Family::Unet, "sum_skip").with_width_scale(0.01);
        let net = build_architecture(&s).unwrap();
        for (_, c) in net.conv_layers() {
            assert!(c.out_channels >= 1);
        }
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        let s = spec(Family::Fcn, "dense");
        assert_eq!(build_architecture(&s).unwrap_err().kind(), "config");
    }

    #[test]
    fn store_holds_formula_count_plus_running_stats() {
        for s in all_specs() {
            let net = build_architecture(&s).unwrap();
            let store = ParamStore::<f32>::init(&net, 7);
            let running: usize = net
                .conv_layers()
                .filter(|(_, c)| c.batch_norm)
                .map(|(_, c)| 2 * c.out_channels)
                .sum();
            assert_eq!(store.value_count(), net.parameter_count() + running, "{}", s.id());
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let net = build_architecture(&spec(Family::Unet, "sum_skip")).unwrap();
        let a = ParamStore::<f64>::init(&net, 11);
        let b = ParamStore::<f64>::init(&net, 11);
        let c = ParamStore::<f64>::init(&net, 12);
        let ka = a.get("enc1.conv1.kernel").unwrap();
        let kb = b.get("enc1.conv1.kernel").unwrap();
        let kc = c.get("enc1.conv1.kernel").unwrap();
        assert_eq!(ka.data(), kb.data());
        assert_ne!(ka.data(), kc.data());
    }

    #[test]
    fn he_init_std_tracks_fan_in() {
        let net = build_architecture(&spec(Family::Unet, "sum_skip")).unwrap();
        let store = ParamStore::<f64>::init(&net, 3);
        // bottom.conv2: fan_in = 128 * 27, expected std sqrt(2 / fan_in).
        let k = store.get("bottom.conv2.kernel").unwrap();
        let n = k.numel() as f64;
        let mean: f64 = k.data().iter().sum::<f64>() / n;
        let var: f64 = k.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / (128.0 * 27.0);
        assert!((var - want).abs() < 0.2 * want, "var {var} vs {want}");
        let bias = store.get("bottom.conv2.bias").unwrap();
        assert!(bias.data().iter().all(|&v| v == 0.0));
        let gamma = store.get("bottom.conv2.gamma").unwrap();
        assert!(gamma.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let net = build_architecture(&spec(Family::Fcn, "residual_shallow")).unwrap();
        let store = ParamStore::<f32>::init(&net, 9);
        let ck = store.to_checkpoint();
        let back = ParamStore::<f32>::from_checkpoint(&net, &ck).unwrap();
        for (name, tensor) in store.iter() {
            assert_eq!(back.get(name).unwrap().data(), tensor.data(), "{name}");
        }
    }

    #[test]
    fn checkpoint_missing_record_is_a_format_error() {
        let net = build_architecture(&spec(Family::Unet, "sum_skip")).unwrap();
        let store = ParamStore::<f32>::init(&net, 9);
        let mut ck = store.to_checkpoint();
        ck.records.retain(|r| r.name != "enc1.conv1.kernel");
        let err = ParamStore::<f32>::from_checkpoint(&net, &ck).unwrap_err();
        assert_eq!(err.kind(), "format");
        assert!(err.to_string().contains("enc1.conv1.kernel"));
    }
}
