//! Building blocks and reference networks: OSA modules, dense blocks,
//! residual blocks, VoVNet-27-slim/39/57, DenseNet-40 and the CIFAR OSA nets.
//!
//! Every conv is emitted as a bias-free Conv → BatchNorm → ReLU triple. The
//! conv node carries the layer path (`stage2/osa1/conv3`); its BN and ReLU
//! append `/bn` and `/relu`.

use thiserror::Error;

use crate::graph::{ConvParams, Graph, GraphBuilder, LayerKind, LinearParams, NodeId, PoolParams, TensorShape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ZooError {
    #[error("{block}: attach point has {found} channels, config expects {expected}")]
    ChannelMismatch { block: String, expected: usize, found: usize },
    #[error("{0}: channel counts and layer counts must be >= 1")]
    BadConfig(String),
    #[error("unknown arch {name:?}; known archs: {}", KNOWN_ARCHS.join(", "))]
    UnknownArch { name: String },
}

/// Builder state shared by the block constructors.
#[derive(Debug, Clone)]
pub struct NetBuilder {
    graph: GraphBuilder,
    input: NodeId,
    input_channels: usize,
}

impl NetBuilder {
    pub fn new(input_channels: usize) -> Self {
        let mut graph = GraphBuilder::new();
        let input = graph.add("input", LayerKind::Input, &[]);
        NetBuilder { graph, input, input_channels }
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.graph.channels(id, self.input_channels).unwrap_or(0)
    }

    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> NodeId {
        self.graph.add(name, kind, inputs)
    }

    /// Conv → BN → ReLU. Returns the ReLU node.
    pub fn conv_bn_relu(&mut self, name: &str, from: NodeId, kernel: usize, stride: usize, out: usize) -> NodeId {
        let conv = self.add(name, LayerKind::Conv(ConvParams::same(kernel, out).with_stride(stride)), &[from]);
        let bn = self.add(format!("{name}/bn"), LayerKind::BatchNorm, &[conv]);
        self.add(format!("{name}/relu"), LayerKind::Relu, &[bn])
    }

    fn expect_channels(&self, block: &str, at: NodeId, expected: usize) -> Result<(), ZooError> {
        let found = self.channels(at);
        if found != expected {
            return Err(ZooError::ChannelMismatch { block: block.to_string(), expected, found });
        }
        Ok(())
    }

    pub fn finish(self, output: NodeId) -> Graph {
        self.graph.finish(output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OsaConfig {
    pub in_channels: usize,
    pub stage_channels: usize,
    pub num_convs: usize,
    pub concat_out_channels: usize,
    pub include_input_in_concat: bool,
    /// Precede every 3×3 conv with a 1×1 conv to `ceil(input/2)` channels.
    pub bottleneck: bool,
}

impl OsaConfig {
    pub fn new(in_channels: usize, stage_channels: usize, concat_out_channels: usize) -> Self {
        OsaConfig {
            in_channels,
            stage_channels,
            num_convs: 5,
            concat_out_channels,
            include_input_in_concat: false,
            bottleneck: false,
        }
    }

    pub fn convs(mut self, n: usize) -> Self {
        self.num_convs = n;
        self
    }

    pub fn bottleneck(mut self, on: bool) -> Self {
        self.bottleneck = on;
        self
    }

    pub fn include_input(mut self, on: bool) -> Self {
        self.include_input_in_concat = on;
        self
    }

    /// Width of the concatenation feeding the 1×1 projection.
    pub fn concat_width(&self) -> usize {
        self.num_convs * self.stage_channels + if self.include_input_in_concat { self.in_channels } else { 0 }
    }
}

/// One-shot aggregation: a chain of 3×3 convs whose outputs are concatenated
/// once and projected by a 1×1 conv. Returns the projection's ReLU.
pub fn build_osa_module(net: &mut NetBuilder, prefix: &str, cfg: &OsaConfig, attach: NodeId) -> Result<NodeId, ZooError> {
    if cfg.num_convs == 0 || cfg.in_channels == 0 || cfg.stage_channels == 0 || cfg.concat_out_channels == 0 {
        return Err(ZooError::BadConfig(prefix.to_string()));
    }
    net.expect_channels(prefix, attach, cfg.in_channels)?;
    let mut features = Vec::with_capacity(cfg.num_convs + 1);
    if cfg.include_input_in_concat {
        features.push(attach);
    }
    let mut x = attach;
    let mut width = cfg.in_channels;
    for i in 1..=cfg.num_convs {
        if cfg.bottleneck {
            x = net.conv_bn_relu(&format!("{prefix}/reduce{i}"), x, 1, 1, width.div_ceil(2));
        }
        x = net.conv_bn_relu(&format!("{prefix}/conv{i}"), x, 3, 1, cfg.stage_channels);
        width = cfg.stage_channels;
        features.push(x);
    }
    let cat = if features.len() == 1 {
        // Concat needs two inputs; a lone source feeds the projection directly.
        features[0]
    } else {
        net.add(format!("{prefix}/concat"), LayerKind::Concat, &features)
    };
    Ok(net.conv_bn_relu(&format!("{prefix}/proj"), cat, 1, 1, cfg.concat_out_channels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub in_channels: usize,
    pub growth: usize,
    pub num_layers: usize,
    /// Insert a 1×1 conv to `4 * growth` channels before each 3×3 conv.
    pub bottleneck: bool,
}

impl DenseBlockConfig {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth
    }
}

/// Dense block: layer `l` consumes the concatenation of the block input and
/// every earlier layer output. Returns the final concatenation.
pub fn build_dense_block(net: &mut NetBuilder, prefix: &str, cfg: &DenseBlockConfig, attach: NodeId) -> Result<NodeId, ZooError> {
    if cfg.num_layers == 0 || cfg.in_channels == 0 || cfg.growth == 0 {
        return Err(ZooError::BadConfig(prefix.to_string()));
    }
    net.expect_channels(prefix, attach, cfg.in_channels)?;
    let mut features = vec![attach];
    for l in 1..=cfg.num_layers {
        let layer = format!("{prefix}/layer{l}");
        let mut x = if features.len() == 1 {
            attach
        } else {
            net.add(format!("{layer}/concat"), LayerKind::Concat, &features)
        };
        if cfg.bottleneck {
            x = net.conv_bn_relu(&format!("{layer}/reduce"), x, 1, 1, 4 * cfg.growth);
        }
        let out = net.conv_bn_relu(&format!("{layer}/conv"), x, 3, 1, cfg.growth);
        features.push(out);
    }
    Ok(net.add(format!("{prefix}/concat"), LayerKind::Concat, &features))
}

/// Conv-BN-ReLU then Conv-BN, summed with the (possibly projected) input and
/// followed by a ReLU.
pub fn build_residual_block(
    net: &mut NetBuilder,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    attach: NodeId,
) -> Result<NodeId, ZooError> {
    if in_channels == 0 || out_channels == 0 || !(1..=2).contains(&stride) {
        return Err(ZooError::BadConfig(prefix.to_string()));
    }
    net.expect_channels(prefix, attach, in_channels)?;
    let a = net.conv_bn_relu(&format!("{prefix}/conv1"), attach, 3, stride, out_channels);
    let conv2 = net.add(format!("{prefix}/conv2"), LayerKind::Conv(ConvParams::same(3, out_channels)), &[a]);
    let b = net.add(format!("{prefix}/conv2/bn"), LayerKind::BatchNorm, &[conv2]);
    let shortcut = if stride != 1 || in_channels != out_channels {
        let proj = net.add(
            format!("{prefix}/shortcut"),
            LayerKind::Conv(ConvParams::same(1, out_channels).with_stride(stride)),
            &[attach],
        );
        net.add(format!("{prefix}/shortcut/bn"), LayerKind::BatchNorm, &[proj])
    } else {
        attach
    };
    let sum = net.add(format!("{prefix}/add"), LayerKind::Add, &[b, shortcut]);
    Ok(net.add(format!("{prefix}/relu"), LayerKind::Relu, &[sum]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VovVariant {
    V27Slim,
    V39,
    V57,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub stage_channels: usize,
    pub concat_out_channels: usize,
    pub modules: usize,
}

const fn stage(stage_channels: usize, concat_out_channels: usize, modules: usize) -> StageConfig {
    StageConfig { stage_channels, concat_out_channels, modules }
}

impl VovVariant {
    pub const ALL: [VovVariant; 3] = [VovVariant::V27Slim, VovVariant::V39, VovVariant::V57];

    /// Stages 2–5.
    pub fn stages(self) -> [StageConfig; 4] {
        match self {
            VovVariant::V27Slim => [stage(64, 128, 1), stage(80, 256, 1), stage(96, 384, 1), stage(112, 512, 1)],
            VovVariant::V39 => [stage(128, 256, 1), stage(160, 512, 1), stage(192, 768, 2), stage(224, 1024, 2)],
            VovVariant::V57 => [stage(128, 256, 1), stage(160, 512, 1), stage(192, 768, 4), stage(224, 1024, 3)],
        }
    }

    /// The numeral in the network name: its count of conv layers.
    pub fn depth(self) -> usize {
        match self {
            VovVariant::V27Slim => 27,
            VovVariant::V39 => 39,
            VovVariant::V57 => 57,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VovVariant::V27Slim => "vovnet27slim",
            VovVariant::V39 => "vovnet39",
            VovVariant::V57 => "vovnet57",
        }
    }
}

pub fn build_vovnet(variant: VovVariant) -> Graph {
    build_vovnet_with(variant, false)
}

/// VoVNet backbone; `bottleneck` builds the 1×1-bottleneck ablation.
pub fn build_vovnet_with(variant: VovVariant, bottleneck: bool) -> Graph {
    let mut net = NetBuilder::new(3);
    let x = net.input();
    let x = net.conv_bn_relu("stem/conv1", x, 3, 2, 64);
    let x = net.conv_bn_relu("stem/conv2", x, 3, 1, 64);
    let mut x = net.conv_bn_relu("stem/conv3", x, 3, 1, 128);
    let mut width = 128;
    for (i, st) in variant.stages().iter().enumerate() {
        let s = i + 2;
        x = net.add(format!("stage{s}/pool"), LayerKind::MaxPool(PoolParams { kernel: 3, stride: 2, padding: 1 }), &[x]);
        for m in 1..=st.modules {
            let cfg = OsaConfig::new(width, st.stage_channels, st.concat_out_channels).bottleneck(bottleneck);
            x = build_osa_module(&mut net, &format!("stage{s}/osa{m}"), &cfg, x).expect("stage widths chain");
            width = st.concat_out_channels;
        }
    }
    net.finish(x)
}

/// Stem conv, three dense blocks at 32/16/8 spatial with 1×1 transitions and
/// 2×2 average pooling between them, global pooling and a 10-way classifier.
/// Transitions keep the channel count.
pub fn build_densenet_cifar(growth: usize, layers_per_block: usize, bottleneck: bool) -> Graph {
    let mut net = NetBuilder::new(3);
    let x = net.input();
    let mut x = net.conv_bn_relu("stem/conv1", x, 3, 1, 16);
    let mut width = 16;
    for blk in 1..=3 {
        let cfg = DenseBlockConfig { in_channels: width, growth, num_layers: layers_per_block, bottleneck };
        x = build_dense_block(&mut net, &format!("block{blk}"), &cfg, x).expect("block widths chain");
        width = cfg.out_channels();
        if blk < 3 {
            x = transition(&mut net, blk, x, width);
        }
    }
    classifier(net, x, 10)
}

pub fn build_densenet40(growth: usize, bottleneck: bool) -> Graph {
    build_densenet_cifar(growth, 12, bottleneck)
}

/// Output widths of the three DenseNet-40 (growth 12) blocks.
pub const DENSENET40_BLOCK_WIDTHS: [usize; 3] = [160, 304, 448];

/// DenseNet-40 macro layout with each dense block replaced by one OSA module
/// whose projection matches the replaced block's output width.
pub fn build_osa_cifar(num_convs: usize, stage_channels: usize) -> Graph {
    let mut net = NetBuilder::new(3);
    let x = net.input();
    let mut x = net.conv_bn_relu("stem/conv1", x, 3, 1, 16);
    let mut width = 16;
    for (i, &out) in DENSENET40_BLOCK_WIDTHS.iter().enumerate() {
        let blk = i + 1;
        let cfg = OsaConfig::new(width, stage_channels, out).convs(num_convs);
        x = build_osa_module(&mut net, &format!("block{blk}"), &cfg, x).expect("block widths chain");
        width = out;
        if blk < 3 {
            x = transition(&mut net, blk, x, width);
        }
    }
    classifier(net, x, 10)
}

fn transition(net: &mut NetBuilder, blk: usize, x: NodeId, width: usize) -> NodeId {
    let x = net.conv_bn_relu(&format!("trans{blk}/conv"), x, 1, 1, width);
    net.add(format!("trans{blk}/pool"), LayerKind::AvgPool(PoolParams { kernel: 2, stride: 2, padding: 0 }), &[x])
}

fn classifier(mut net: NetBuilder, x: NodeId, classes: usize) -> Graph {
    let gap = net.add("gap", LayerKind::GlobalAvgPool, &[x]);
    let fc = net.add("classifier", LayerKind::Linear(LinearParams { out_features: classes, bias: true }), &[gap]);
    net.finish(fc)
}

/// A 4-channel, 2-conv OSA module followed by pooling and a classifier.
/// Sized for finite-difference checks on 8×8 inputs.
pub fn build_osa_tiny() -> Graph {
    let mut net = NetBuilder::new(4);
    let x = net.input();
    let cfg = OsaConfig::new(4, 4, 4).convs(2);
    let x = build_osa_module(&mut net, "osa1", &cfg, x).expect("tiny widths");
    classifier(net, x, 3)
}

pub fn build_dense_tiny() -> Graph {
    let mut net = NetBuilder::new(4);
    let x = net.input();
    let cfg = DenseBlockConfig { in_channels: 4, growth: 3, num_layers: 3, bottleneck: false };
    let x = build_dense_block(&mut net, "block1", &cfg, x).expect("tiny widths");
    classifier(net, x, 3)
}

pub fn build_resnet_tiny() -> Graph {
    let mut net = NetBuilder::new(4);
    let x = net.input();
    let x = build_residual_block(&mut net, "res1", 4, 4, 1, x).expect("tiny widths");
    let x = build_residual_block(&mut net, "res2", 4, 6, 2, x).expect("tiny widths");
    classifier(net, x, 3)
}

pub const KNOWN_ARCHS: &[&str] = &[
    "vovnet27slim",
    "vovnet39",
    "vovnet57",
    "vovnet27slim-bottleneck",
    "vovnet39-bottleneck",
    "vovnet57-bottleneck",
    "densenet40",
    "densenet40-bottleneck",
    "osa-cifar",
    "osa-cifar-12",
    "osa-tiny",
    "dense-tiny",
    "resnet-tiny",
];

/// Channel width of the 12-layer CIFAR OSA variant.
pub const OSA_CIFAR_12_CHANNELS: usize = 32;

#[derive(Debug, Clone)]
pub struct Arch {
    pub name: String,
    pub graph: Graph,
    pub default_input: TensorShape,
}

pub fn build_arch(name: &str) -> Result<Arch, ZooError> {
    let imagenet = TensorShape::new(1, 3, 224, 224);
    let cifar = TensorShape::new(1, 3, 32, 32);
    let tiny = TensorShape::new(1, 4, 8, 8);
    let (graph, default_input) = match name {
        "vovnet27slim" => (build_vovnet(VovVariant::V27Slim), imagenet),
        "vovnet39" => (build_vovnet(VovVariant::V39), imagenet),
        "vovnet57" => (build_vovnet(VovVariant::V57), imagenet),
        "vovnet27slim-bottleneck" => (build_vovnet_with(VovVariant::V27Slim, true), imagenet),
        "vovnet39-bottleneck" => (build_vovnet_with(VovVariant::V39, true), imagenet),
        "vovnet57-bottleneck" => (build_vovnet_with(VovVariant::V57, true), imagenet),
        "densenet40" => (build_densenet40(12, false), cifar),
        "densenet40-bottleneck" => (build_densenet40(12, true), cifar),
        "osa-cifar" => (build_osa_cifar(5, 43), cifar),
        "osa-cifar-12" => (build_osa_cifar(12, OSA_CIFAR_12_CHANNELS), cifar),
        "osa-tiny" => (build_osa_tiny(), tiny),
        "dense-tiny" => (build_dense_tiny(), tiny),
        "resnet-tiny" => (build_resnet_tiny(), tiny),
        _ => return Err(ZooError::UnknownArch { name: name.to_string() }),
    };
    Ok(Arch { name: name.to_string(), graph, default_input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Node;

    fn conv_nodes(g: &Graph) -> Vec<&Node> {
        g.nodes().filter(|n| matches!(n.kind, LayerKind::Conv(_))).collect()
    }

    fn conv_in_channels(g: &Graph, shape: TensorShape) -> Vec<(String, usize, usize)> {
        let shapes = g.infer_shapes(shape).unwrap();
        conv_nodes(g)
            .into_iter()
            .map(|n| (n.name.clone(), shapes[&n.inputs[0]].c, shapes[&n.id].c))
            .collect()
    }

    #[test]
    fn osa_module_concat_width_and_projection() {
        let mut net = NetBuilder::new(128);
        let x = net.input();
        let cfg = OsaConfig::new(128, 128, 256);
        let out = build_osa_module(&mut net, "m", &cfg, x).unwrap();
        let g = net.finish(out);
        let shapes = g.infer_shapes(TensorShape::new(1, 128, 56, 56)).unwrap();
        let cat = g.node_by_name("m/concat").unwrap();
        assert_eq!(shapes[&cat.id].c, 640);
        assert_eq!(shapes[&g.output()].c, 256);
        assert_eq!(cfg.concat_width(), 640);
    }

    #[test]
    fn cifar_osa_module_5x43() {
        let mut net = NetBuilder::new(16);
        let x = net.input();
        let out = build_osa_module(&mut net, "m", &OsaConfig::new(16, 43, 160), x).unwrap();
        let g = net.finish(out);
        let convs = conv_in_channels(&g, TensorShape::new(1, 16, 32, 32));
        assert_eq!(convs.len(), 6);
        assert_eq!(convs[0], ("m/conv1".into(), 16, 43));
        for c in &convs[1..5] {
            assert_eq!((c.1, c.2), (43, 43));
        }
        assert_eq!(convs[5], ("m/proj".into(), 215, 160));
    }

    #[test]
    fn degenerate_single_conv_osa() {
        let mut net = NetBuilder::new(8);
        let x = net.input();
        let out = build_osa_module(&mut net, "m", &OsaConfig::new(8, 8, 8).convs(1), x).unwrap();
        let g = net.finish(out);
        assert!(g.validate().is_empty());
        assert_eq!(conv_nodes(&g).len(), 2);
    }

    #[test]
    fn osa_include_input_widens_concat() {
        let mut net = NetBuilder::new(16);
        let x = net.input();
        let cfg = OsaConfig::new(16, 43, 160).include_input(true);
        let out = build_osa_module(&mut net, "m", &cfg, x).unwrap();
        let g = net.finish(out);
        let s = g.infer_shapes(TensorShape::new(1, 16, 8, 8)).unwrap();
        assert_eq!(s[&g.node_by_name("m/concat").unwrap().id].c, 231);
    }

    #[test]
    fn osa_channel_mismatch_errors() {
        let mut net = NetBuilder::new(3);
        let x = net.input();
        let err = build_osa_module(&mut net, "m", &OsaConfig::new(16, 8, 8), x).unwrap_err();
        assert_eq!(err, ZooError::ChannelMismatch { block: "m".into(), expected: 16, found: 3 });
        assert!(build_dense_block(
            &mut net,
            "d",
            &DenseBlockConfig { in_channels: 4, growth: 2, num_layers: 1, bottleneck: false },
            x
        )
        .is_err());
        assert!(build_residual_block(&mut net, "r", 8, 8, 1, x).is_err());
    }

    #[test]
    fn osa_bottleneck_widths_are_half_the_input() {
        let mut net = NetBuilder::new(128);
        let x = net.input();
        let cfg = OsaConfig::new(128, 64, 128).bottleneck(true).convs(2);
        let out = build_osa_module(&mut net, "m", &cfg, x).unwrap();
        let g = net.finish(out);
        let convs = conv_in_channels(&g, TensorShape::new(1, 128, 8, 8));
        let names: Vec<_> = convs.iter().map(|c| (c.0.as_str(), c.1, c.2)).collect();
        assert_eq!(
            names,
            vec![("m/reduce1", 128, 64), ("m/conv1", 64, 64), ("m/reduce2", 64, 32), ("m/conv2", 32, 64), ("m/proj", 128, 128)]
        );
    }

    #[test]
    fn dense_block_linear_growth() {
        let mut net = NetBuilder::new(16);
        let x = net.input();
        let cfg = DenseBlockConfig { in_channels: 16, growth: 12, num_layers: 12, bottleneck: false };
        let out = build_dense_block(&mut net, "b", &cfg, x).unwrap();
        let g = net.finish(out);
        let convs = conv_in_channels(&g, TensorShape::new(1, 16, 8, 8));
        assert_eq!(convs.len(), 12);
        for (l, c) in convs.iter().enumerate() {
            assert_eq!(c.1, 16 + 12 * l);
        }
        assert_eq!(convs[11].1, 148);
        let s = g.infer_shapes(TensorShape::new(1, 16, 8, 8)).unwrap();
        assert_eq!(s[&g.output()].c, 160);

        let mut net = NetBuilder::new(16);
        let x = net.input();
        let cfg = DenseBlockConfig { in_channels: 16, growth: 12, num_layers: 1, bottleneck: false };
        let out = build_dense_block(&mut net, "b", &cfg, x).unwrap();
        let g = net.finish(out);
        let s = g.infer_shapes(TensorShape::new(1, 16, 8, 8)).unwrap();
        assert_eq!(s[&g.output()].c, 28);
    }

    #[test]
    fn dense_bottleneck_pairs() {
        let mut net = NetBuilder::new(24);
        let x = net.input();
        let cfg = DenseBlockConfig { in_channels: 24, growth: 12, num_layers: 2, bottleneck: true };
        let out = build_dense_block(&mut net, "b", &cfg, x).unwrap();
        let g = net.finish(out);
        let convs = conv_in_channels(&g, TensorShape::new(1, 24, 8, 8));
        let got: Vec<_> = convs.iter().map(|c| (c.1, c.2)).collect();
        assert_eq!(got, vec![(24, 48), (48, 12), (36, 48), (48, 12)]);
    }

    #[test]
    fn residual_blocks() {
        let mut net = NetBuilder::new(64);
        let x = net.input();
        let out = build_residual_block(&mut net, "r", 64, 64, 1, x).unwrap();
        let g = net.finish(out);
        let add = g.node_by_name("r/add").unwrap();
        assert_eq!(add.inputs[1], g.input());
        assert_eq!(g.consumers(add.id), vec![out]);
        assert_eq!(g.infer_shapes(TensorShape::new(1, 64, 16, 16)).unwrap()[&out].c, 64);

        let mut net = NetBuilder::new(64);
        let x = net.input();
        let out = build_residual_block(&mut net, "r", 64, 128, 2, x).unwrap();
        let g = net.finish(out);
        match g.node_by_name("r/shortcut").unwrap().kind {
            LayerKind::Conv(p) => assert_eq!((p.kernel, p.stride, p.out_channels), (1, 2, 128)),
            other => panic!("{other:?}"),
        }
        let s = g.infer_shapes(TensorShape::new(1, 64, 16, 16)).unwrap();
        assert_eq!(s[&out], TensorShape::new(1, 128, 8, 8));
    }

    #[test]
    fn vovnet_conv_counts_match_names() {
        for v in VovVariant::ALL {
            let g = build_vovnet(v);
            assert_eq!(conv_nodes(&g).len(), v.depth(), "{}", v.name());
            assert!(g.validate().is_empty());
        }
    }

    #[test]
    fn vovnet39_stage5_shape_and_stage_widths() {
        let g = build_vovnet(VovVariant::V39);
        let s = g.infer_shapes(TensorShape::new(1, 3, 224, 224)).unwrap();
        assert_eq!(s[&g.output()], TensorShape::new(1, 1024, 7, 7));

        for (v, widths) in [
            (VovVariant::V27Slim, [128, 256, 384, 512]),
            (VovVariant::V39, [256, 512, 768, 1024]),
            (VovVariant::V57, [256, 512, 768, 1024]),
        ] {
            let g = build_vovnet(v);
            let s = g.infer_shapes(TensorShape::new(1, 3, 224, 224)).unwrap();
            for (i, st) in v.stages().iter().enumerate() {
                let name = format!("stage{}/osa{}/proj/relu", i + 2, st.modules);
                assert_eq!(s[&g.node_by_name(&name).unwrap().id].c, widths[i], "{name}");
            }
        }
    }

    #[test]
    fn vovnet57_stage4_has_four_modules() {
        let g = build_vovnet(VovVariant::V57);
        let s = g.infer_shapes(TensorShape::new(1, 3, 224, 224)).unwrap();
        for m in 1..=4 {
            for i in 1..=5 {
                let conv = g.node_by_name(&format!("stage4/osa{m}/conv{i}")).unwrap();
                assert_eq!(s[&conv.id].c, 192);
            }
            let proj = g.node_by_name(&format!("stage4/osa{m}/proj")).unwrap();
            assert_eq!(s[&proj.id].c, 768);
        }
        assert!(g.node_by_name("stage4/osa5/conv1").is_none());
    }

    #[test]
    fn densenet40_trajectory_and_layer_count() {
        let g = build_densenet40(12, false);
        let s = g.infer_shapes(TensorShape::new(1, 3, 32, 32)).unwrap();
        let c = |name: &str| s[&g.node_by_name(name).unwrap().id];
        assert_eq!(c("block1/concat").c, 160);
        assert_eq!(c("trans1/pool"), TensorShape::new(1, 160, 16, 16));
        assert_eq!(c("block2/concat").c, 304);
        assert_eq!(c("trans2/pool").c, 304);
        assert_eq!(c("block3/concat"), TensorShape::new(1, 448, 8, 8));
        assert_eq!(g.count_kind(LayerKind::is_weighted), 40);

        let g = build_densenet_cifar(12, 1, false);
        let s = g.infer_shapes(TensorShape::new(1, 3, 32, 32)).unwrap();
        assert_eq!(s[&g.node_by_name("block1/concat").unwrap().id].c, 28);
        assert_eq!(s[&g.node_by_name("block2/concat").unwrap().id].c, 40);
    }

    #[test]
    fn every_arch_is_valid_and_shapes() {
        for name in KNOWN_ARCHS {
            let arch = build_arch(name).unwrap();
            assert!(arch.graph.validate().is_empty(), "{name}: {:?}", arch.graph.validate());
            arch.graph.infer_shapes(arch.default_input).unwrap();
        }
        let err = build_arch("resnet50").unwrap_err().to_string();
        assert!(err.contains("vovnet39") && err.contains("osa-cifar"));
    }
}
