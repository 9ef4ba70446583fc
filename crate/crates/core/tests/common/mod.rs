//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use convcost::engine::rng::SplitMix64;
use convcost::graph::{ConvParams, Graph, GraphBuilder, LayerKind, LinearParams, NodeId, PoolParams, TensorShape};

/// Small random graph exercising every layer kind, sized for finite
/// differences. Returns the graph and its input shape (batch of 2).
pub fn random_graph(seed: u64) -> (Graph, TensorShape) {
    let mut rng = SplitMix64::new(seed);
    let c0 = 2 + rng.below(2) as usize;
    let side = 6 + rng.below(3) as usize;
    let input = TensorShape::new(2, c0, side, side);

    let mut g = GraphBuilder::new();
    let mut x = g.add("input", LayerKind::Input, &[]);
    let (mut c, mut s) = (c0, side);
    let mut n = 0;
    let mut name = |what: &str| {
        n += 1;
        format!("b{n}/{what}")
    };

    // Conv -> BN -> ReLU, or a bare conv when it carries a bias. A biased
    // conv feeding a ReLU would sit exactly on the kink wherever its receptive
    // field is all zeros, since biases start at 0.
    let conv_unit = |g: &mut GraphBuilder, id: NodeId, p: ConvParams, label: String| {
        let y = g.add(label.clone(), LayerKind::Conv(p), &[id]);
        if p.bias {
            return y;
        }
        let y = g.add(format!("{label}/bn"), LayerKind::BatchNorm, &[y]);
        g.add(format!("{label}/relu"), LayerKind::Relu, &[y])
    };

    let blocks = 2 + rng.below(2);
    for _ in 0..blocks {
        match rng.below(5) {
            0 => {
                let k = [1, 3][rng.below(2) as usize];
                let stride = if s >= 4 && rng.below(2) == 0 { 2 } else { 1 };
                let bias = rng.below(2) == 0;
                let out = 2 + rng.below(3) as usize;
                let p = ConvParams { kernel: k, stride, padding: k / 2, out_channels: out, bias };
                x = conv_unit(&mut g, x, p, name("conv"));
                s = (s + 2 * (k / 2) - k) / stride + 1;
                c = out;
            }
            1 => {
                // Two chained convs aggregated once.
                let w = 2 + rng.below(2) as usize;
                let prefix = name("osa");
                let a = conv_unit(&mut g, x, ConvParams::same(3, w), format!("{prefix}/conv1"));
                let b = conv_unit(&mut g, a, ConvParams::same(3, w), format!("{prefix}/conv2"));
                let cat = g.add(format!("{prefix}/concat"), LayerKind::Concat, &[a, b]);
                let out = 2 + rng.below(3) as usize;
                x = conv_unit(&mut g, cat, ConvParams::same(1, out), format!("{prefix}/proj"));
                c = out;
            }
            2 => {
                let growth = 1 + rng.below(3) as usize;
                let prefix = name("dense");
                let y = conv_unit(&mut g, x, ConvParams::same(3, growth), format!("{prefix}/conv"));
                x = g.add(format!("{prefix}/concat"), LayerKind::Concat, &[x, y]);
                c += growth;
            }
            3 => {
                let prefix = name("res");
                let y = g.add(format!("{prefix}/conv"), LayerKind::Conv(ConvParams::same(3, c)), &[x]);
                let y = g.add(format!("{prefix}/conv/bn"), LayerKind::BatchNorm, &[y]);
                let sum = g.add(format!("{prefix}/add"), LayerKind::Add, &[x, y]);
                x = g.add(format!("{prefix}/relu"), LayerKind::Relu, &[sum]);
            }
            _ => {
                let (kernel, stride, padding) = if s >= 4 { [(2, 2, 0), (3, 2, 1), (3, 1, 1)][rng.below(3) as usize] } else { (3, 1, 1) };
                let p = PoolParams { kernel, stride, padding };
                let kind = if rng.below(2) == 0 { LayerKind::MaxPool(p) } else { LayerKind::AvgPool(p) };
                x = g.add(name("pool"), kind, &[x]);
                s = (s + 2 * padding - kernel) / stride + 1;
            }
        }
    }
    let gap = g.add("gap", LayerKind::GlobalAvgPool, &[x]);
    let classes = 2 + rng.below(2) as usize;
    let fc = g.add("fc", LayerKind::Linear(LinearParams { out_features: classes, bias: rng.below(2) == 0 }), &[gap]);
    (g.finish(fc), input)
}

/// Seeds whose random graphs jointly cover every layer kind.
pub fn random_suite(count: usize) -> Vec<(u64, Graph, TensorShape)> {
    (0..count as u64).map(|seed| {
        let (g, s) = random_graph(1000 + seed);
        (1000 + seed, g, s)
    }).collect()
}

pub fn kinds_covered(graphs: &[(u64, Graph, TensorShape)]) -> Vec<&'static str> {
    let mut tags: Vec<&'static str> = graphs.iter().flat_map(|(_, g, _)| g.nodes().map(|n| n.kind.tag()).collect::<Vec<_>>()).collect();
    tags.sort();
    tags.dedup();
    tags
}
