//! Analytical cost model: memory access cost (MAC), its lower bound, FLOPs,
//! parameters and activation footprint, plus the measured-efficiency metrics
//! in [`power`].
//!
//! Conventions (also written into every report's metadata):
//! - MAC is counted in element accesses. For a conv with output spatial size
//!   `h×w`, `MAC = n·h·w·(c_i + c_o) + k²·c_i·c_o`; the `h, w` are the conv's
//!   *output* dims, which equal the input dims for the stride-1 "same" convs
//!   inside aggregation blocks.
//! - One multiply-accumulate counts as one FLOP unless
//!   [`FlopConvention::TwoPerMac`] is selected.
//! - Non-conv layers contribute to totals but are sub-totaled separately from
//!   convs, so conv-only MAC can be read off directly.

pub mod power;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, LayerKind, Node, NodeId, TensorShape};

pub use power::{average_power, efficiency_from_flops, efficiency_metrics, EfficiencyReport, PowerLog, PowerSample};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("{what} must be >= 1")]
    NonPositive { what: &'static str },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {0}: missing inferred shape")]
    MissingShape(String),
    #[error("power log is empty")]
    EmptyLog,
    #[error("power log: {0}")]
    BadLog(String),
    #[error("{0} must be positive")]
    NonPositiveTime(&'static str),
}

fn require(value: u64, what: &'static str) -> Result<u64, CostError> {
    if value == 0 {
        Err(CostError::NonPositive { what })
    } else {
        Ok(value)
    }
}

/// `h·w·(c_i + c_o) + k²·c_i·c_o`, exact.
pub fn conv_mac(h: u64, w: u64, c_in: u64, c_out: u64, k: u64) -> Result<u64, CostError> {
    let (h, w) = (require(h, "h")?, require(w, "w")?);
    let (c_in, c_out, k) = (require(c_in, "c_i")?, require(c_out, "c_o")?, require(k, "k")?);
    Ok(h * w * (c_in + c_out) + k * k * c_in * c_out)
}

/// `2·sqrt(h·w·B / k²) + B / (h·w)` where `B = k²·h·w·c_i·c_o`.
///
/// By AM-GM this bounds [`conv_mac`] from below for every channel split of a
/// fixed `B`, with equality exactly when `c_i = c_o`.
pub fn mac_lower_bound(b: u64, h: u64, w: u64, k: u64) -> Result<f64, CostError> {
    let b = require(b, "B")? as f64;
    let hw = (require(h, "h")? * require(w, "w")?) as f64;
    let k2 = (require(k, "k")? as f64).powi(2);
    Ok(2.0 * (hw * b / k2).sqrt() + b / hw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate = 1 FLOP.
    #[default]
    MultiplyAccumulate,
    /// One multiply-accumulate = 2 FLOPs (applies to conv and linear only).
    TwoPerMac,
}

impl FlopConvention {
    fn factor(self) -> u64 {
        match self {
            FlopConvention::MultiplyAccumulate => 1,
            FlopConvention::TwoPerMac => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub mac: u64,
    pub flops: u64,
    pub params: u64,
    pub activation_elems: u64,
}

impl std::ops::AddAssign for LayerCost {
    fn add_assign(&mut self, o: LayerCost) {
        self.mac += o.mac;
        self.flops += o.flops;
        self.params += o.params;
        self.activation_elems += o.activation_elems;
    }
}

/// Cost of one node given the inferred shapes of the whole graph.
///
/// The Input node costs nothing: it allocates no parameters and produces no
/// intermediate activation.
pub fn layer_cost(node: &Node, shapes: &BTreeMap<NodeId, TensorShape>, flops: FlopConvention) -> Result<LayerCost, CostError> {
    let shape = |id: NodeId| -> Result<TensorShape, CostError> {
        shapes.get(&id).copied().ok_or_else(|| CostError::MissingShape(node.name.clone()))
    };
    let out = shape(node.id)?;
    let out_elems = out.elems() as u64;
    let in_elems = node
        .inputs
        .iter()
        .map(|&i| shape(i).map(|s| s.elems() as u64))
        .sum::<Result<u64, _>>()?;
    let first_in = || node.inputs.first().map(|&i| shape(i)).unwrap_or(Ok(out));
    let factor = flops.factor();

    let cost = match node.kind {
        LayerKind::Input => LayerCost::default(),
        LayerKind::Conv(p) => {
            let x = first_in()?;
            let (ci, co, k) = (x.c as u64, p.out_channels as u64, p.kernel as u64);
            let (n, hw) = (out.n as u64, out.plane() as u64);
            let weights = k * k * ci * co;
            LayerCost {
                mac: n * hw * (ci + co) + weights,
                flops: factor * weights * hw * n,
                params: weights + if p.bias { co } else { 0 },
                activation_elems: out_elems,
            }
        }
        LayerKind::Linear(p) => {
            let x = first_in()?;
            let (ci, co, n) = (x.c as u64, p.out_features as u64, out.n as u64);
            LayerCost {
                mac: n * (ci + co) + ci * co,
                flops: factor * ci * co * n,
                params: ci * co + if p.bias { co } else { 0 },
                activation_elems: out_elems,
            }
        }
        LayerKind::BatchNorm => {
            let c = out.c as u64;
            LayerCost { mac: 2 * out_elems + 2 * c, flops: 2 * out_elems, params: 2 * c, activation_elems: out_elems }
        }
        LayerKind::Concat => LayerCost { mac: in_elems + out_elems, flops: 0, params: 0, activation_elems: out_elems },
        LayerKind::Relu | LayerKind::MaxPool(_) | LayerKind::AvgPool(_) | LayerKind::Add | LayerKind::GlobalAvgPool => {
            LayerCost { mac: in_elems + out_elems, flops: out_elems, params: 0, activation_elems: out_elems }
        }
    };
    Ok(cost)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub name: String,
    pub kind: String,
    pub output: TensorShape,
    #[serde(flatten)]
    pub cost: LayerCost,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub mac: u64,
    pub flops: u64,
    pub params: u64,
    pub activation_elems: u64,
    pub activation_bytes: u64,
    pub nodes: u64,
}

impl Totals {
    fn add(&mut self, cost: LayerCost, dtype_bytes: u64) {
        self.mac += cost.mac;
        self.flops += cost.flops;
        self.params += cost.params;
        self.activation_elems += cost.activation_elems;
        self.activation_bytes += cost.activation_elems * dtype_bytes;
        self.nodes += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub arch: String,
    pub input: TensorShape,
    pub dtype_bytes: u64,
    pub flops_convention: FlopConvention,
    pub mac_units: String,
    pub mac_spatial_convention: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub metadata: ReportMeta,
    /// Sorted by node name.
    pub layers: Vec<NodeCost>,
    pub totals: Totals,
    /// Conv nodes only.
    pub conv_totals: Totals,
    /// Everything except conv nodes.
    pub other_totals: Totals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    pub dtype_bytes: u64,
    pub flops: FlopConvention,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { dtype_bytes: 4, flops: FlopConvention::MultiplyAccumulate }
    }
}

pub fn network_report(graph: &Graph, arch: &str, input: TensorShape, opts: ReportOptions) -> Result<CostReport, CostError> {
    graph.ensure_valid()?;
    let shapes = graph.infer_shapes(input)?;
    let mut layers = graph
        .nodes()
        .map(|node| {
            Ok(NodeCost {
                name: node.name.clone(),
                kind: node.kind.tag().to_string(),
                output: shapes[&node.id],
                cost: layer_cost(node, &shapes, opts.flops)?,
            })
        })
        .collect::<Result<Vec<_>, CostError>>()?;
    layers.sort_by(|a, b| a.name.cmp(&b.name));

    let mut totals = Totals::default();
    let mut conv_totals = Totals::default();
    let mut other_totals = Totals::default();
    for l in &layers {
        totals.add(l.cost, opts.dtype_bytes);
        if l.kind == "conv" {
            conv_totals.add(l.cost, opts.dtype_bytes);
        } else {
            other_totals.add(l.cost, opts.dtype_bytes);
        }
    }
    Ok(CostReport {
        metadata: ReportMeta {
            arch: arch.to_string(),
            input,
            dtype_bytes: opts.dtype_bytes,
            flops_convention: opts.flops,
            mac_units: "elements".to_string(),
            mac_spatial_convention: "conv output h,w".to_string(),
        },
        layers,
        totals,
        conv_totals,
        other_totals,
    })
}

impl CostReport {
    pub fn layer(&self, name: &str) -> Option<&NodeCost> {
        self.layers.binary_search_by(|l| l.name.as_str().cmp(name)).ok().map(|i| &self.layers[i])
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == "conv").count()
    }

    pub fn flops_per_image(&self) -> f64 {
        self.totals.flops as f64 / self.metadata.input.n as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `name params flops mac act_bytes`
    pub fn summary_line(&self) -> String {
        let t = &self.totals;
        format!("{} {} {} {} {}", self.metadata.arch, t.params, t.flops, t.mac, t.activation_bytes)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let m = &self.metadata;
        let _ = writeln!(
            s,
            "# arch={} input={} dtype_bytes={} flops={:?} mac={} at {}",
            m.arch, m.input, m.dtype_bytes, m.flops_convention, m.mac_units, m.mac_spatial_convention
        );
        let _ = writeln!(
            s,
            "{:<36} {:<16} {:<20} {:>12} {:>16} {:>14} {:>14}",
            "name", "kind", "output", "params", "flops", "mac", "act_elems"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<36} {:<16} {:<20} {:>12} {:>16} {:>14} {:>14}",
                l.name,
                l.kind,
                l.output.to_string(),
                l.cost.params,
                l.cost.flops,
                l.cost.mac,
                l.cost.activation_elems
            );
        }
        for (label, t) in [("total(conv)", &self.conv_totals), ("total(other)", &self.other_totals), ("total", &self.totals)] {
            let _ = writeln!(
                s,
                "{:<36} {:<16} {:<20} {:>12} {:>16} {:>14} {:>14}",
                label,
                format!("{} nodes", t.nodes),
                "",
                t.params,
                t.flops,
                t.mac,
                t.activation_elems
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,n,c,h,w,params,flops,mac,activation_elems\n");
        for l in &self.layers {
            let o = l.output;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                l.name, l.kind, o.n, o.c, o.h, o.w, l.cost.params, l.cost.flops, l.cost.mac, l.cost.activation_elems
            );
        }
        s
    }
}
