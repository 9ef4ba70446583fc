//! Connectivity of aggregation blocks: how strongly each target layer draws
//! on each of its source layers, measured as the mean absolute weight over
//! the input-channel slice that carries the source.
//!
//! Sources are the block input plus every conv in the block. Targets are the
//! convs and linear layers in the block, plus any weighted layer outside it
//! that reads the block's final concatenation (e.g. a DenseNet transition).
//! Channel-preserving layers (batch norm, ReLU, pooling) are looked through
//! when tracing which producer feeds which channels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::engine::{Element, ParamStore, WEIGHT};
use crate::graph::{Graph, GraphError, LayerKind, NodeId};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no conv or linear layer under {0:?}")]
    EmptyModule(String),
    #[error("node {0}: missing weight")]
    MissingParam(String),
    #[error("node {node}: {detail}")]
    Shape { node: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    /// Ordered by depth; the block input comes first.
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `values[s][t]`, normalized so each target's largest entry is 1.
    /// `None` where source `s` does not feed target `t`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl ConnectivityMatrix {
    pub fn get(&self, source: &str, target: &str) -> Option<f64> {
        let s = self.sources.iter().position(|n| n == source)?;
        let t = self.targets.iter().position(|n| n == target)?;
        self.values[s][t]
    }

    /// Defined `(source index, value)` pairs for target `t`, shallowest first.
    pub fn column(&self, t: usize) -> Vec<(usize, f64)> {
        self.values.iter().enumerate().filter_map(|(s, row)| row[t].map(|v| (s, v))).collect()
    }

    /// `source,target,value` rows, target-major with sources by depth.
    /// Undefined entries have an empty value field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target,value\n");
        for (t, target) in self.targets.iter().enumerate() {
            for (s, source) in self.sources.iter().enumerate() {
                match self.values[s][t] {
                    Some(v) => writeln!(out, "{source},{target},{v}"),
                    None => writeln!(out, "{source},{target},"),
                }
                .expect("writing to a String");
            }
        }
        out
    }
}

fn channels(graph: &Graph, id: NodeId) -> Option<usize> {
    let node = graph.node(id)?;
    match node.kind {
        LayerKind::Input => None,
        LayerKind::Conv(p) => Some(p.out_channels),
        LayerKind::Linear(p) => Some(p.out_features),
        LayerKind::Concat => node.inputs.iter().map(|&i| channels(graph, i)).sum(),
        _ => channels(graph, *node.inputs.first()?),
    }
}

/// Follows single-input, channel-preserving layers back to a producer.
fn trace(graph: &Graph, mut id: NodeId) -> NodeId {
    loop {
        let node = graph.node(id).expect("ids from a validated graph");
        match node.kind {
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::MaxPool(_) | LayerKind::AvgPool(_) | LayerKind::GlobalAvgPool => {
                id = node.inputs[0];
            }
            _ => return id,
        }
    }
}

/// Producers feeding `id` in channel order, expanding nested concats.
fn leaves(graph: &Graph, id: NodeId, out: &mut Vec<NodeId>) {
    let id = trace(graph, id);
    let node = graph.node(id).expect("ids from a validated graph");
    if matches!(node.kind, LayerKind::Concat) {
        for &i in &node.inputs {
            leaves(graph, i, out);
        }
    } else {
        out.push(id);
    }
}

fn in_module(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('/'))
}

/// Builds the connectivity matrix for the block whose node names start with
/// `prefix/`. Fails if a target's weight is missing from `params`.
pub fn connectivity_matrix<T: Element>(graph: &Graph, prefix: &str, params: &ParamStore<T>) -> Result<ConnectivityMatrix, AnalysisError> {
    graph.ensure_valid()?;
    let prefix = prefix.trim_end_matches('/');
    let order = graph.topo_order()?;
    let depth: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(d, &id)| (id, d)).collect();

    // Target id and its producers in input-channel order.
    let mut targets: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
    for &id in &order {
        let node = graph.node(id).expect("topo ids exist");
        if !matches!(node.kind, LayerKind::Conv(_) | LayerKind::Linear(_)) {
            continue;
        }
        let mut feeds = Vec::new();
        leaves(graph, node.inputs[0], &mut feeds);
        let inside = in_module(&node.name, prefix);
        let reads_block = feeds.len() > 1 && feeds.iter().any(|&f| in_module(&graph.node(f).expect("leaf").name, prefix));
        if inside || reads_block {
            targets.push((id, feeds));
        }
    }
    if !targets.iter().any(|(id, _)| in_module(&graph.node(*id).expect("target").name, prefix)) {
        return Err(AnalysisError::EmptyModule(prefix.to_string()));
    }

    // Sources: every producer feeding a target, ordered by depth.
    let mut source_ids: Vec<NodeId> = targets.iter().flat_map(|(_, f)| f.iter().copied()).collect();
    source_ids.sort_by_key(|id| depth[id]);
    source_ids.dedup();
    let row_of: BTreeMap<NodeId, usize> = source_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();

    let mut values = vec![vec![None; targets.len()]; source_ids.len()];
    for (t, (id, feeds)) in targets.iter().enumerate() {
        let node = graph.node(*id).expect("target");
        let w = params.get(&node.name, WEIGHT).ok_or_else(|| AnalysisError::MissingParam(node.name.clone()))?;
        let shape_err = |detail: String| AnalysisError::Shape { node: node.name.clone(), detail };
        if w.dims.len() < 2 {
            return Err(shape_err(format!("weight has rank {}", w.dims.len())));
        }
        let (c_out, c_in) = (w.dims[0], w.dims[1]);
        let inner: usize = w.dims[2..].iter().product();

        let mut widths: Vec<Option<usize>> = feeds.iter().map(|&f| channels(graph, f)).collect();
        let known: usize = widths.iter().flatten().sum();
        match widths.iter().filter(|w| w.is_none()).count() {
            0 => {}
            1 => *widths.iter_mut().find(|w| w.is_none()).expect("one unknown") = c_in.checked_sub(known),
            _ => return Err(shape_err("cannot attribute channels to more than one graph input".into())),
        }
        let widths: Vec<usize> = widths.into_iter().map(|w| w.unwrap_or(usize::MAX)).collect();
        if widths.iter().try_fold(0usize, |a, &b| a.checked_add(b)) != Some(c_in) {
            return Err(shape_err(format!("{c_in} input channels but sources supply {widths:?}")));
        }

        // Sum and count of |w| per source, so repeated sources pool their slices.
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut start = 0;
        for (&f, &width) in feeds.iter().zip(&widths) {
            let e = acc.entry(row_of[&f]).or_default();
            for o in 0..c_out {
                let base = (o * c_in + start) * inner;
                for v in &w.data[base..base + width * inner] {
                    e.0 += v.as_f64().abs();
                }
            }
            e.1 += c_out * width * inner;
            start += width;
        }
        let means: Vec<(usize, f64)> = acc.into_iter().map(|(r, (sum, n))| (r, if n == 0 { 0.0 } else { sum / n as f64 })).collect();
        let max = means.iter().map(|m| m.1).fold(0.0, f64::max);
        for (r, m) in means {
            values[r][t] = Some(if max > 0.0 { m / max } else { 0.0 });
        }
    }

    let name = |id: &NodeId| graph.node(*id).expect("node").name.clone();
    Ok(ConnectivityMatrix {
        sources: source_ids.iter().map(name).collect(),
        targets: targets.iter().map(|(id, _)| name(id)).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationSummary {
    pub target: String,
    pub shallow_influence: f64,
    pub deep_influence: f64,
}

/// Splits each target's defined sources at the median depth and averages the
/// normalized values of each half. With an odd count the median source
/// belongs to both halves, so a single source gives equal halves.
pub fn aggregation_summary(m: &ConnectivityMatrix) -> Vec<AggregationSummary> {
    let mean = |xs: &[(usize, f64)]| xs.iter().map(|x| x.1).sum::<f64>() / xs.len() as f64;
    m.targets
        .iter()
        .enumerate()
        .filter_map(|(t, target)| {
            let col = m.column(t);
            if col.is_empty() {
                return None;
            }
            let half = col.len().div_ceil(2);
            Some(AggregationSummary {
                target: target.clone(),
                shallow_influence: mean(&col[..half]),
                deep_influence: mean(&col[col.len() - half..]),
            })
        })
        .collect()
}
