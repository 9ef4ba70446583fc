//! Computation-graph IR shared by the cost model and the reference engine.
//!
//! A [`Graph`] is an immutable list of [`Node`]s wired by id. Graphs can be
//! assembled in any shape (including broken ones, e.g. when decoded from a
//! spec file); [`Graph::validate`] reports structural problems as values and
//! [`Graph::topo_order`] / [`Graph::infer_shapes`] fail with a [`GraphError`].
//!
//! Node names follow a `stage/module/layer` path grammar, e.g.
//! `stage2/osa1/conv3` or `block1/layer4/bn`, so reports keyed by name stay
//! diffable across runs.

mod spec_file;

pub use spec_file::{GraphSpec, NodeSpec, SPEC_VERSION};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

/// Dense 4-D activation shape in (batch, channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        TensorShape { n, c, h, w }
    }

    pub fn elems(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }

    /// Parses `NxCxHxW` or `CxHxW` (batch defaults to 1).
    pub fn parse(s: &str) -> Result<Self, GraphError> {
        let bad = || GraphError::BadShape(s.to_string());
        let dims = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = match dims.as_slice() {
            [c, h, w] => TensorShape::new(1, *c, *h, *w),
            [n, c, h, w] => TensorShape::new(*n, *c, *h, *w),
            _ => return Err(bad()),
        };
        if !shape.is_valid() {
            return Err(bad());
        }
        Ok(shape)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvParams {
    /// Bias-free `k×k` conv with "same" padding.
    pub fn same(kernel: usize, out_channels: usize) -> Self {
        ConvParams { kernel, stride: 1, padding: kernel / 2, out_channels, bias: false }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearParams {
    pub out_features: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv(ConvParams),
    BatchNorm,
    Relu,
    MaxPool(PoolParams),
    /// `k×k` average pooling; padded taps count toward the divisor.
    AvgPool(PoolParams),
    Concat,
    Add,
    GlobalAvgPool,
    Linear(LinearParams),
}

impl LayerKind {
    /// Kind string used in spec files and reports.
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv(_) => "conv",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "max_pool",
            LayerKind::AvgPool(_) => "avg_pool",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear(_) => "linear",
        }
    }

    /// Layers that carry trainable weights.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Linear(_))
    }

    fn arity(&self) -> Arity {
        match self {
            LayerKind::Input => Arity::Exactly(0),
            LayerKind::Concat => Arity::AtLeast(2),
            LayerKind::Add => Arity::Exactly(2),
            _ => Arity::Exactly(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "exactly {k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph has a cycle through node {0}")]
    Cycle(NodeId),
    #[error("node {node} references missing node {input}")]
    DanglingInput { node: NodeId, input: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {name}: shape mismatch between {a} and {b}")]
    ShapeMismatch { name: String, a: TensorShape, b: TensorShape },
    #[error("node {name}: non-positive output dimension from input {input}")]
    NonPositiveDim { name: String, input: TensorShape },
    #[error("node {name}: linear layer needs 1x1 spatial input, got {input}")]
    LinearNeedsFlat { name: String, input: TensorShape },
    #[error("graph input expects {expected} channels, got {got}")]
    InputMismatch { expected: TensorShape, got: TensorShape },
    #[error("invalid shape {0:?} (expected NxCxHxW or CxHxW with all dims >= 1)")]
    BadShape(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// One structural problem found by [`Graph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(NodeId),
    DuplicateName(String),
    SelfReference(NodeId),
    DanglingInput { node: NodeId, input: NodeId },
    Arity { node: NodeId, kind: &'static str, expected: String, got: usize },
    Cycle(NodeId),
    InputCount(usize),
    MissingEndpoint(NodeId),
    BadConv { node: NodeId, reason: String },
    BadPool { node: NodeId, reason: String },
    BiasBeforeBatchNorm(NodeId),
    Unused(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate id {id}"),
            Violation::DuplicateName(n) => write!(f, "duplicate name {n:?}"),
            Violation::SelfReference(id) => write!(f, "self-reference at node {id}"),
            Violation::DanglingInput { node, input } => {
                write!(f, "dangling input: node {node} references missing node {input}")
            }
            Violation::Arity { node, kind, expected, got } => {
                let label = match *kind {
                    "add" => "Add",
                    "concat" => "Concat",
                    other => other,
                };
                write!(f, "{label} arity: node {node} needs {expected} inputs, has {got}")
            }
            Violation::Cycle(id) => write!(f, "cycle through node {id}"),
            Violation::InputCount(n) => write!(f, "expected exactly one Input node, found {n}"),
            Violation::MissingEndpoint(id) => write!(f, "graph endpoint {id} does not exist"),
            Violation::BadConv { node, reason } => write!(f, "conv {node}: {reason}"),
            Violation::BadPool { node, reason } => write!(f, "pool {node}: {reason}"),
            Violation::BiasBeforeBatchNorm(id) => {
                write!(f, "conv {id} feeds a BatchNorm but has a bias")
            }
            Violation::Unused(id) => write!(f, "node {id} does not reach the output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    input: NodeId,
    output: NodeId,
}

impl Graph {
    /// Assembles a graph without checking it; see [`Graph::validate`].
    pub fn new(nodes: Vec<Node>, input: NodeId, output: NodeId) -> Self {
        let mut index = BTreeMap::new();
        for (pos, node) in nodes.iter().enumerate() {
            index.entry(node.id).or_insert(pos);
        }
        Graph { nodes, index, input, output }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.index.get(&id).map(|&pos| &self.nodes[pos])
    }

    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    fn get(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.node(id).ok_or(GraphError::UnknownNode(id))
    }

    /// Ids of nodes consuming `id`, ascending.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        let set: BTreeSet<NodeId> =
            self.nodes.iter().filter(|n| n.inputs.contains(&id)).map(|n| n.id).collect();
        set.into_iter().collect()
    }

    pub fn count_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Returns every structural violation. An empty list means the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();

        let mut seen_ids = BTreeSet::new();
        let mut seen_names = BTreeSet::new();
        for node in &self.nodes {
            if !seen_ids.insert(node.id) {
                out.push(Violation::DuplicateId(node.id));
            }
            if !seen_names.insert(node.name.as_str()) {
                out.push(Violation::DuplicateName(node.name.clone()));
            }
        }

        let inputs = self.count_kind(|k| matches!(k, LayerKind::Input));
        if inputs != 1 {
            out.push(Violation::InputCount(inputs));
        }
        for endpoint in [self.input, self.output] {
            if self.node(endpoint).is_none() {
                out.push(Violation::MissingEndpoint(endpoint));
            }
        }

        for node in &self.nodes {
            for &src in &node.inputs {
                if src == node.id {
                    out.push(Violation::SelfReference(node.id));
                } else if self.node(src).is_none() {
                    out.push(Violation::DanglingInput { node: node.id, input: src });
                }
            }
            let arity = node.kind.arity();
            if !arity.accepts(node.inputs.len()) {
                out.push(Violation::Arity {
                    node: node.id,
                    kind: node.kind.tag(),
                    expected: arity.to_string(),
                    got: node.inputs.len(),
                });
            }
            match node.kind {
                LayerKind::Conv(p) => {
                    if p.kernel == 0 || p.kernel % 2 == 0 {
                        out.push(Violation::BadConv {
                            node: node.id,
                            reason: format!("kernel {} must be odd and >= 1", p.kernel),
                        });
                    }
                    if !(1..=2).contains(&p.stride) {
                        out.push(Violation::BadConv {
                            node: node.id,
                            reason: format!("stride {} must be 1 or 2", p.stride),
                        });
                    }
                    if p.out_channels == 0 {
                        out.push(Violation::BadConv {
                            node: node.id,
                            reason: "out_channels must be >= 1".into(),
                        });
                    }
                    let feeds_bn = self
                        .consumers(node.id)
                        .iter()
                        .any(|&c| matches!(self.node(c).map(|n| n.kind), Some(LayerKind::BatchNorm)));
                    if p.bias && feeds_bn {
                        out.push(Violation::BiasBeforeBatchNorm(node.id));
                    }
                }
                LayerKind::MaxPool(p) | LayerKind::AvgPool(p) => {
                    if p.kernel == 0 || p.stride == 0 {
                        out.push(Violation::BadPool {
                            node: node.id,
                            reason: "kernel and stride must be >= 1".into(),
                        });
                    }
                }
                LayerKind::Linear(p) if p.out_features == 0 => {
                    out.push(Violation::Arity {
                        node: node.id,
                        kind: "linear",
                        expected: "out_features >= 1".into(),
                        got: 0,
                    });
                }
                _ => {}
            }
        }

        let structurally_sound = !out.iter().any(|v| {
            matches!(
                v,
                Violation::SelfReference(_)
                    | Violation::DanglingInput { .. }
                    | Violation::DuplicateId(_)
                    | Violation::MissingEndpoint(_)
            )
        });
        if structurally_sound {
            match self.topo_order() {
                Err(GraphError::Cycle(id)) => out.push(Violation::Cycle(id)),
                Err(_) => {}
                Ok(_) => {
                    let reaching = self.ancestors_of(self.output);
                    for node in &self.nodes {
                        if !reaching.contains(&node.id) {
                            out.push(Violation::Unused(node.id));
                        }
                    }
                }
            }
        }
        out
    }

    /// Errors with the collected violations if the graph is not valid.
    pub fn ensure_valid(&self) -> Result<(), GraphError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(GraphError::Invalid(msgs.join("; ")))
        }
    }

    fn ancestors_of(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur) {
                continue;
            }
            if let Some(node) = self.node(cur) {
                stack.extend(node.inputs.iter().copied());
            }
        }
        seen
    }

    /// Kahn ordering; among ready nodes the smallest id goes first.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut consumers: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for node in &self.nodes {
            indegree.entry(node.id).or_insert(0);
            for &src in &node.inputs {
                if self.node(src).is_none() {
                    return Err(GraphError::DanglingInput { node: node.id, input: src });
                }
                *indegree.entry(node.id).or_insert(0) += 1;
                consumers.entry(src).or_default().push(node.id);
            }
        }
        let mut ready: BTreeSet<NodeId> =
            indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
        let mut order = Vec::with_capacity(indegree.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &c in consumers.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                let d = indegree.get_mut(&c).expect("consumer indexed");
                *d -= 1;
                if *d == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() < indegree.len() {
            let stuck = indegree
                .iter()
                .find(|(_, &d)| d > 0)
                .map(|(&id, _)| id)
                .expect("some node left with inputs");
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Output shape of every node for a given graph-input shape.
    ///
    /// Conv and pool layers use floor mode:
    /// `out = (in + 2*padding - kernel) / stride + 1`.
    pub fn infer_shapes(&self, input: TensorShape) -> Result<BTreeMap<NodeId, TensorShape>, GraphError> {
        if !input.is_valid() {
            return Err(GraphError::BadShape(input.to_string()));
        }
        let mut shapes = BTreeMap::new();
        for id in self.topo_order()? {
            let node = self.get(id)?;
            let ins: Vec<TensorShape> = node.inputs.iter().map(|i| shapes[i]).collect();
            let shape = output_shape(node, &ins, input)?;
            shapes.insert(id, shape);
        }
        Ok(shapes)
    }
}

fn spatial(name: &str, input: TensorShape, kernel: usize, stride: usize, padding: usize) -> Result<(usize, usize), GraphError> {
    let dim = |d: usize| -> Option<usize> {
        let padded = d + 2 * padding;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    };
    match (dim(input.h), dim(input.w)) {
        (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok((h, w)),
        _ => Err(GraphError::NonPositiveDim { name: name.to_string(), input }),
    }
}

fn output_shape(node: &Node, ins: &[TensorShape], graph_input: TensorShape) -> Result<TensorShape, GraphError> {
    let first = || {
        ins.first()
            .copied()
            .ok_or_else(|| GraphError::Invalid(format!("node {} has no inputs", node.name)))
    };
    Ok(match node.kind {
        LayerKind::Input => graph_input,
        LayerKind::Conv(p) => {
            let x = first()?;
            let (h, w) = spatial(&node.name, x, p.kernel, p.stride, p.padding)?;
            TensorShape::new(x.n, p.out_channels, h, w)
        }
        LayerKind::MaxPool(p) | LayerKind::AvgPool(p) => {
            let x = first()?;
            let (h, w) = spatial(&node.name, x, p.kernel, p.stride, p.padding)?;
            TensorShape::new(x.n, x.c, h, w)
        }
        LayerKind::BatchNorm | LayerKind::Relu => first()?,
        LayerKind::Concat => {
            let head = first()?;
            let mut c = 0;
            for s in ins {
                if (s.n, s.h, s.w) != (head.n, head.h, head.w) {
                    return Err(GraphError::ShapeMismatch { name: node.name.clone(), a: head, b: *s });
                }
                c += s.c;
            }
            TensorShape { c, ..head }
        }
        LayerKind::Add => {
            let head = first()?;
            for s in ins {
                if *s != head {
                    return Err(GraphError::ShapeMismatch { name: node.name.clone(), a: head, b: *s });
                }
            }
            head
        }
        LayerKind::GlobalAvgPool => {
            let x = first()?;
            TensorShape::new(x.n, x.c, 1, 1)
        }
        LayerKind::Linear(p) => {
            let x = first()?;
            if x.h != 1 || x.w != 1 {
                return Err(GraphError::LinearNeedsFlat { name: node.name.clone(), input: x });
            }
            TensorShape::new(x.n, p.out_features, 1, 1)
        }
    })
}

/// Incremental graph construction with sequential ids.
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { id, name: name.into(), kind, inputs: inputs.to_vec() });
        id
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    /// Channel count of `id`, following channel-preserving layers back to a
    /// producer. Input nodes report `input_channels`.
    pub fn channels(&self, id: NodeId, input_channels: usize) -> Option<usize> {
        let node = self.nodes.get(id)?;
        match node.kind {
            LayerKind::Input => Some(input_channels),
            LayerKind::Conv(p) => Some(p.out_channels),
            LayerKind::Linear(p) => Some(p.out_features),
            LayerKind::Concat => node.inputs.iter().map(|&i| self.channels(i, input_channels)).sum(),
            _ => self.channels(*node.inputs.first()?, input_channels),
        }
    }

    /// Finishes with the single Input node as entry and `output` as exit.
    pub fn finish(self, output: NodeId) -> Graph {
        let input = self
            .nodes
            .iter()
            .find(|n| matches!(n.kind, LayerKind::Input))
            .map(|n| n.id)
            .unwrap_or(0);
        Graph::new(self.nodes, input, output)
    }
}
