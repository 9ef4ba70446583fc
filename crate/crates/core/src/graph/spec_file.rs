//! JSON architecture-spec files.
//!
//! ```json
//! { "version": 1,
//!   "nodes": [ {"id": 0, "name": "input", "kind": "input", "params": {}, "inputs": []},
//!              {"id": 1, "name": "stem/conv1", "kind": "conv",
//!               "params": {"kernel": 3, "stride": 2, "padding": 1, "out_channels": 64, "bias": false},
//!               "inputs": [0]} ],
//!   "input": 0, "output": 1 }
//! ```
//!
//! Kind strings: `input`, `conv`, `batch_norm`, `relu`, `max_pool`, `avg_pool`,
//! `concat`, `add`, `global_avg_pool`, `linear`. Pools take `kernel`, `stride`,
//! `padding`; `linear` takes `out_features` and `bias`. Other kinds take no params.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ConvParams, Graph, GraphError, LayerKind, LinearParams, Node, NodeId, PoolParams};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub version: u32,
    pub nodes: Vec<NodeSpec>,
    pub input: NodeId,
    pub output: NodeId,
}

fn to_params<T: Serialize>(p: &T) -> Map<String, Value> {
    match serde_json::to_value(p) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}

fn from_params<T: for<'de> Deserialize<'de>>(node: &NodeSpec) -> Result<T, GraphError> {
    serde_json::from_value(Value::Object(node.params.clone()))
        .map_err(|e| GraphError::Invalid(format!("node {} ({}): bad params: {e}", node.id, node.kind)))
}

impl NodeSpec {
    fn to_kind(&self) -> Result<LayerKind, GraphError> {
        Ok(match self.kind.as_str() {
            "input" => LayerKind::Input,
            "conv" => LayerKind::Conv(from_params::<ConvParams>(self)?),
            "batch_norm" => LayerKind::BatchNorm,
            "relu" => LayerKind::Relu,
            "max_pool" => LayerKind::MaxPool(from_params::<PoolParams>(self)?),
            "avg_pool" => LayerKind::AvgPool(from_params::<PoolParams>(self)?),
            "concat" => LayerKind::Concat,
            "add" => LayerKind::Add,
            "global_avg_pool" => LayerKind::GlobalAvgPool,
            "linear" => LayerKind::Linear(from_params::<LinearParams>(self)?),
            other => return Err(GraphError::Invalid(format!("node {}: unknown kind {other:?}", self.id))),
        })
    }
}

impl From<&Node> for NodeSpec {
    fn from(node: &Node) -> Self {
        let params = match &node.kind {
            LayerKind::Conv(p) => to_params(p),
            LayerKind::MaxPool(p) | LayerKind::AvgPool(p) => to_params(p),
            LayerKind::Linear(p) => to_params(p),
            _ => Map::new(),
        };
        NodeSpec {
            id: node.id,
            name: node.name.clone(),
            kind: node.kind.tag().to_string(),
            params,
            inputs: node.inputs.clone(),
        }
    }
}

impl GraphSpec {
    pub fn from_graph(graph: &Graph) -> Self {
        GraphSpec {
            version: SPEC_VERSION,
            nodes: graph.nodes().map(NodeSpec::from).collect(),
            input: graph.input(),
            output: graph.output(),
        }
    }

    /// Decodes node kinds; structural checks are left to [`Graph::validate`].
    pub fn into_graph(self) -> Result<Graph, GraphError> {
        if self.version != SPEC_VERSION {
            return Err(GraphError::Invalid(format!("unsupported spec version {}", self.version)));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| Ok(Node { id: n.id, name: n.name.clone(), kind: n.to_kind()?, inputs: n.inputs.clone() }))
            .collect::<Result<Vec<_>, GraphError>>()?;
        Ok(Graph::new(nodes, self.input, self.output))
    }

    pub fn from_json(text: &str) -> Result<Graph, GraphError> {
        let spec: GraphSpec =
            serde_json::from_str(text).map_err(|e| GraphError::Invalid(format!("spec file: {e}")))?;
        spec.into_graph()
    }

    pub fn to_json(graph: &Graph) -> String {
        serde_json::to_string_pretty(&GraphSpec::from_graph(graph)).expect("spec serializes")
    }
}
