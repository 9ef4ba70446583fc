use std::collections::BTreeMap;

use super::ops::{self, BnStats};
use super::rng::SplitMix64;
use super::tensor::{Element, Param, ParamStore, Tensor, BIAS, BN_BETA, BN_GAMMA, BN_MEAN, BN_VAR, WEIGHT};
use super::EngineError;
use crate::graph::{Graph, LayerKind, Node, NodeId, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics.
    Train,
    /// Batch norm uses the running statistics.
    Eval,
}

/// Everything a forward pass produced, as needed by [`backward`].
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub mode: Mode,
    pub input_shape: TensorShape,
    outputs: BTreeMap<NodeId, Tensor<T>>,
    bn_stats: BTreeMap<NodeId, BnStats<T>>,
    pool_args: BTreeMap<NodeId, Vec<usize>>,
    output: NodeId,
}

impl<T: Element> Activations<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.outputs.get(&id)
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.outputs[&self.output]
    }

    pub fn outputs(&self) -> &BTreeMap<NodeId, Tensor<T>> {
        &self.outputs
    }

    /// Batch statistics of each BN node (train mode only).
    pub fn bn_stats(&self) -> &BTreeMap<NodeId, BnStats<T>> {
        &self.bn_stats
    }
}

/// Allocates parameters in topological order, fields in `weight, bias` order.
///
/// Conv and linear weights are drawn from `N(0, 2 / fan_in)` with
/// `fan_in = c_in · k²` (k = 1 for linear) using [`SplitMix64`] seeded with
/// `seed`, one normal per element in row-major order. Biases start at 0;
/// batch norm starts at gamma = 1, beta = 0, running mean 0, variance 1.
pub fn init_params<T: Element>(graph: &Graph, input: TensorShape, seed: u64) -> Result<ParamStore<T>, EngineError> {
    graph.ensure_valid()?;
    let shapes = graph.infer_shapes(input)?;
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    for id in graph.topo_order()? {
        let node = graph.node(id).expect("topo ids exist");
        let in_c = node.inputs.first().map(|i| shapes[i].c).unwrap_or(0);
        let mut draw = |dims: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = dims.iter().product();
            Param { dims: dims.to_vec(), data: (0..n).map(|_| T::from_f64(rng.normal() * std)).collect() }
        };
        match node.kind {
            LayerKind::Conv(p) => {
                let k = p.kernel;
                store.insert(&node.name, WEIGHT, draw(&[p.out_channels, in_c, k, k], in_c * k * k));
                if p.bias {
                    store.insert(&node.name, BIAS, Param::zeros(&[p.out_channels]));
                }
            }
            LayerKind::Linear(p) => {
                store.insert(&node.name, WEIGHT, draw(&[p.out_features, in_c], in_c));
                if p.bias {
                    store.insert(&node.name, BIAS, Param::zeros(&[p.out_features]));
                }
            }
            LayerKind::BatchNorm => {
                store.insert(&node.name, BN_GAMMA, Param::filled(&[in_c], T::one()));
                store.insert(&node.name, BN_BETA, Param::zeros(&[in_c]));
                store.insert(&node.name, BN_MEAN, Param::zeros(&[in_c]));
                store.insert(&node.name, BN_VAR, Param::filled(&[in_c], T::one()));
            }
            _ => {}
        }
    }
    Ok(store)
}

fn param<'a, T: Element>(params: &'a ParamStore<T>, node: &Node, field: &'static str, len: usize) -> Result<&'a [T], EngineError> {
    let p = params
        .get(&node.name, field)
        .ok_or_else(|| EngineError::MissingParam { node: node.name.clone(), field })?;
    if p.len() != len {
        return Err(EngineError::ParamShape { node: node.name.clone(), field, expected: len, got: p.len() });
    }
    Ok(&p.data)
}

fn check_finite<T: Element>(node: &Node, t: &Tensor<T>) -> Result<(), EngineError> {
    if cfg!(debug_assertions) && !t.all_finite() {
        return Err(EngineError::NonFinite(node.name.clone()));
    }
    Ok(())
}

pub fn forward<T: Element>(graph: &Graph, params: &ParamStore<T>, input: &Tensor<T>, mode: Mode) -> Result<Activations<T>, EngineError> {
    let shapes = graph.infer_shapes(input.shape)?;
    if input.data.len() != input.shape.elems() {
        return Err(EngineError::Shape { node: "input".into(), detail: "data length does not match shape".into() });
    }
    let mut acts = Activations {
        mode,
        input_shape: input.shape,
        outputs: BTreeMap::new(),
        bn_stats: BTreeMap::new(),
        pool_args: BTreeMap::new(),
        output: graph.output(),
    };
    for id in graph.topo_order()? {
        let node = graph.node(id).expect("topo ids exist");
        let out_shape = shapes[&id];
        let x = |i: usize| &acts.outputs[&node.inputs[i]];
        let y = match node.kind {
            LayerKind::Input => input.clone(),
            LayerKind::Conv(p) => {
                let cin = x(0).shape.c;
                let w = param(params, node, WEIGHT, p.out_channels * cin * p.kernel * p.kernel)?;
                let b = if p.bias { Some(param(params, node, BIAS, p.out_channels)?) } else { None };
                ops::conv_forward(x(0), w, b, &p, out_shape)
            }
            LayerKind::BatchNorm => {
                let c = out_shape.c;
                let gamma = param(params, node, BN_GAMMA, c)?;
                let beta = param(params, node, BN_BETA, c)?;
                let stats = match mode {
                    Mode::Train => ops::batch_stats(x(0)),
                    Mode::Eval => ops::running_stats(param(params, node, BN_MEAN, c)?, param(params, node, BN_VAR, c)?),
                };
                let y = ops::bn_forward(x(0), &stats, gamma, beta);
                acts.bn_stats.insert(id, stats);
                y
            }
            LayerKind::Relu => ops::relu_forward(x(0)),
            LayerKind::MaxPool(p) => {
                let (y, arg) = ops::max_pool_forward(x(0), &p, out_shape);
                acts.pool_args.insert(id, arg);
                y
            }
            LayerKind::AvgPool(p) => ops::avg_pool_forward(x(0), &p, out_shape),
            LayerKind::Concat => {
                let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &acts.outputs[i]).collect();
                ops::concat_forward(&ins, out_shape)
            }
            LayerKind::Add => ops::add_forward(x(0), x(1)),
            LayerKind::GlobalAvgPool => ops::gap_forward(x(0)),
            LayerKind::Linear(p) => {
                let cin = x(0).shape.c;
                let w = param(params, node, WEIGHT, p.out_features * cin)?;
                let b = if p.bias { Some(param(params, node, BIAS, p.out_features)?) } else { None };
                ops::linear_forward(x(0), w, b, p.out_features)
            }
        };
        check_finite(node, &y)?;
        acts.outputs.insert(id, y);
    }
    Ok(acts)
}

fn accumulate<T: Element>(grads: &mut BTreeMap<NodeId, Tensor<T>>, id: NodeId, g: Tensor<T>) {
    match grads.get_mut(&id) {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += *b;
            }
        }
        None => {
            grads.insert(id, g);
        }
    }
}

/// Gradient with respect to each node's output.
pub type NodeGrads<T> = BTreeMap<NodeId, Tensor<T>>;

/// Reverse-mode gradients of a scalar loss whose gradient with respect to the
/// graph output is `loss_grad`. Returns one tensor per trainable field.
pub fn backward<T: Element>(
    graph: &Graph,
    params: &ParamStore<T>,
    acts: &Activations<T>,
    loss_grad: &Tensor<T>,
) -> Result<ParamStore<T>, EngineError> {
    reverse(graph, params, acts, loss_grad, false).map(|(p, _)| p)
}

/// Like [`backward`], additionally returning the loss gradient with respect
/// to every node's output (including the Input node).
pub fn backward_with_node_grads<T: Element>(
    graph: &Graph,
    params: &ParamStore<T>,
    acts: &Activations<T>,
    loss_grad: &Tensor<T>,
) -> Result<(ParamStore<T>, NodeGrads<T>), EngineError> {
    reverse(graph, params, acts, loss_grad, true)
}

fn reverse<T: Element>(
    graph: &Graph,
    params: &ParamStore<T>,
    acts: &Activations<T>,
    loss_grad: &Tensor<T>,
    keep: bool,
) -> Result<(ParamStore<T>, NodeGrads<T>), EngineError> {
    let mut pgrads = params.zeros_like_trainable();
    let mut kept = BTreeMap::new();
    let out_id = graph.output();
    let missing = |id: NodeId| EngineError::MissingActivation(graph.node(id).map_or_else(|| id.to_string(), |n| n.name.clone()));
    let out = acts.get(out_id).ok_or_else(|| missing(out_id))?;
    if out.shape != loss_grad.shape {
        return Err(EngineError::Shape {
            node: "loss".into(),
            detail: format!("loss gradient {} does not match output {}", loss_grad.shape, out.shape),
        });
    }
    let mut grads: BTreeMap<NodeId, Tensor<T>> = BTreeMap::new();
    grads.insert(out_id, loss_grad.clone());

    for &id in graph.topo_order()?.iter().rev() {
        let Some(g) = grads.remove(&id) else { continue };
        let node = graph.node(id).expect("topo ids exist");
        acts.get(id).ok_or_else(|| missing(id))?;
        let input = |i: usize| acts.get(node.inputs[i]).ok_or_else(|| missing(node.inputs[i]));
        let needs_grad = |i: usize| keep || graph.node(node.inputs[i]).is_some_and(|n| !matches!(n.kind, LayerKind::Input));
        match node.kind {
            LayerKind::Input => {}
            LayerKind::Conv(p) => {
                let x = input(0)?;
                let w = param(params, node, WEIGHT, p.out_channels * x.shape.c * p.kernel * p.kernel)?;
                let (dx, dw, db) = ops::conv_backward(x, w, &p, &g, needs_grad(0));
                pgrads.get_mut(&node.name, WEIGHT).expect("grad slot").data = dw;
                if let Some(db) = db {
                    pgrads.get_mut(&node.name, BIAS).expect("grad slot").data = db;
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads, node.inputs[0], dx);
                }
            }
            LayerKind::BatchNorm => {
                let x = input(0)?;
                let stats = acts.bn_stats.get(&id).ok_or_else(|| missing(id))?;
                let gamma = param(params, node, BN_GAMMA, x.shape.c)?;
                let (dx, dgamma, dbeta) = ops::bn_backward(x, stats, gamma, &g, acts.mode == Mode::Train);
                pgrads.get_mut(&node.name, BN_GAMMA).expect("grad slot").data = dgamma;
                pgrads.get_mut(&node.name, BN_BETA).expect("grad slot").data = dbeta;
                accumulate(&mut grads, node.inputs[0], dx);
            }
            LayerKind::Relu => {
                let dx = ops::relu_backward(input(0)?, &g);
                accumulate(&mut grads, node.inputs[0], dx);
            }
            LayerKind::MaxPool(_) => {
                let arg = acts.pool_args.get(&id).ok_or_else(|| missing(id))?;
                let dx = ops::max_pool_backward(input(0)?.shape, arg, &g);
                accumulate(&mut grads, node.inputs[0], dx);
            }
            LayerKind::AvgPool(p) => {
                let dx = ops::avg_pool_backward(input(0)?.shape, &p, &g);
                accumulate(&mut grads, node.inputs[0], dx);
            }
            LayerKind::Concat => {
                let shapes = (0..node.inputs.len()).map(|i| input(i).map(|t| t.shape)).collect::<Result<Vec<_>, _>>()?;
                for (src, part) in node.inputs.iter().zip(ops::concat_backward(&shapes, &g)) {
                    accumulate(&mut grads, *src, part);
                }
            }
            LayerKind::Add => {
                accumulate(&mut grads, node.inputs[0], g.clone());
                accumulate(&mut grads, node.inputs[1], g.clone());
            }
            LayerKind::GlobalAvgPool => {
                let dx = ops::gap_backward(input(0)?.shape, &g);
                accumulate(&mut grads, node.inputs[0], dx);
            }
            LayerKind::Linear(p) => {
                let x = input(0)?;
                let w = param(params, node, WEIGHT, p.out_features * x.shape.c)?;
                let (dx, dw, db) = ops::linear_backward(x, w, &g, p.bias);
                pgrads.get_mut(&node.name, WEIGHT).expect("grad slot").data = dw;
                if let Some(db) = db {
                    pgrads.get_mut(&node.name, BIAS).expect("grad slot").data = db;
                }
                accumulate(&mut grads, node.inputs[0], dx);
            }
        }
        if keep {
            kept.insert(id, g);
        }
    }
    Ok((pgrads, kept))
}
