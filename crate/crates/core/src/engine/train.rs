use super::exec::{backward, forward, init_params, Mode};
use super::rng::SplitMix64;
use super::tensor::{is_trainable, Element, ParamStore, Tensor, BN_MEAN, BN_VAR};
use super::EngineError;
use crate::graph::{Graph, LayerKind, TensorShape};

/// Fraction of the running batch-norm statistics kept at each step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub graph: Graph,
    pub params: ParamStore<T>,
    /// Gradients from the most recent step.
    pub grads: ParamStore<T>,
    pub velocity: ParamStore<T>,
    pub step: u64,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl<T: Element> TrainState<T> {
    pub fn new(graph: Graph, input: TensorShape, seed: u64, lr: f64, momentum: f64) -> Result<Self, EngineError> {
        check_classifier(&graph)?;
        let params = init_params(&graph, input, seed)?;
        let grads = params.zeros_like_trainable();
        let velocity = params.zeros_like_trainable();
        Ok(TrainState { graph, params, grads, velocity, step: 0, lr, momentum, seed })
    }

    pub fn classes(&self) -> usize {
        match self.graph.node(self.graph.output()).map(|n| n.kind) {
            Some(LayerKind::Linear(p)) => p.out_features,
            _ => 0,
        }
    }
}

fn check_classifier(graph: &Graph) -> Result<(), EngineError> {
    let out = graph.node(graph.output()).ok_or_else(|| EngineError::NotAClassifier("missing output node".into()))?;
    let LayerKind::Linear(_) = out.kind else {
        return Err(EngineError::NotAClassifier(format!("output {} is {}", out.name, out.kind.tag())));
    };
    match out.inputs.first().and_then(|&i| graph.node(i)) {
        Some(n) if matches!(n.kind, LayerKind::GlobalAvgPool) => Ok(()),
        _ => Err(EngineError::NotAClassifier(format!("{} is not fed by global_avg_pool", out.name))),
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits. The loss is accumulated in f64.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>), EngineError> {
    let (n, classes) = (logits.shape.n, logits.shape.c);
    if labels.len() != n {
        return Err(EngineError::Shape { node: "loss".into(), detail: format!("{} labels for batch of {n}", labels.len()) });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(EngineError::LabelOutOfRange { index, label, classes });
    }
    let mut grad = Tensor::zeros(logits.shape);
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data[b * classes..(b + 1) * classes].iter().map(|v| v.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        for (c, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad.data[b * classes + c] = T::from_f64((p - target) / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

/// One SGD-with-momentum step: `v ← m·v + g`, then `θ ← θ − lr·v`.
/// Batch-norm running statistics move toward the batch statistics as
/// `r ← 0.9·r + 0.1·batch` (biased variance).
pub fn train_step<T: Element>(state: &mut TrainState<T>, inputs: &Tensor<T>, labels: &[usize]) -> Result<f64, EngineError> {
    let acts = forward(&state.graph, &state.params, inputs, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(acts.output(), labels)?;
    let grads = backward(&state.graph, &state.params, &acts, &dlogits)?;

    let lr = T::from_f64(state.lr);
    let m = T::from_f64(state.momentum);
    for ((node, field, p), (_, _, v)) in state
        .params
        .iter_mut()
        .filter(|(_, f, _)| is_trainable(f))
        .zip(state.velocity.iter_mut())
    {
        let g = grads.get(node, field).expect("gradient for every trainable field");
        for ((theta, vel), grad) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *vel = m * *vel + *grad;
            *theta = *theta - lr * *vel;
        }
    }

    let keep = T::from_f64(BN_MOMENTUM);
    let blend = T::from_f64(1.0 - BN_MOMENTUM);
    for (&id, stats) in acts.bn_stats() {
        let name = &state.graph.node(id).expect("bn node").name;
        for (field, batch) in [(BN_MEAN, &stats.mean), (BN_VAR, &stats.var)] {
            let running = state.params.get_mut(name, field).expect("running stats allocated");
            for (r, b) in running.data.iter_mut().zip(batch) {
                *r = keep * *r + blend * *b;
            }
        }
    }

    state.grads = grads;
    state.step += 1;
    Ok(loss)
}

/// Runs `steps` SGD steps over minibatches of `batch` samples. Sample order
/// is reshuffled every epoch with `SplitMix64(seed + 1)`; a trailing partial
/// batch is dropped. Calls `on_step(step, loss)` after each step and returns
/// the losses.
pub fn train_loop<T: Element>(
    state: &mut TrainState<T>,
    images: &Tensor<T>,
    labels: &[usize],
    steps: usize,
    batch: usize,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, EngineError> {
    let n = images.shape.n;
    if batch == 0 || batch > n || labels.len() != n {
        return Err(EngineError::Shape {
            node: "train".into(),
            detail: format!("batch {batch} over {n} images with {} labels", labels.len()),
        });
    }
    let mut rng = SplitMix64::new(state.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if cursor + batch > n {
            order.sort_unstable();
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = train_step(state, &images.gather(idx), &y)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Means of consecutive non-overlapping windows of `width` values.
pub fn window_means(values: &[f64], width: usize) -> Vec<f64> {
    values.chunks_exact(width.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
}

/// Eval-mode top-1 accuracy over `images`, processed in chunks of `batch`.
pub fn accuracy<T: Element>(graph: &Graph, params: &ParamStore<T>, images: &Tensor<T>, labels: &[usize], batch: usize) -> Result<f64, EngineError> {
    let n = images.shape.n;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let acts = forward(graph, params, &images.batch_slice(start..end), Mode::Eval)?;
        let logits = acts.output();
        let classes = logits.shape.c;
        for b in 0..end - start {
            let row = &logits.data[b * classes..(b + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if pred == labels[start + b] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n.max(1) as f64)
}
