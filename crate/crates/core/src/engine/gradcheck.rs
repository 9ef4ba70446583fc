//! Central finite differences against the analytic reverse pass.

use super::exec::{backward, forward, init_params, Mode};
use super::rng::SplitMix64;
use super::tensor::{is_trainable, Element, ParamStore, Tensor};
use super::EngineError;
use crate::graph::{Graph, TensorShape};

pub const GRAD_CHECK_MAX_PARAMS: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `node.field[index]` of the worst parameter.
    pub worst: String,
    /// Analytic and finite-difference gradients at `worst`.
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn sum_squares<T: Element>(t: &Tensor<T>) -> f64 {
    t.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

/// Initializes parameters from `seed` and draws a standard-normal input from
/// `SplitMix64(seed + 1)`, then runs [`grad_check_with`].
pub fn grad_check<T: Element>(graph: &Graph, input: TensorShape, seed: u64, eps: f64) -> Result<GradCheckReport, EngineError> {
    let params = init_params::<T>(graph, input, seed)?;
    let mut rng = SplitMix64::new(seed.wrapping_add(1));
    let x = Tensor::from_vec(input, (0..input.elems()).map(|_| T::from_f64(rng.normal())).collect());
    grad_check_with(graph, &params, &x, eps)
}

/// Loss is the sum of squared outputs with batch norm in train mode. Returns
/// the maximum over trainable parameters of `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn grad_check_with<T: Element>(graph: &Graph, params: &ParamStore<T>, input: &Tensor<T>, eps: f64) -> Result<GradCheckReport, EngineError> {
    let total = params.num_params();
    if total > GRAD_CHECK_MAX_PARAMS {
        return Err(EngineError::TooManyParams { params: total, limit: GRAD_CHECK_MAX_PARAMS });
    }
    let acts = forward(graph, params, input, Mode::Train)?;
    let out = acts.output();
    let loss_grad = Tensor { shape: out.shape, data: out.data.iter().map(|&v| v + v).collect() };
    let analytic = backward(graph, params, &acts, &loss_grad)?;

    let loss_at = |p: &ParamStore<T>| -> Result<f64, EngineError> {
        Ok(sum_squares(forward(graph, p, input, Mode::Train)?.output()))
    };

    let mut probe = params.clone();
    let keys: Vec<(String, String, usize)> = params
        .iter()
        .filter(|(_, f, _)| is_trainable(f))
        .map(|(n, f, p)| (n.to_string(), f.to_string(), p.len()))
        .collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), analytic: 0.0, numeric: 0.0, checked: 0 };
    for (node, field, len) in keys {
        let grads = &analytic.get(&node, &field).expect("gradient per trainable field").data;
        for (i, &g) in grads.iter().enumerate().take(len) {
            let orig = probe.get(&node, &field).expect("param").data[i];
            let set = |p: &mut ParamStore<T>, v: T| p.get_mut(&node, &field).expect("param").data[i] = v;
            // Divide by the step actually representable in T.
            let hi = T::from_f64(orig.as_f64() + eps);
            let lo = T::from_f64(orig.as_f64() - eps);
            set(&mut probe, hi);
            let up = loss_at(&probe)?;
            set(&mut probe, lo);
            let down = loss_at(&probe)?;
            set(&mut probe, orig);

            let numeric = (up - down) / (hi.as_f64() - lo.as_f64());
            let a = g.as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if report.worst.is_empty() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{node}.{field}[{i}]");
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
