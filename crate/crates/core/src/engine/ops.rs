//! Layer kernels. Convolution is the direct sum
//! `out[n,co,y,x] = bias[co] + Σ_{ci,dy,dx} w[co,ci,dy,dx] · in[n,ci,y·s−p+dy,x·s−p+dx]`
//! accumulated in `(ci, dy, dx)` order per output element; padded taps are
//! skipped. Parallel loops only split work across independent outputs, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::gemm_conv;
use super::tensor::{Element, Tensor};
use crate::graph::{ConvParams, PoolParams, TensorShape};

pub const BN_EPS: f64 = 1e-5;

/// Output positions `lo..hi` whose tap at offset `d` lands inside the input.
pub(crate) fn tap_range(d: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if d >= pad { 0 } else { (pad - d).div_ceil(stride) };
    let hi = if in_len + pad <= d { 0 } else { (in_len + pad - d).div_ceil(stride).min(out_len) };
    (lo, hi.max(lo))
}

/// Direct loops for f64, im2col + GEMM for f32 (see [`Element::GEMM_CONV`]).
pub fn conv_forward<T: Element>(x: &Tensor<T>, w: &[T], bias: Option<&[T]>, p: &ConvParams, out_shape: TensorShape) -> Tensor<T> {
    if T::GEMM_CONV {
        gemm_conv::conv_forward(x, w, bias, p, out_shape)
    } else {
        conv_forward_direct(x, w, bias, p, out_shape)
    }
}

/// Returns `(d_input, d_weight, d_bias)`; dispatches like [`conv_forward`].
pub fn conv_backward<T: Element>(
    x: &Tensor<T>,
    w: &[T],
    p: &ConvParams,
    dout: &Tensor<T>,
    want_input_grad: bool,
) -> (Option<Tensor<T>>, Vec<T>, Option<Vec<T>>) {
    if T::GEMM_CONV {
        gemm_conv::conv_backward(x, w, p, dout, want_input_grad)
    } else {
        conv_backward_direct(x, w, p, dout, want_input_grad)
    }
}

pub fn conv_forward_direct<T: Element>(x: &Tensor<T>, w: &[T], bias: Option<&[T]>, p: &ConvParams, out_shape: TensorShape) -> Tensor<T> {
    let xs = x.shape;
    let (cin, k, s, pad) = (xs.c, p.kernel, p.stride, p.padding);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = Tensor::zeros(out_shape);
    let cout = out_shape.c;
    out.data.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o)| {
        let (n, co) = (plane / cout, plane % cout);
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..cin {
            let inp = &x.data[(n * cin + ci) * xs.plane()..][..xs.plane()];
            let wk = &w[(co * cin + ci) * k * k..][..k * k];
            for dy in 0..k {
                let (ylo, yhi) = tap_range(dy, pad, s, xs.h, oh);
                for dx in 0..k {
                    let (xlo, xhi) = tap_range(dx, pad, s, xs.w, ow);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = wk[dy * k + dx];
                    for oy in ylo..yhi {
                        let irow = &inp[(oy * s + dy - pad) * xs.w..][..xs.w];
                        let orow = &mut o[oy * ow..][..ow];
                        if s == 1 {
                            let ix0 = xlo + dx - pad;
                            for (ov, iv) in orow[xlo..xhi].iter_mut().zip(&irow[ix0..ix0 + (xhi - xlo)]) {
                                *ov += wv * *iv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * s + dx - pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv_backward_direct<T: Element>(
    x: &Tensor<T>,
    w: &[T],
    p: &ConvParams,
    dout: &Tensor<T>,
    want_input_grad: bool,
) -> (Option<Tensor<T>>, Vec<T>, Option<Vec<T>>) {
    let xs = x.shape;
    let os = dout.shape;
    let (cin, cout, k, s, pad) = (xs.c, os.c, p.kernel, p.stride, p.padding);
    let (oh, ow) = (os.h, os.w);

    let mut dw = vec![T::zero(); w.len()];
    dw.par_chunks_mut(cin * k * k).enumerate().for_each(|(co, dwc)| {
        for n in 0..xs.n {
            let g = &dout.data[(n * cout + co) * oh * ow..][..oh * ow];
            for ci in 0..cin {
                let inp = &x.data[(n * cin + ci) * xs.plane()..][..xs.plane()];
                for dy in 0..k {
                    let (ylo, yhi) = tap_range(dy, pad, s, xs.h, oh);
                    for dx in 0..k {
                        let (xlo, xhi) = tap_range(dx, pad, s, xs.w, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let irow = &inp[(oy * s + dy - pad) * xs.w..][..xs.w];
                            let grow = &g[oy * ow..][..ow];
                            if s == 1 {
                                let ix0 = xlo + dx - pad;
                                for (gv, iv) in grow[xlo..xhi].iter().zip(&irow[ix0..ix0 + (xhi - xlo)]) {
                                    acc += *gv * *iv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    acc += grow[ox] * irow[ox * s + dx - pad];
                                }
                            }
                        }
                        dwc[(ci * k + dy) * k + dx] += acc;
                    }
                }
            }
        }
    });

    let db = p.bias.then(|| {
        (0..cout)
            .map(|co| {
                let mut acc = T::zero();
                for n in 0..os.n {
                    for v in &dout.data[(n * cout + co) * oh * ow..][..oh * ow] {
                        acc += *v;
                    }
                }
                acc
            })
            .collect()
    });

    let dx = want_input_grad.then(|| {
        let mut dx = Tensor::zeros(xs);
        dx.data.par_chunks_mut(cin * xs.plane()).enumerate().for_each(|(n, dxn)| {
            for co in 0..cout {
                let g = &dout.data[(n * cout + co) * oh * ow..][..oh * ow];
                for ci in 0..cin {
                    let dplane = &mut dxn[ci * xs.plane()..][..xs.plane()];
                    let wk = &w[(co * cin + ci) * k * k..][..k * k];
                    for dy in 0..k {
                        let (ylo, yhi) = tap_range(dy, pad, s, xs.h, oh);
                        for dx_ in 0..k {
                            let (xlo, xhi) = tap_range(dx_, pad, s, xs.w, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            let wv = wk[dy * k + dx_];
                            for oy in ylo..yhi {
                                let drow = &mut dplane[(oy * s + dy - pad) * xs.w..][..xs.w];
                                let grow = &g[oy * ow..][..ow];
                                if s == 1 {
                                    let ix0 = xlo + dx_ - pad;
                                    for (dv, gv) in drow[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&grow[xlo..xhi]) {
                                        *dv += wv * *gv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        drow[ox * s + dx_ - pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    });
    (dx, dw, db)
}

/// Per-channel statistics used by a batch-norm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over (n, h, w).
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn batch_stats<T: Element>(x: &Tensor<T>) -> BnStats<T> {
    let s = x.shape;
    let m = T::from_f64((s.n * s.plane()) as f64);
    let eps = T::from_f64(BN_EPS);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            for v in &x.data[(n * s.c + c) * s.plane()..][..s.plane()] {
                acc += *v;
            }
        }
        mean[c] = acc / m;
        let mut acc = T::zero();
        for n in 0..s.n {
            for v in &x.data[(n * s.c + c) * s.plane()..][..s.plane()] {
                let d = *v - mean[c];
                acc += d * d;
            }
        }
        var[c] = acc / m;
    }
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    BnStats { mean, var, inv_std }
}

pub fn running_stats<T: Element>(mean: &[T], var: &[T]) -> BnStats<T> {
    let eps = T::from_f64(BN_EPS);
    BnStats { mean: mean.to_vec(), var: var.to_vec(), inv_std: var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect() }
}

pub fn bn_forward<T: Element>(x: &Tensor<T>, stats: &BnStats<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let s = x.shape;
    let mut out = Tensor::zeros(s);
    for (plane, (o, i)) in out.data.chunks_mut(s.plane()).zip(x.data.chunks(s.plane())).enumerate() {
        let c = plane % s.c;
        let (m, inv, g, b) = (stats.mean[c], stats.inv_std[c], gamma[c], beta[c]);
        for (ov, iv) in o.iter_mut().zip(i) {
            *ov = g * ((*iv - m) * inv) + b;
        }
    }
    out
}

/// Returns `(d_input, d_gamma, d_beta)`. With `batch_mode` the statistics are
/// treated as functions of the input.
pub fn bn_backward<T: Element>(x: &Tensor<T>, stats: &BnStats<T>, gamma: &[T], dout: &Tensor<T>, batch_mode: bool) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape;
    let m = T::from_f64((s.n * s.plane()) as f64);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * s.plane();
            for (xv, gv) in x.data[off..off + s.plane()].iter().zip(&dout.data[off..off + s.plane()]) {
                let xhat = (*xv - stats.mean[c]) * stats.inv_std[c];
                dgamma[c] += *gv * xhat;
                dbeta[c] += *gv;
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * s.plane();
            let scale = gamma[c] * stats.inv_std[c];
            for i in off..off + s.plane() {
                let g = dout.data[i];
                dx.data[i] = if batch_mode {
                    let xhat = (x.data[i] - stats.mean[c]) * stats.inv_std[c];
                    scale / m * (m * g - dbeta[c] - xhat * dgamma[c])
                } else {
                    scale * g
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor { shape: x.shape, data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect() }
}

pub fn relu_backward<T: Element>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        data: x.data.iter().zip(&dout.data).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect(),
    }
}

/// Max pooling; padded taps never win. Also returns, per output element, the
/// flat input index of the winning tap (`usize::MAX` for all-padding windows).
pub fn max_pool_forward<T: Element>(x: &Tensor<T>, p: &PoolParams, out_shape: TensorShape) -> (Tensor<T>, Vec<usize>) {
    let xs = x.shape;
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![usize::MAX; out_shape.elems()];
    for plane in 0..xs.n * xs.c {
        let ibase = plane * xs.plane();
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best: Option<(T, usize)> = None;
                for dy in 0..p.kernel {
                    let iy = (oy * p.stride + dy) as isize - p.padding as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for dx in 0..p.kernel {
                        let ix = (ox * p.stride + dx) as isize - p.padding as isize;
                        if ix < 0 || ix >= xs.w as isize {
                            continue;
                        }
                        let idx = ibase + iy as usize * xs.w + ix as usize;
                        let v = x.data[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let o = plane * out_shape.plane() + oy * out_shape.w + ox;
                if let Some((v, idx)) = best {
                    out.data[o] = v;
                    arg[o] = idx;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Element>(in_shape: TensorShape, arg: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for (&idx, &g) in arg.iter().zip(&dout.data) {
        if idx != usize::MAX {
            dx.data[idx] += g;
        }
    }
    dx
}

fn avg_pool_taps(p: &PoolParams, xs: TensorShape, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
    (0..p.kernel).flat_map(move |dy| {
        (0..p.kernel).filter_map(move |dx| {
            let iy = (oy * p.stride + dy) as isize - p.padding as isize;
            let ix = (ox * p.stride + dx) as isize - p.padding as isize;
            (iy >= 0 && iy < xs.h as isize && ix >= 0 && ix < xs.w as isize).then(|| iy as usize * xs.w + ix as usize)
        })
    })
}

/// Average pooling; the divisor is always `kernel²`.
pub fn avg_pool_forward<T: Element>(x: &Tensor<T>, p: &PoolParams, out_shape: TensorShape) -> Tensor<T> {
    let xs = x.shape;
    let div = T::from_f64((p.kernel * p.kernel) as f64);
    let mut out = Tensor::zeros(out_shape);
    for plane in 0..xs.n * xs.c {
        let inp = &x.data[plane * xs.plane()..][..xs.plane()];
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut acc = T::zero();
                for i in avg_pool_taps(p, xs, oy, ox) {
                    acc += inp[i];
                }
                out.data[plane * out_shape.plane() + oy * out_shape.w + ox] = acc / div;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Element>(in_shape: TensorShape, p: &PoolParams, dout: &Tensor<T>) -> Tensor<T> {
    let os = dout.shape;
    let div = T::from_f64((p.kernel * p.kernel) as f64);
    let mut dx = Tensor::zeros(in_shape);
    for plane in 0..in_shape.n * in_shape.c {
        for oy in 0..os.h {
            for ox in 0..os.w {
                let g = dout.data[plane * os.plane() + oy * os.w + ox] / div;
                for i in avg_pool_taps(p, in_shape, oy, ox) {
                    dx.data[plane * in_shape.plane() + i] += g;
                }
            }
        }
    }
    dx
}

/// Stacks inputs along channels in input order.
pub fn concat_forward<T: Element>(xs: &[&Tensor<T>], out_shape: TensorShape) -> Tensor<T> {
    let mut data = Vec::with_capacity(out_shape.elems());
    for n in 0..out_shape.n {
        for x in xs {
            let per = x.shape.c * x.shape.plane();
            data.extend_from_slice(&x.data[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits a concat gradient back into per-source channel ranges.
pub fn concat_backward<T: Element>(shapes: &[TensorShape], dout: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut outs: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor { shape: *s, data: Vec::with_capacity(s.elems()) }).collect();
    let mut pos = 0;
    for _ in 0..dout.shape.n {
        for o in outs.iter_mut() {
            let per = o.shape.c * o.shape.plane();
            o.data.extend_from_slice(&dout.data[pos..pos + per]);
            pos += per;
        }
    }
    outs
}

pub fn add_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    Tensor { shape: a.shape, data: a.data.iter().zip(&b.data).map(|(x, y)| *x + *y).collect() }
}

pub fn gap_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let div = T::from_f64(s.plane() as f64);
    let data = x
        .data
        .chunks(s.plane())
        .map(|plane| {
            let mut acc = T::zero();
            for v in plane {
                acc += *v;
            }
            acc / div
        })
        .collect();
    Tensor::from_vec(TensorShape::new(s.n, s.c, 1, 1), data)
}

pub fn gap_backward<T: Element>(in_shape: TensorShape, dout: &Tensor<T>) -> Tensor<T> {
    let div = T::from_f64(in_shape.plane() as f64);
    let mut data = Vec::with_capacity(in_shape.elems());
    for &g in &dout.data {
        data.extend(std::iter::repeat_n(g / div, in_shape.plane()));
    }
    Tensor::from_vec(in_shape, data)
}

/// `y[n,o] = bias[o] + Σ_i w[o,i] · x[n,i]`, weight laid out `(out, in)`.
pub fn linear_forward<T: Element>(x: &Tensor<T>, w: &[T], bias: Option<&[T]>, out_features: usize) -> Tensor<T> {
    let (n, cin) = (x.shape.n, x.shape.c);
    let mut out = Tensor::zeros(TensorShape::new(n, out_features, 1, 1));
    for b in 0..n {
        let xi = &x.data[b * cin..][..cin];
        for o in 0..out_features {
            let mut acc = bias.map_or(T::zero(), |bs| bs[o]);
            for (wv, xv) in w[o * cin..][..cin].iter().zip(xi) {
                acc += *wv * *xv;
            }
            out.data[b * out_features + o] = acc;
        }
    }
    out
}

pub fn linear_backward<T: Element>(x: &Tensor<T>, w: &[T], dout: &Tensor<T>, has_bias: bool) -> (Tensor<T>, Vec<T>, Option<Vec<T>>) {
    let (n, cin, cout) = (x.shape.n, x.shape.c, dout.shape.c);
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = Tensor::zeros(x.shape);
    for b in 0..n {
        for o in 0..cout {
            let g = dout.data[b * cout + o];
            for i in 0..cin {
                dw[o * cin + i] += g * x.data[b * cin + i];
                dx.data[b * cin + i] += w[o * cin + i] * g;
            }
        }
    }
    let db = has_bias.then(|| {
        (0..cout)
            .map(|o| {
                let mut acc = T::zero();
                for b in 0..n {
                    acc += dout.data[b * cout + o];
                }
                acc
            })
            .collect()
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::rng::SplitMix64;

    fn random(shape: TensorShape, seed: u64) -> Tensor<f64> {
        let mut r = SplitMix64::new(seed);
        Tensor::from_vec(shape, (0..shape.elems()).map(|_| r.normal()).collect())
    }

    /// Per-output-element direct summation in (ci, dy, dx) order.
    fn naive_conv(x: &Tensor<f64>, w: &[f64], bias: Option<&[f64]>, p: &ConvParams, os: TensorShape) -> Tensor<f64> {
        let xs = x.shape;
        let k = p.kernel;
        let mut out = Tensor::zeros(os);
        for n in 0..os.n {
            for co in 0..os.c {
                for y in 0..os.h {
                    for xx in 0..os.w {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..xs.c {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = (y * p.stride + dy) as isize - p.padding as isize;
                                    let ix = (xx * p.stride + dx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * xs.c + ci) * k + dy) * k + dx] * x.at(n, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        let i = out.index(n, co, y, xx);
                        out.data[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_summation_bitwise() {
        let mut r = SplitMix64::new(11);
        for case in 0..24u64 {
            let k = [1, 3, 5][(case % 3) as usize];
            let stride = 1 + (case / 3 % 2) as usize;
            let padding = (case / 6 % 3) as usize;
            let (cin, cout) = (1 + r.below(3) as usize, 1 + r.below(3) as usize);
            let (h, w) = (k + r.below(6) as usize, k + r.below(6) as usize);
            let xs = TensorShape::new(2, cin, h, w);
            let p = ConvParams { kernel: k, stride, padding, out_channels: cout, bias: case % 2 == 0 };
            let os = TensorShape::new(2, cout, (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1);
            let x = random(xs, case);
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|_| r.normal()).collect();
            let b: Vec<f64> = (0..cout).map(|_| r.normal()).collect();
            let bias = p.bias.then_some(b.as_slice());
            let fast = conv_forward(&x, &wt, bias, &p, os);
            let slow = naive_conv(&x, &wt, bias, &p, os);
            assert_eq!(fast.data, slow.data, "case {case}");
        }
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn gemm_path_agrees_with_direct() {
        let mut r = SplitMix64::new(21);
        for case in 0..24u64 {
            let k = [1, 3, 1, 5][(case % 4) as usize];
            let stride = 1 + (case / 4 % 2) as usize;
            let padding = if case % 4 == 2 { 0 } else { (case / 8 % 3) as usize };
            let (cin, cout) = (1 + r.below(4) as usize, 1 + r.below(4) as usize);
            let (h, w) = (k + r.below(6) as usize, k + r.below(6) as usize);
            let xs = TensorShape::new(3, cin, h, w);
            let p = ConvParams { kernel: k, stride, padding, out_channels: cout, bias: case % 2 == 0 };
            let os = TensorShape::new(3, cout, (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1);
            let x = random(xs, case);
            let dout = random(os, case + 100);
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|_| r.normal()).collect();
            let b: Vec<f64> = (0..cout).map(|_| r.normal()).collect();
            let bias = p.bias.then_some(b.as_slice());

            let direct = conv_forward_direct(&x, &wt, bias, &p, os);
            let gemm = gemm_conv::conv_forward(&x, &wt, bias, &p, os);
            assert!(max_abs_diff(&direct.data, &gemm.data) < 1e-12, "case {case}");
            let (dx0, dw0, db0) = conv_backward_direct(&x, &wt, &p, &dout, true);
            let (dx1, dw1, db1) = gemm_conv::conv_backward(&x, &wt, &p, &dout, true);
            assert!(max_abs_diff(&dx0.unwrap().data, &dx1.unwrap().data) < 1e-12, "case {case}");
            assert!(max_abs_diff(&dw0, &dw1) < 1e-12, "case {case}");
            assert_eq!(db0, db1);

            // f32 dispatches to the GEMM path.
            let x32: Tensor<f32> = x.cast();
            let w32: Vec<f32> = wt.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let y32 = conv_forward(&x32, &w32, p.bias.then_some(b32.as_slice()), &p, os);
            assert!(max_abs_diff(&y32.cast::<f64>().data, &direct.data) < 1e-4, "case {case}");
        }
    }

    #[test]
    fn centre_tap_kernel_is_identity() {
        let x = random(TensorShape::new(1, 1, 4, 4), 2);
        let w = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let y = conv_forward(&x, &w, None, &ConvParams::same(3, 1), x.shape);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn identity_1x1_conv() {
        let x = random(TensorShape::new(2, 3, 5, 5), 4);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let y = conv_forward(&x, &w, None, &ConvParams::same(1, 3), x.shape);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn concat_stacks_channels() {
        let s = TensorShape::new(1, 1, 2, 2);
        let a = Tensor::filled(s, 1.0f64);
        let b = Tensor::filled(s, 2.0f64);
        let y = concat_forward(&[&a, &b], TensorShape::new(1, 2, 2, 2));
        assert_eq!(y.data, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let parts = concat_backward(&[s, s], &y);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn tap_ranges() {
        // in 4, k 3, pad 1, stride 1 -> out 4
        assert_eq!(tap_range(0, 1, 1, 4, 4), (1, 4));
        assert_eq!(tap_range(1, 1, 1, 4, 4), (0, 4));
        assert_eq!(tap_range(2, 1, 1, 4, 4), (0, 3));
        // in 5, k 3, pad 1, stride 2 -> out 3
        assert_eq!(tap_range(0, 1, 2, 5, 3), (1, 3));
        assert_eq!(tap_range(2, 1, 2, 5, 3), (0, 2));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(TensorShape::new(1, 1, 2, 2), vec![1.0f64, 4.0, 3.0, 2.0]);
        let p = PoolParams { kernel: 2, stride: 2, padding: 0 };
        let (y, arg) = max_pool_forward(&x, &p, TensorShape::new(1, 1, 1, 1));
        assert_eq!(y.data, vec![4.0]);
        let dx = max_pool_backward(x.shape, &arg, &Tensor::filled(y.shape, 1.0));
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn eval_bn_is_per_channel_affine() {
        let x = random(TensorShape::new(3, 2, 2, 2), 5);
        let stats = running_stats(&[0.5, -0.25], &[2.0, 0.5]);
        let y = bn_forward(&x, &stats, &[1.5, 0.7], &[0.1, -0.2]);
        for n in 0..3 {
            for c in 0..2 {
                let v = x.at(n, c, 1, 0);
                let want = [1.5, 0.7][c] * ((v - stats.mean[c]) * stats.inv_std[c]) + [0.1, -0.2][c];
                assert_eq!(y.at(n, c, 1, 0), want);
            }
        }
    }
}
