//! im2col + GEMM convolution. Same maths as the direct loops in `ops`, with a
//! different summation order, so results agree to rounding only.

use rayon::prelude::*;

use super::ops::tap_range;
use super::tensor::{Element, Tensor};
use crate::graph::{ConvParams, TensorShape};

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(xs: TensorShape, p: &ConvParams, os: TensorShape) -> Self {
        Geometry { cin: xs.c, h: xs.h, w: xs.w, k: p.kernel, s: p.stride, pad: p.padding, oh: os.h, ow: os.w }
    }

    /// A 1×1, stride-1, unpadded conv reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(row, dst_offset, src_offset, len, step)` for each run of
    /// in-bounds taps: output positions `dst_offset + j` within matrix row
    /// `row` read input pixel `src_offset + j·step` of channel `ci`.
    fn runs(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let plane = self.h * self.w;
        for ci in 0..self.cin {
            for dy in 0..self.k {
                let (ylo, yhi) = tap_range(dy, self.pad, self.s, self.h, self.oh);
                for dx in 0..self.k {
                    let (xlo, xhi) = tap_range(dx, self.pad, self.s, self.w, self.ow);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = (ci * self.k + dy) * self.k + dx;
                    for oy in ylo..yhi {
                        let src = ci * plane + (oy * self.s + dy - self.pad) * self.w + xlo * self.s + dx - self.pad;
                        f(row, oy * self.ow + xlo, src, xhi - xlo, self.s);
                    }
                }
            }
        }
    }

    /// `(cin·k·k) × (oh·ow)` matrix of input taps, zero where padded.
    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let n = self.cols();
        let mut out = vec![T::zero(); self.rows() * n];
        self.runs(|row, dst, src, len, step| {
            let d = &mut out[row * n + dst..][..len];
            if step == 1 {
                d.copy_from_slice(&x[src..src + len]);
            } else {
                for (j, v) in d.iter_mut().enumerate() {
                    *v = x[src + j * step];
                }
            }
        });
        out
    }

    fn col2im<T: Element>(&self, cols: &[T], dx_out: &mut [T]) {
        let n = self.cols();
        self.runs(|row, dst, src, len, step| {
            let c = &cols[row * n + dst..][..len];
            if step == 1 {
                for (d, v) in dx_out[src..src + len].iter_mut().zip(c) {
                    *d += *v;
                }
            } else {
                for (j, v) in c.iter().enumerate() {
                    dx_out[src + j * step] += *v;
                }
            }
        });
    }
}

pub fn conv_forward<T: Element>(x: &Tensor<T>, w: &[T], bias: Option<&[T]>, p: &ConvParams, out_shape: TensorShape) -> Tensor<T> {
    let g = Geometry::new(x.shape, p, out_shape);
    let cout = out_shape.c;
    let in_len = x.shape.c * x.shape.plane();
    let mut out = Tensor::zeros(out_shape);
    out.data.par_chunks_mut(cout * g.cols()).enumerate().for_each(|(n, o)| {
        let xn = &x.data[n * in_len..][..in_len];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            owned = g.im2col(xn);
            &owned
        };
        let (k, m) = (g.rows(), g.cols());
        T::gemm(cout, k, m, (w, k as isize, 1), (cols, m as isize, 1), T::zero(), o);
        if let Some(b) = bias {
            for (co, plane) in o.chunks_mut(m).enumerate() {
                for v in plane {
                    *v += b[co];
                }
            }
        }
    });
    out
}

/// Returns `(d_input, d_weight, d_bias)` like the direct version.
pub fn conv_backward<T: Element>(
    x: &Tensor<T>,
    w: &[T],
    p: &ConvParams,
    dout: &Tensor<T>,
    want_input_grad: bool,
) -> (Option<Tensor<T>>, Vec<T>, Option<Vec<T>>) {
    let g = Geometry::new(x.shape, p, dout.shape);
    let cout = dout.shape.c;
    let (k, m) = (g.rows(), g.cols());
    let in_len = x.shape.c * x.shape.plane();
    let out_len = cout * m;

    // Weight gradient accumulated sample by sample in a fixed order.
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..x.shape.n {
        let xn = &x.data[n * in_len..][..in_len];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            owned = g.im2col(xn);
            &owned
        };
        let gn = &dout.data[n * out_len..][..out_len];
        // (cout × m) · (m × k): B is cols viewed transposed.
        T::gemm(cout, m, k, (gn, m as isize, 1), (cols, 1, m as isize), T::one(), &mut dw);
    }

    let db = p.bias.then(|| {
        (0..cout)
            .map(|co| {
                let mut acc = T::zero();
                for n in 0..dout.shape.n {
                    for v in &dout.data[n * out_len + co * m..][..m] {
                        acc += *v;
                    }
                }
                acc
            })
            .collect()
    });

    let dx = want_input_grad.then(|| {
        let mut dx = Tensor::zeros(x.shape);
        dx.data.par_chunks_mut(in_len).enumerate().for_each(|(n, dxn)| {
            let gn = &dout.data[n * out_len..][..out_len];
            // (k × cout) · (cout × m): A is the weight viewed transposed.
            let wt = (w, 1, k as isize);
            if g.is_pointwise() {
                T::gemm(k, cout, m, wt, (gn, m as isize, 1), T::zero(), dxn);
            } else {
                let mut cols = vec![T::zero(); k * m];
                T::gemm(k, cout, m, wt, (gn, m as isize, 1), T::zero(), &mut cols);
                g.col2im(&cols, dxn);
            }
        });
        dx
    });
    (dx, dw, db)
}
