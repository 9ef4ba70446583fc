use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::graph::TensorShape;

/// Storage dtype tag; the value is the weights-file dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Element: Float + Default + Debug + Send + Sync + Sum + AddAssign + 'static {
    const DTYPE: DType;
    /// Convolutions run through im2col + GEMM instead of the direct loops.
    const GEMM_CONV: bool;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
    /// `C ← A·B + beta·C` for an `m×k` A and `k×n` B given as
    /// `(slice, row stride, column stride)`; C is row-major `m×n`.
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self]);
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: (&[T], isize, isize), b: (&[T], isize, isize), c: &[T]) {
    let span = |len: usize, rows: usize, cols: usize, rs: isize, cs: isize| {
        rows == 0 || cols == 0 || (rs >= 0 && cs >= 0 && (rows - 1) * rs as usize + (cols - 1) * (cs as usize) < len)
    };
    assert!(span(a.0.len(), m, k, a.1, a.2) && span(b.0.len(), k, n, b.1, b.2) && c.len() >= m * n, "gemm operands out of bounds");
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const GEMM_CONV: bool = true;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, a, b, c);
        // SAFETY: every operand index lies within its slice, checked above.
        unsafe { matrixmultiply::sgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), n as isize, 1) }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const GEMM_CONV: bool = false;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, a, b, c);
        // SAFETY: every operand index lies within its slice, checked above.
        unsafe { matrixmultiply::dgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), n as isize, 1) }
    }
}

/// Dense activation tensor, row-major in (n, c, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: TensorShape,
    pub data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: TensorShape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.elems()] }
    }

    pub fn filled(shape: TensorShape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.elems()] }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.elems(), "tensor data length must match shape {shape}");
        Tensor { shape, data }
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    /// Samples `range` of the batch dimension.
    pub fn batch_slice(&self, range: std::ops::Range<usize>) -> Tensor<T> {
        let per = self.shape.c * self.shape.plane();
        let shape = TensorShape { n: range.len(), ..self.shape };
        Tensor { shape, data: self.data[range.start * per..range.end * per].to_vec() }
    }

    /// Gathers the given samples into a new batch.
    pub fn gather(&self, samples: &[usize]) -> Tensor<T> {
        let per = self.shape.c * self.shape.plane();
        let mut data = Vec::with_capacity(samples.len() * per);
        for &i in samples {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor { shape: TensorShape { n: samples.len(), ..self.shape }, data }
    }
}

/// A parameter or buffer tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Element> Param<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Param { dims: dims.to_vec(), data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        Param { dims: dims.to_vec(), data: vec![v; dims.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub const WEIGHT: &str = "weight";
pub const BIAS: &str = "bias";
pub const BN_GAMMA: &str = "bn_gamma";
pub const BN_BETA: &str = "bn_beta";
pub const BN_MEAN: &str = "bn_mean";
pub const BN_VAR: &str = "bn_var";

/// Fields updated by gradient descent; `bn_mean`/`bn_var` are running buffers.
pub fn is_trainable(field: &str) -> bool {
    matches!(field, WEIGHT | BIAS | BN_GAMMA | BN_BETA)
}

/// Node name → field name → tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, BTreeMap<String, Param<T>>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, node: &str, field: &str, p: Param<T>) {
        self.entries.entry(node.to_string()).or_default().insert(field.to_string(), p);
    }

    pub fn get(&self, node: &str, field: &str) -> Option<&Param<T>> {
        self.entries.get(node)?.get(field)
    }

    pub fn get_mut(&mut self, node: &str, field: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(node)?.get_mut(field)
    }

    pub fn node(&self, node: &str) -> Option<&BTreeMap<String, Param<T>>> {
        self.entries.get(node)
    }

    /// `(node, field, tensor)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Param<T>)> {
        self.entries
            .iter()
            .flat_map(|(n, fields)| fields.iter().map(move |(f, p)| (n.as_str(), f.as_str(), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &str, &mut Param<T>)> {
        self.entries
            .iter_mut()
            .flat_map(|(n, fields)| fields.iter_mut().map(move |(f, p)| (n.as_str(), f.as_str(), p)))
    }

    pub fn tensor_count(&self) -> usize {
        self.iter().count()
    }

    /// Scalar count over trainable fields.
    pub fn num_params(&self) -> usize {
        self.iter().filter(|(_, f, _)| is_trainable(f)).map(|(_, _, p)| p.len()).sum()
    }

    /// Zero tensors for every trainable field.
    pub fn zeros_like_trainable(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, f, p) in self.iter().filter(|(_, f, _)| is_trainable(f)) {
            out.insert(n, f, Param::zeros(&p.dims));
        }
        out
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, f, p) in self.iter() {
            out.insert(n, f, Param { dims: p.dims.clone(), data: p.data.iter().map(|v| U::from_f64(v.as_f64())).collect() });
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, _, p)| p.data.iter().all(|v| v.is_finite()))
    }
}
