//! Dense rank-N tensors in row-major order.
//!
//! Feature maps use the canonical N,C,H,W layout. Tensors are immutable after
//! construction and cheap to clone (the buffer is behind an `Arc`). Binary
//! elementwise operations require identical shapes; the only broadcasting
//! anywhere is scalar-with-tensor.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// Scalar element type: f32 for runtime, f64 for gradient checks.
pub trait Element:
    Float + Copy + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

pub fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::SizeOverflow(shape.to_vec()))
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Ok(Self { shape, data: Arc::new(vec![value; n]) })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: Arc::new(vec![value]) }
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Extent of axis `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise operands {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
            ),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a / b)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(|x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map(|x| x.exp())
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map(|x| x.ln())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map(|x| -x)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|x| x * s)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.map(|x| x + s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]` with a fixed ascending-k
    /// summation order per output element, so results are bit-reproducible.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![T::zero(); m * n];
        par::for_each_chunk_mut(&mut out, n.max(1), |i, row| {
            if n == 0 || i >= m {
                return;
            }
            for kk in 0..k {
                let av = a[i * k + kk];
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        });
        Tensor::new(vec![m, n], out)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n = checked_numel(&shape)?;
        if n != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Materializes a contiguous copy with axes reordered: output axis `i`
    /// is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let r = self.rank();
        if axes.len() != r || {
            let mut seen = vec![false; r];
            axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        } {
            return Err(Error::InvalidArgument(format!(
                "permutation {:?} invalid for rank {}",
                axes, r
            )));
        }
        let in_strides = row_major_strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        if r == 0 || n == 0 {
            out.extend_from_slice(&self.data);
            return Tensor::new(out_shape, out);
        }
        // Walk the output in order, tracking the source offset incrementally
        // (odometer over the outer axes; the innermost axis is a tight loop,
        // a bulk copy when it is contiguous in the source).
        let inner = out_shape[r - 1];
        let inner_stride = strides[r - 1];
        let mut idx = vec![0usize; r.saturating_sub(1)];
        let mut src = 0usize;
        loop {
            if inner_stride == 1 {
                out.extend_from_slice(&self.data[src..src + inner]);
            } else {
                let mut s = src;
                for _ in 0..inner {
                    out.push(self.data[s]);
                    s += inner_stride;
                }
            }
            let mut d = r - 1;
            loop {
                if d == 0 {
                    return Tensor::new(out_shape, out);
                }
                d -= 1;
                idx[d] += 1;
                src += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                src -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = parts[0];
        let r = first.rank();
        if axis >= r {
            return Err(Error::InvalidArgument(format!("concat axis {} out of range", axis)));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != r
                || (0..r).any(|d| d != axis && p.shape[d] != first.shape[d])
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat operands {:?} vs {:?} along axis {}",
                    first.shape, p.shape, axis
                )));
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(checked_numel(&out_shape)?);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Tensor::new(out_shape, out)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let r = self.rank();
        if axis >= r || start + len > self.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice axis {} range {}..{} of {:?}",
                axis,
                start,
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        let axis_extent = self.shape[axis];
        for o in 0..outer {
            let base = (o * axis_extent + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, out)
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}
