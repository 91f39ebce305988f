//! Dense row-major tensors.
//!
//! [`Tensor`] is the numeric carrier for every other module: feature maps,
//! im2col matrices, weights, offsets. It is deliberately small. There is no
//! broadcasting and no autodiff; backward passes are written per operator.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Element type tag, matching the dtype byte of the RTEN file format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

/// Floating point element types a [`Tensor`] can hold.
pub trait Scalar:
    Float + AddAssign + MulAssign + Default + Debug + Send + Sync + Sum + 'static
{
    const DTYPE: DType;
    const BYTES: usize;
    /// `"f32"` or `"f64"`.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Pointwise operations accepted by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp<T> {
    Relu,
    Add,
    Scale(T),
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor by evaluating `f` at every coordinate in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let len: usize = shape.iter().product();
        let mut coords = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&coords));
            for axis in (0..shape.len()).rev() {
                coords[axis] += 1;
                if coords[axis] < shape[axis] {
                    break;
                }
                coords[axis] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |c| if c[0] == c[1] { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major strides: `strides[k] = prod(shape[k+1..])`.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    pub fn linear_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.shape.len() {
            return Err(shape_err!(
                "coordinate of rank {} for tensor of rank {}",
                coords.len(),
                self.shape.len()
            ));
        }
        let mut index = 0;
        for (axis, (&c, &extent)) in coords.iter().zip(&self.shape).enumerate() {
            if c >= extent {
                return Err(shape_err!(
                    "coordinate {c} out of range on axis {axis} (extent {extent})"
                ));
            }
            index = index * extent + c;
        }
        Ok(index)
    }

    pub fn coords(&self, mut linear: usize) -> Result<Vec<usize>> {
        if linear >= self.data.len() {
            return Err(shape_err!(
                "linear index {linear} out of range for {} elements",
                self.data.len()
            ));
        }
        let mut coords = vec![0usize; self.shape.len()];
        for axis in (0..self.shape.len()).rev() {
            coords[axis] = linear % self.shape[axis];
            linear /= self.shape[axis];
        }
        Ok(coords)
    }

    pub fn get(&self, coords: &[usize]) -> Result<T> {
        Ok(self.data[self.linear_index(coords)?])
    }

    pub fn set(&mut self, coords: &[usize], value: T) -> Result<()> {
        let i = self.linear_index(coords)?;
        self.data[i] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Self::from_vec(&[cols, rows], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            )),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(shape_err!(
                "expected a 3-D tensor, got shape {:?}",
                self.shape
            )),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn exp(&self) -> Self {
        self.map(T::exp)
    }

    pub fn ln(&self) -> Result<Self> {
        if let Some(bad) = self.data.iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad:?}")));
        }
        Ok(self.map(T::ln))
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reduces over one axis, or over every element when `axis` is `None`
    /// (yielding a rank-0 tensor).
    pub fn reduce(&self, mode: Reduction, axis: Option<usize>) -> Result<Self> {
        let Some(axis) = axis else {
            let v = reduce_slice(mode, self.data.iter().copied(), self.data.len())?;
            return Ok(Self::scalar(v));
        };
        if axis >= self.rank() {
            return Err(shape_err!(
                "axis {axis} out of range for rank {}",
                self.rank()
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let values = (0..extent).map(|k| self.data[base + k * inner]);
                out.push(reduce_slice(mode, values, extent)?);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Self::from_vec(&shape, out)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

fn reduce_slice<T: Scalar>(
    mode: Reduction,
    values: impl Iterator<Item = T>,
    n: usize,
) -> Result<T> {
    match mode {
        Reduction::Sum => Ok(values.fold(T::zero(), |acc, v| acc + v)),
        Reduction::Mean => {
            if n == 0 {
                return Err(Error::Domain("mean over an empty selection".into()));
            }
            Ok(values.fold(T::zero(), |acc, v| acc + v) / T::from_f64(n as f64))
        }
        Reduction::Max => {
            if n == 0 {
                return Err(Error::Domain("max over an empty selection".into()));
            }
            Ok(values.fold(T::neg_infinity(), T::max))
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Applies a tagged pointwise op. `Add` takes two operands, the rest one.
pub fn elementwise<T: Scalar>(op: ElementwiseOp<T>, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let arity = if op == ElementwiseOp::Add { 2 } else { 1 };
    if operands.len() != arity {
        return Err(shape_err!(
            "{op:?} takes {arity} operand(s), got {}",
            operands.len()
        ));
    }
    let x = operands[0];
    match op {
        ElementwiseOp::Relu => Ok(x.relu()),
        ElementwiseOp::Add => x.add(operands[1]),
        ElementwiseOp::Scale(k) => Ok(x.scale(k)),
        ElementwiseOp::Sigmoid => Ok(x.sigmoid()),
        ElementwiseOp::Exp => Ok(x.exp()),
        ElementwiseOp::Log => x.ln(),
    }
}

const K_BLOCK: usize = 256;

/// `C = A·B` for 2-D tensors.
pub fn gemm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "gemm inner dimensions disagree: {m}x{k} · {k2}x{n}"
        ));
    }
    let mut c = vec![T::zero(); m * n];
    gemm_accumulate(m, k, n, a.data(), b.data(), &mut c);
    Tensor::from_vec(&[m, n], c)
}

/// `c += a·b` on raw row-major slices. Every output cell accumulates its
/// products in ascending `k` order, so results are bit-identical to a naive
/// triple loop regardless of blocking.
pub(crate) fn gemm_accumulate<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for k0 in (0..k).step_by(K_BLOCK) {
        let k1 = (k0 + K_BLOCK).min(k);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n..(i + 1) * n];
            for kk in k0..k1 {
                let aik = a_row[kk];
                let b_row = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aik * bv;
                }
            }
        }
    }
}

/// `A·Bᵀ` without materializing the transpose.
pub fn gemm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "gemm_nt inner dimensions disagree: {m}x{k} · ({n}x{k2})ᵀ"
        ));
    }
    let (a, b) = (a.data(), b.data());
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c.push(acc);
        }
    }
    Tensor::from_vec(&[m, n], c)
}

/// `Aᵀ·B` without materializing the transpose.
pub fn gemm_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "gemm_tn inner dimensions disagree: ({k}x{m})ᵀ · {k2}x{n}"
        ));
    }
    let (a, b) = (a.data(), b.data());
    let mut c = vec![T::zero(); m * n];
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], c)
}
