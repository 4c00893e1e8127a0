//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built on.
//!
//! A [`Tensor`] carries a runtime [`DType`]; every kernel is written once,
//! generically over [`Element`], and dispatched on the storage variant.
//! Accumulation order inside each kernel is fixed, so results are
//! bit-reproducible for a given dtype.

mod conv;
mod kernels;
mod permute;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{conv2d_backward, conv_output_extent, Conv2dGrads};
pub(crate) use conv::conv2d_grads;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + AddAssign + MulAssign + Sum + Default + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: DType;
    fn wrap(data: Vec<Self>) -> Storage;
    fn slice(storage: &Storage) -> Option<&[Self]>;
    fn slice_mut(storage: &mut Storage) -> Option<&mut [Self]>;
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn wrap(data: Vec<Self>) -> Storage {
        Storage::F32(data)
    }
    fn slice(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }
    fn slice_mut(storage: &mut Storage) -> Option<&mut [Self]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn wrap(data: Vec<Self>) -> Storage {
        Storage::F64(data)
    }
    fn slice(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
    fn slice_mut(storage: &mut Storage) -> Option<&mut [Self]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs `$body` with `$s` bound to the typed slice of `$t`, re-wrapping
/// nothing. `$T` names the element type inside the body.
macro_rules! dispatch {
    ($t:expr, |$s:ident: $T:ident| $body:expr) => {
        match $t.storage() {
            $crate::tensor::Storage::F32($s) => {
                #[allow(dead_code)]
                type $T = f32;
                $body
            }
            $crate::tensor::Storage::F64($s) => {
                #[allow(dead_code)]
                type $T = f64;
                $body
            }
        }
    };
}
pub(crate) use dispatch;

/// Like [`dispatch!`] for two same-dtype tensors; yields `Err(DType)` on
/// mismatch.
macro_rules! dispatch2 {
    ($op:expr, $a:expr, $b:expr, |$x:ident, $y:ident: $T:ident| $body:expr) => {
        match ($a.storage(), $b.storage()) {
            ($crate::tensor::Storage::F32($x), $crate::tensor::Storage::F32($y)) => {
                #[allow(dead_code)]
                type $T = f32;
                Ok($body)
            }
            ($crate::tensor::Storage::F64($x), $crate::tensor::Storage::F64($y)) => {
                #[allow(dead_code)]
                type $T = f64;
                Ok($body)
            }
            _ => Err($crate::error::Error::DType {
                op: $op,
                lhs: $a.dtype(),
                rhs: $b.dtype(),
            }),
        }
    };
}
pub(crate) use dispatch2;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype())
            .finish_non_exhaustive()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor rank must be at least 1".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "extent of axis {axis} is zero in {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor from external data, rejecting non-finite scalars.
    pub fn new(shape: &[usize], data: Storage) -> Result<Self> {
        let t = Self::from_storage(shape, data)?;
        if let Some(index) = t.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        Ok(t)
    }

    pub fn from_vec<T: Element>(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(shape, T::wrap(data))
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::from_vec(shape, data)
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::from_vec(shape, data)
    }

    /// Shape-checked construction without the finiteness scan; used for
    /// kernel outputs whose inputs were already validated.
    pub(crate) fn from_storage(shape: &[usize], data: Storage) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} scalars, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts<T: Element>(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data: T::wrap(data),
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Self> {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Result<Self> {
        Self::full(shape, 1.0, dtype)
    }

    pub fn zeros_like(&self) -> Self {
        Self::full(&self.shape, 0.0, self.dtype()).expect("shape already valid")
    }

    pub fn eye(n: usize, dtype: DType) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_f64(&[n, n], data).map(|t| t.cast(dtype))
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], dtype: DType, f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_shape(shape)?;
        let data: Vec<f64> = (0..n).map(f).collect();
        Tensor::from_f64(shape, data).map(|t| t.cast(dtype))
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

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn as_slice<T: Element>(&self) -> Option<&[T]> {
        T::slice(&self.data)
    }

    pub(crate) fn as_mut_slice<T: Element>(&mut self) -> Option<&mut [T]> {
        T::slice_mut(&mut self.data)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn get(&self, index: usize) -> f64 {
        match &self.data {
            Storage::F32(v) => v[index] as f64,
            Storage::F64(v) => v[index],
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        dispatch!(self, |s: T| s.iter().position(|x| !x.is_finite()))
    }

    pub fn all_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let data = match (&self.data, dtype) {
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
            _ => unreachable!(),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().reshape(shape)
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f32op: impl Fn(f32, f32) -> f32,
        f64op: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                Storage::F32(a.iter().zip(b).map(|(&x, &y)| f32op(x, y)).collect())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                Storage::F64(a.iter().zip(b).map(|(&x, &y)| f64op(x, y)).collect())
            }
            _ => {
                return Err(Error::DType {
                    op,
                    lhs: self.dtype(),
                    rhs: other.dtype(),
                })
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |x, y| x * y, |x, y| x * y)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |x, y| x + y, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |x, y| x - y, |x, y| x - y)
    }

    /// `self += alpha * other`, in place.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        let (lhs, rhs) = (self.dtype(), other.dtype());
        match (&mut self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                let alpha = alpha as f32;
                a.iter_mut().zip(b).for_each(|(x, &y)| *x += alpha * y);
            }
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter_mut().zip(b).for_each(|(x, &y)| *x += alpha * y);
            }
            _ => return Err(Error::DType { op: "axpy", lhs, rhs }),
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| x * alpha)
    }

    /// Applies `f` elementwise, computing in f64 and rounding back to the
    /// tensor's dtype. Meant for cold paths (init, metrics).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(v.iter().map(|&x| f(x as f64) as f32).collect()),
            Storage::F64(v) => Storage::F64(v.iter().map(|&x| f(x)).collect()),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Sum of all elements, accumulated left to right in the tensor's dtype.
    pub fn sum(&self) -> f64 {
        dispatch!(self, |s: T| s.iter().fold(T::zero(), |acc, &x| acc + x).f64())
    }

    pub fn sum_squares(&self) -> f64 {
        dispatch!(self, |s: T| s
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .f64())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.to_f64_vec().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; both tensors are compared in
    /// f64.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        Ok(a.iter().zip(&b).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
    }

    /// Frobenius norm of the difference relative to the Frobenius norm of
    /// `reference` (absolute when the reference is zero).
    pub fn rel_frobenius_diff(&self, reference: &Tensor) -> Result<f64> {
        self.same_shape(reference, "rel_frobenius_diff")?;
        let a = self.to_f64_vec();
        let b = reference.to_f64_vec();
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        Ok(if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        })
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Matrix product `self · rhs` of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let (m, p, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        dispatch2!("matmul", self, rhs, |a, b: T| {
            let mut c = vec![T::zero(); m * n];
            kernels::gemm(a, b, &mut c, m, p, n);
            Tensor::from_parts(&[m, n], c)
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(dispatch!(self, |s: T| Tensor::from_parts(
            &[c, r],
            kernels::transpose(s, r, c)
        )))
    }

    /// Multiplies column `j` of a matrix by `diag[j]`.
    pub fn scale_columns(&self, diag: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || diag.rank() != 1 || diag.len() != self.shape[1] {
            return Err(Error::dim("scale_columns", &self.shape, diag.shape()));
        }
        let cols = self.shape[1];
        dispatch2!("scale_columns", self, diag, |a, d: T| {
            let mut out = a.to_vec();
            for row in out.chunks_exact_mut(cols) {
                row.iter_mut().zip(d.iter()).for_each(|(x, &s)| *x *= s);
            }
            Tensor::from_parts(&self.shape, out)
        })
    }

    /// Multiplies row `i` of a matrix by `diag[i]`.
    pub fn scale_rows(&self, diag: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || diag.rank() != 1 || diag.len() != self.shape[0] {
            return Err(Error::dim("scale_rows", &self.shape, diag.shape()));
        }
        let cols = self.shape[1];
        dispatch2!("scale_rows", self, diag, |a, d: T| {
            let mut out = a.to_vec();
            for (row, &s) in out.chunks_exact_mut(cols).zip(d.iter()) {
                row.iter_mut().for_each(|x| *x *= s);
            }
            Tensor::from_parts(&self.shape, out)
        })
    }

    /// Main diagonal of `self · rhs` for `self` m×p and `rhs` p×m, without
    /// forming the full product.
    pub fn diag_of_product(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2
            || rhs.rank() != 2
            || self.shape[1] != rhs.shape[0]
            || self.shape[0] != rhs.shape[1]
        {
            return Err(Error::dim("diag_of_product", &self.shape, &rhs.shape));
        }
        let (m, p) = (self.shape[0], self.shape[1]);
        dispatch2!("diag_of_product", self, rhs, |a, b: T| {
            let out: Vec<T> = (0..m)
                .map(|i| {
                    let mut acc = T::zero();
                    for k in 0..p {
                        acc += a[i * p + k] * b[k * m + i];
                    }
                    acc
                })
                .collect();
            Tensor::from_parts(&[m], out)
        })
    }

    /// Sums a tensor over every axis except `axis`, returning a vector of
    /// length `shape[axis]`.
    pub fn sum_except_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Argument(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        Ok(dispatch!(self, |s: T| {
            let mut out = vec![T::zero(); extent];
            for o in 0..outer {
                for (c, acc) in out.iter_mut().enumerate() {
                    let base = (o * extent + c) * inner;
                    for &x in &s[base..base + inner] {
                        *acc += x;
                    }
                }
            }
            Tensor::from_parts(&[extent], out)
        }))
    }

    /// Splits along axis 0 into `shape[0]` tensors of the remaining shape.
    pub fn unstack(&self) -> Vec<Tensor> {
        let inner_shape: Vec<usize> = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        let inner: usize = inner_shape.iter().product();
        dispatch!(self, |s: T| s
            .chunks_exact(inner)
            .map(|c| Tensor::from_parts(&inner_shape, c.to_vec()))
            .collect())
    }

    /// Gathers the listed slices along axis 0, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Argument(format!("index {bad} out of range for axis of extent {n}")));
        }
        if indices.is_empty() {
            return Err(Error::Argument("cannot select zero slices".into()));
        }
        let inner = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(dispatch!(self, |s: T| {
            let mut out = Vec::with_capacity(inner * indices.len());
            for &i in indices {
                out.extend_from_slice(&s[i * inner..(i + 1) * inner]);
            }
            Tensor::from_parts(&shape, out)
        }))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack an empty list".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        for t in items {
            first.same_shape(t, "stack")?;
            if t.dtype() != first.dtype() {
                return Err(Error::DType {
                    op: "stack",
                    lhs: first.dtype(),
                    rhs: t.dtype(),
                });
            }
        }
        Ok(match first.storage() {
            Storage::F32(_) => {
                let mut data = Vec::with_capacity(first.len() * items.len());
                for t in items {
                    data.extend_from_slice(t.as_slice::<f32>().unwrap());
                }
                Tensor::from_parts(&shape, data)
            }
            Storage::F64(_) => {
                let mut data = Vec::with_capacity(first.len() * items.len());
                for t in items {
                    data.extend_from_slice(t.as_slice::<f64>().unwrap());
                }
                Tensor::from_parts(&shape, data)
            }
        })
    }

    /// Reorders axes, materialising the result. `order[i]` names the source
    /// axis that becomes output axis `i`.
    pub fn permute_axes(&self, order: &[usize]) -> Result<Tensor> {
        permute::permute_axes(self, order)
    }

    /// 2-D cross-correlation with zero padding. `self` is b×c_i×H×W, `weight`
    /// is c_o×c_i×k×k.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if weight.rank() == 4 && weight.shape()[2] != weight.shape()[3] {
            return Err(Error::Shape(format!(
                "conv2d expects a square kernel, got {:?}",
                weight.shape()
            )));
        }
        conv::conv2d(self, weight, (stride, stride), (padding, padding))
    }

    /// Convolution with a possibly rectangular kernel and per-axis
    /// (row, column) stride and padding.
    pub fn conv2d_rect(
        &self,
        weight: &Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor> {
        conv::conv2d(self, weight, stride, padding)
    }
}

pub use permute::invert_permutation;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape_and_finiteness() {
        assert!(Tensor::from_f32(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_f32(&[0, 2], vec![]).is_err());
        assert!(Tensor::from_f32(&[], vec![]).is_err());
        assert!(matches!(
            Tensor::from_f64(&[2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor::from_f64(&[1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = Tensor::eye(2, DType::F32).unwrap();
        let a = Tensor::from_f32(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert!(i2.matmul(&a).unwrap().bitwise_eq(&a));

        let r = Tensor::from_f32(&[1, 2], vec![1., 2.]).unwrap();
        let c = Tensor::from_f32(&[2, 1], vec![3., 4.]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().to_f64_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_errors() {
        let a = Tensor::zeros(&[2, 3], DType::F32).unwrap();
        let b = Tensor::zeros(&[2, 3], DType::F32).unwrap();
        match a.matmul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        let c = Tensor::zeros(&[3, 2], DType::F64).unwrap();
        assert!(matches!(a.matmul(&c), Err(Error::DType { .. })));
    }

    #[test]
    fn hadamard_cases() {
        let a = Tensor::from_f64(&[2], vec![2., 3.]).unwrap();
        let b = Tensor::from_f64(&[2], vec![5., 7.]).unwrap();
        assert_eq!(a.hadamard(&b).unwrap().to_f64_vec(), vec![10., 21.]);
        assert!(a.hadamard(&b).unwrap().bitwise_eq(&b.hadamard(&a).unwrap()));
        let ones = Tensor::ones(&[2], DType::F64).unwrap();
        assert!(a.hadamard(&ones).unwrap().bitwise_eq(&a));
        let c = Tensor::ones(&[3], DType::F64).unwrap();
        assert!(matches!(a.hadamard(&c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn diag_of_product_matches_full_product() {
        let a = Tensor::from_f64(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_f64(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let full = a.matmul(&b).unwrap().to_f64_vec();
        assert_eq!(
            a.diag_of_product(&b).unwrap().to_f64_vec(),
            vec![full[0], full[3]]
        );
    }

    #[test]
    fn sum_except_axis_reduces_channels() {
        let t = Tensor::from_f64(&[2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        assert_eq!(t.sum_except_axis(1).unwrap().to_f64_vec(), vec![14., 22.]);
    }

    #[test]
    fn stack_unstack_inverse() {
        let t = Tensor::from_f32(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let parts = t.unstack();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert!(Tensor::stack(&refs).unwrap().bitwise_eq(&t));
    }
}
