//! Dense row-major tensors and the scalar kernels shared by the tape and
//! the plain-vector attention functions.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense tensor. Storage is reference counted so parameters can be
/// placed on a tape without copying; mutation goes through copy-on-write.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: Arc::new(vec![v]),
        }
    }

    /// A `1 × n` row vector.
    pub fn row(values: Vec<T>) -> Self {
        let n = values.len();
        assert!(n > 0, "row vector must be non-empty");
        Tensor {
            shape: vec![1, n],
            data: Arc::new(values),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as a matrix: rank 0 is 1×1, rank 1 is a row, rank 2 as is.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[..self.shape.len() - 1].iter().product(), *self.shape.last().unwrap()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor {
            shape: vec![c, r],
            data: Arc::new(out),
        }
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.len(), other.len());
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}

/// Numerically stable kernels. Every softmax and logsumexp in the crate goes
/// through these, so two code paths that feed them identical inputs produce
/// bit-identical outputs.
pub mod kernels {
    use super::Scalar;

    pub fn max<T: Scalar>(xs: &[T]) -> T {
        xs.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
        let m = max(xs);
        if m == T::neg_infinity() {
            return m;
        }
        let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
        m + s.ln()
    }

    pub fn softmax_into<T: Scalar>(xs: &[T], out: &mut [T]) {
        let m = max(xs);
        let mut s = T::zero();
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = (x - m).exp();
            s = s + *o;
        }
        for o in out.iter_mut() {
            *o = *o / s;
        }
    }

    pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); xs.len()];
        softmax_into(xs, &mut out);
        out
    }

    pub fn log_softmax_into<T: Scalar>(xs: &[T], out: &mut [T]) {
        let lse = logsumexp(xs);
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = x - lse;
        }
    }

    pub fn log_softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); xs.len()];
        log_softmax_into(xs, &mut out);
        out
    }

    /// `ln(e^a + e^b)` without overflow.
    pub fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
        logsumexp(&[a, b])
    }

    /// Index of the largest value; ties go to the lowest index.
    pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
        let mut best = 0;
        for (i, &x) in xs.iter().enumerate().skip(1) {
            if x > xs[best] {
                best = i;
            }
        }
        best
    }

    /// `a (m×k) · b (k×n)` into `out (m×n)`, overwriting.
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for o in out.iter_mut() {
            *o = T::zero();
        }
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }

    /// `a (m×k) · bᵀ` where `b` is `n×k`.
    pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    s = s + x * y;
                }
                out[i * n + j] = s;
            }
        }
    }

    /// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
    pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
        for o in out.iter_mut() {
            *o = T::zero();
        }
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = kernels::softmax(&[0.0f64, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let v = kernels::logsumexp(&[1000.0f64, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = kernels::logsumexp(&[1e4f32, -1e4]);
        assert!(v.is_finite());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(kernels::argmax(&[0.25f64, 0.25, 0.25, 0.25]), 0);
        assert_eq!(kernels::argmax(&[0.1f64, 0.5, 0.5]), 1);
    }

    #[test]
    fn copy_on_write_leaves_clones_alone() {
        let a = Tensor::<f32>::row(vec![1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[5.0, 2.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        kernels::matmul(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [0.5, 7.0, 2.0, 16.0]);
        let bt = Tensor::new(vec![3, 2], b.to_vec()).unwrap().transpose();
        let mut c2 = [0.0; 4];
        kernels::matmul_nt(&a, bt.data(), &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        let at = Tensor::new(vec![2, 3], a.to_vec()).unwrap().transpose();
        let mut c3 = [0.0; 4];
        kernels::matmul_tn(at.data(), &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }
}
