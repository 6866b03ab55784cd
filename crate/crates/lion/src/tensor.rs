//! Dense row-major tensors over `f32` or `f64`.
//!
//! Arithmetic between tensors of different element types is a compile error;
//! conversion between precisions is explicit via [`Tensor::to_f64`] /
//! [`Tensor::to_f32`]. Training code runs in `f32`, verification and gradient
//! checks in `f64`.

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LionError, Result};

/// Element type tag, as stored in weight files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element types usable in tensors and on the tape.
pub trait Scalar: Float + Debug + Display + Send + Sync + Copy + PartialOrd + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;

    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(LionError::Config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(LionError::DimensionMismatch {
                ctx: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::one(); numel], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false }
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: T, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z = T::sample_standard_normal(rng);
                z * std
            })
            .collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    /// Row count for a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(self.is_matrix());
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(LionError::DimensionMismatch {
                ctx: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: self.requires_grad })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(&self, other: &Self, ctx: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(LionError::DimensionMismatch {
                ctx,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(LionError::DimensionMismatch {
                ctx: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, p, q) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![T::zero(); m * q];
        matmul_into(&self.data, &other.data, &mut out, m, p, q);
        Ok(Tensor { shape: vec![m, q], data: out, requires_grad: false })
    }

    /// Matrix transpose of a 2-d tensor.
    pub fn transpose(&self) -> Self {
        debug_assert!(self.is_matrix());
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out, requires_grad: false }
    }

    /// Square root of the sum of squared entries.
    pub fn frobenius_norm(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(LionError::EmptyTensor("frobenius_norm"));
        }
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v * v;
        }
        Ok(acc.sqrt())
    }

    /// Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        if !self.is_matrix() {
            return Err(LionError::DimensionMismatch {
                ctx: "softmax_rows",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(LionError::NanInput("softmax_rows"));
        }
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(&self.data[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        Ok(Tensor { shape: vec![r, c], data: out, requires_grad: false })
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64() as f32).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Cosine of the angle between two tensors, flattened.
pub fn cosine_similarity<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    if u.numel() != v.numel() {
        return Err(LionError::DimensionMismatch {
            ctx: "cosine_similarity",
            lhs: u.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    cosine_similarity_slices(u.data(), v.data())
}

pub(crate) fn cosine_similarity_slices<T: Float>(u: &[T], v: &[T]) -> Result<T> {
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot = dot + a * b;
        nu = nu + a * a;
        nv = nv + b * b;
    }
    if nu == T::zero() {
        return Err(LionError::UndefinedSimilarity("left"));
    }
    if nv == T::zero() {
        return Err(LionError::UndefinedSimilarity("right"));
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// `out = a @ b` for row-major buffers, `a: m x p`, `b: p x q`.
pub(crate) fn matmul_into<T: Float + Copy>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * q);
    // i-k-j order keeps the inner loop streaming over contiguous rows of b.
    for i in 0..m {
        let out_row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[k * q..(k + 1) * q];
            for j in 0..q {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
}

pub(crate) fn transpose_into<T: Copy>(a: &[T], out: &mut [T], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

pub(crate) fn softmax_row<T: Float>(row: &[T], out: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_operand_unchanged() {
        let m = t64(&[2, 2], &[3.0, -1.5, 2.25, 7.0]);
        let i = Tensor::<f64>::eye(2);
        assert_eq!(i.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_projector_zeroes_second_row() {
        let p = t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let m = t64(&[2, 2], &[2.0, 3.0, 4.0, 5.0]);
        let out = p.matmul(&m).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        // Naive i-j-k oracle.
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at2(i, k) * b.at2(k, j);
                }
                oracle[i * 2 + j] = s;
            }
        }
        for (f, o) in fast.data().iter().zip(oracle.iter()) {
            assert_relative_eq!(f, o, max_relative = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        match a.matmul(&b) {
            Err(LionError::DimensionMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn frobenius_norm_known_values() {
        assert_relative_eq!(Tensor::<f64>::eye(2).frobenius_norm().unwrap(), 2f64.sqrt());
        assert_eq!(Tensor::<f64>::zeros(vec![3, 3]).frobenius_norm().unwrap(), 0.0);
        let t = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(t.frobenius_norm().unwrap(), 30f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn cosine_similarity_known_values() {
        let ex = t64(&[2], &[1.0, 0.0]);
        let ey = t64(&[2], &[0.0, 1.0]);
        assert_eq!(cosine_similarity(&ex, &ey).unwrap(), 0.0);
        assert_relative_eq!(cosine_similarity(&ex, &ex).unwrap(), 1.0);
        let d = t64(&[2], &[1.0, 1.0]);
        assert_relative_eq!(
            cosine_similarity(&d, &ex).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn cosine_similarity_zero_vector_is_undefined() {
        let z = Tensor::<f64>::zeros(vec![2]);
        let x = t64(&[2], &[1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&z, &x),
            Err(LionError::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn softmax_rows_uniform_and_saturated() {
        let eq = t64(&[1, 4], &[0.7, 0.7, 0.7, 0.7]);
        let out = eq.softmax_rows().unwrap();
        for &v in out.data() {
            assert_relative_eq!(v, 0.25, max_relative = 1e-12);
        }
        let hot = t64(&[1, 2], &[0.0, 60.0]);
        let out = hot.softmax_rows().unwrap();
        assert!(out.data()[0] < 1e-20);
        assert_relative_eq!(out.data()[1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_rows_matches_exp_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::<f64>::randn(vec![1, 8], 2.0, &mut rng);
        let out = t.softmax_rows().unwrap();
        let exps: Vec<f64> = t.data().iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in out.data().iter().zip(exps.iter()) {
            assert_relative_eq!(*o, e / sum, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_rows_rejects_nan() {
        let t = t64(&[1, 2], &[f64::NAN, 1.0]);
        assert!(matches!(t.softmax_rows(), Err(LionError::NanInput(_))));
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
