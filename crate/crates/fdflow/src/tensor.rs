//! Dense row-major tensors over `f32`/`f64`.
//!
//! The 4-D convention throughout the crate is batch x channels x height x
//! width. Scalars are rank-1 tensors of length 1.

use crate::error::{Error, Result};
use num_traits::Float;
use rand::Rng;

/// Element type for tensors: `f32` for training and inference, `f64` for
/// gradient checking.
pub trait Elem: Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;

    /// Strided matrix multiply `c = alpha * a(m,k) @ b(k,n) + beta * c`, with
    /// `c` row-major contiguous. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self, c: &mut [Self],
    );
}

impl Elem for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: f32,
        a: &[f32], rsa: isize, csa: isize,
        b: &[f32], rsb: isize, csb: isize,
        beta: f32, c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: f64,
        a: &[f64], rsa: isize, csa: isize,
        b: &[f64], rsb: isize, csb: isize,
        beta: f64, c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense N-dimensional array with contiguous row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Elem> Tensor<T> {
    /// Builds a tensor, validating that the extents are positive and
    /// consistent with the data length.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidTensor(format!(
                "all extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Uniform values in `(-bound, bound)`.
    pub fn rand_uniform(shape: &[usize], bound: T, rng: &mut impl Rng) -> Self {
        let b = bound.to_f64_();
        Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-b..b)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The (batch, channels, height, width) extents of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(Error::InvalidTensor(format!(
                "expected a 4-D tensor, got shape {other:?}"
            ))),
        }
    }

    /// Contiguous H*W slice for one (batch, channel) plane of a 4-D tensor.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let start = (b * ch + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let start = (b * ch + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-wise cast between precisions.
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64_())).collect(),
        }
    }

    /// Stacks single-batch tensors along the batch dimension.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_batch needs at least one tensor".into()))?;
        let (b0, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * b0 * c * h * w);
        let mut batch = 0;
        for t in items {
            let (b, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(
                    "stack_batch",
                    format!("expected {c}x{h}x{w}, got {tc}x{th}x{tw}"),
                ));
            }
            batch += b;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![batch, c, h, w], data)
    }

    /// Extracts one batch item, keeping a batch dimension of 1.
    pub fn slice_batch(&self, b: usize) -> Result<Self> {
        let (_, c, h, w) = self.dims4()?;
        let len = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[b * len..(b + 1) * len].to_vec())
    }
}

impl<T: Elem> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

/// Row-major `c = alpha * a @ b + beta * c` for m x k and k x n operands.
pub fn gemm<T: Elem>(m: usize, k: usize, n: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm dst size");
    T::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// `c = alpha * a^T @ b + beta * c` where `a` is stored row-major as k x m.
pub fn gemm_at<T: Elem>(m: usize, k: usize, n: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), k * m, "gemm_at lhs size");
    assert_eq!(b.len(), k * n, "gemm_at rhs size");
    assert_eq!(c.len(), m * n, "gemm_at dst size");
    T::gemm_strided(m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, c);
}

/// `c = alpha * a @ b^T + beta * c` where `b` is stored row-major as n x k.
pub fn gemm_bt<T: Elem>(m: usize, k: usize, n: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm_bt lhs size");
    assert_eq!(b.len(), n * k, "gemm_bt rhs size");
    assert_eq!(c.len(), m * n, "gemm_bt dst size");
    T::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, c);
}
