//! Dense NCHW tensors and the scalar abstraction shared by every layer.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type. Training runs in `f32`; gradient checks run
/// the same code in `f64`.
pub trait Scalar:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n`,
    /// each described by a row stride and a column stride.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path, $size:literal) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: out too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
                let mut out = Vec::with_capacity(data.len() * $size);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }

            fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact($size)
                    .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, 4);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, 8);

/// Shorthand for literal conversion inside generic code.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Batch of feature maps in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: T) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements belonging to one sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Concatenates two batches along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert!(
            a.n == b.n && a.h == b.h && a.w == b.w,
            "concat: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let mut out = Self::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let dst = out.sample_mut(i);
            let split = a.sample_len();
            dst[..split].copy_from_slice(a.sample(i));
            dst[split..].copy_from_slice(b.sample(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c_first` channels
    /// and the remainder.
    pub fn split_channels(&self, c_first: usize) -> (Self, Self) {
        assert!(c_first <= self.c);
        let mut a = Self::zeros(self.n, c_first, self.h, self.w);
        let mut b = Self::zeros(self.n, self.c - c_first, self.h, self.w);
        let split = c_first * self.plane();
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..split]);
            b.sample_mut(i).copy_from_slice(&src[split..]);
        }
        (a, b)
    }

    /// Stacks single-sample tensors into one batch.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "stack: empty batch");
        let first = &items[0];
        let mut data = Vec::with_capacity(items.len() * first.sample_len());
        for t in items {
            assert!(
                t.c == first.c && t.h == first.h && t.w == first.w,
                "stack: inconsistent sample shapes"
            );
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.n).sum();
        Self::from_vec(n, first.c, first.h, first.w, data)
    }

    /// Global average pooling: one `c`-wide vector per sample.
    pub fn global_avg_pool(&self) -> Vec<Vec<T>> {
        let plane = self.plane();
        let inv = T::one() / lit::<T>(plane as f64);
        (0..self.n)
            .map(|i| {
                self.sample(i)
                    .chunks_exact(plane)
                    .map(|ch| ch.iter().copied().sum::<T>() * inv)
                    .collect()
            })
            .collect()
    }

    /// Adjoint of [`Tensor::global_avg_pool`], accumulating into `self`.
    pub fn add_global_avg_pool_grad(&mut self, grads: &[Vec<T>]) {
        assert_eq!(grads.len(), self.n);
        let plane = self.plane();
        let inv = T::one() / lit::<T>(plane as f64);
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(g.len(), self.c);
            for (ch, gv) in self.sample_mut(i).chunks_exact_mut(plane).zip(g) {
                let d = *gv * inv;
                for v in ch {
                    *v += d;
                }
            }
        }
    }
}
