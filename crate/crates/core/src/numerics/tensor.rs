use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Floating point element type. Networks store `f32`; gradient checks run
/// the same graphs in `f64`.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for strided matrices.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing
    /// `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major view of a matrix inside a slice: `(offset, row stride, col stride)`.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub const fn rows(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols,
            cs: 1,
        }
    }
    /// Transposed view of a row-major matrix with `cols` columns.
    pub const fn transposed(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols,
        }
    }
    fn last(&self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            self.offset
        } else {
            self.offset + (r - 1) * self.rs + (c - 1) * self.cs
        }
    }
}

/// Bounds-checked GEMM: `c[cv] = alpha * a[av] * b[bv] + beta * c[cv]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len().max(1) || k == 0, "gemm: a out of bounds");
    assert!(bv.last(k, n) < b.len().max(1) || k == 0, "gemm: b out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c[idx]
                };
            }
        }
        return;
    }
    // SAFETY: every addressed element was bounds-checked above; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Dense row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
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
    pub fn into_data(self) -> Vec<T> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn rank(&self) -> usize {
        self.shape.len()
    }
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", &self.shape, &other.shape));
        }
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

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Slice `[start, end)` along the leading axis.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Self> {
        let n0 = self.shape[0];
        if start >= end || end > n0 {
            return Err(crate::error::invalid("slice0", "range outside leading axis"));
        }
        let inner = self.data.len() / n0;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Concatenate along the leading axis.
    pub fn stack0(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty { op: "stack0" })?;
        let tail = &first.shape[1..];
        let mut n0 = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err("stack0", &first.shape, &p.shape));
            }
            n0 += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n0;
        Ok(Self { shape, data })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty { op: "stack" })?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(shape_err("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape.insert(0, parts.len());
        Ok(Self { shape, data })
    }

    /// Prepend a unit axis.
    pub fn unsqueeze0(mut self) -> Self {
        self.shape.insert(0, 1);
        self
    }
}

/// 2-D matrix product `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        MatView::rows(0, k),
        b.data(),
        MatView::rows(0, n),
        T::zero(),
        out.data_mut(),
        MatView::rows(0, n),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let a = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let z = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn constructor_checks_length() {
        assert!(Tensor::new(&[2, 2], vec![1.0f32; 3]).is_err());
        assert!(Tensor::new(&[0], Vec::<f32>::new()).is_err());
    }
}
