//! Plain row-major n-dimensional storage plus the numeric kernels the
//! differentiation record is built on.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Scalar type of the engine. Implemented for `f32` (training) and `f64`
/// (tests, oracles).
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: &'static str;

    /// `c ← alpha·a·b + beta·c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, in-bounds matrices and `c`
    /// must not alias `a` or `b`.
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

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `tanh`, possibly via a cheaper approximation accurate to the type's
    /// precision.
    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    /// Rational minimax approximation on `[-7.9, 7.9]`; saturates outside.
    #[inline]
    fn tanh_fast(self) -> Self {
        let x = self.clamp(-7.905_311, 7.905_311);
        let x2 = x * x;
        let mut p = x2 * -2.760_768_5e-16 + 2.000_188e-13;
        p = x2 * p + -8.604_672e-11;
        p = x2 * p + 5.122_297e-8;
        p = x2 * p + 1.485_722_4e-5;
        p = x2 * p + 6.372_619_3e-4;
        p = x2 * p + 4.893_524_6e-3;
        p *= x;
        let mut q = x2 * 1.198_258_4e-6 + 1.185_347e-4;
        q = x2 * q + 2.268_434_6e-3;
        q = x2 * q + 4.893_525e-3;
        p / q
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix inside a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatView {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(self) -> Self {
        MatView {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked strided gemm: `c ← a·b + beta·c` with `a: m×k`, `b: k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
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
    if k > 0 {
        assert!(av.max_index(m, k) < a.len(), "gemm: lhs view out of bounds");
        assert!(bv.max_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    }
    assert!(cv.max_index(m, n) < c.len(), "gemm: out view out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` is a distinct
    // mutable borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        );
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        })
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    /// Value of a single-element array.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn reshaped(mut self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Same-shape elementwise combination.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Broadcasting elementwise combination (numpy rules).
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape("broadcast", &self.shape, &other.shape))?;
        let n: usize = out.iter().product();
        let mut data = Vec::with_capacity(n);
        if self.shape == out && is_suffix(&other.shape, &out) {
            let m = other.numel().max(1);
            for chunk in self.data.chunks(m) {
                data.extend(chunk.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
            }
        } else if other.shape == out && is_suffix(&self.shape, &out) {
            let m = self.numel().max(1);
            for chunk in other.data.chunks(m) {
                data.extend(self.data.iter().zip(chunk).map(|(&a, &b)| f(a, b)));
            }
        } else {
            let sa = broadcast_strides(&self.shape, &out);
            let sb = broadcast_strides(&other.shape, &out);
            let (x, y) = (&self.data, &other.data);
            for_each_row(&out, &sa, &sb, |oa, ob, n, da, db| match (da, db) {
                (1, 1) => data.extend(x[oa..oa + n].iter().zip(&y[ob..ob + n]).map(|(&a, &b)| f(a, b))),
                (1, 0) => data.extend(x[oa..oa + n].iter().map(|&a| f(a, y[ob]))),
                (0, 1) => data.extend(y[ob..ob + n].iter().map(|&b| f(x[oa], b))),
                _ => data.extend((0..n).map(|i| f(x[oa + i * da], y[ob + i * db]))),
            });
        }
        Ok(Tensor { shape: out, data })
    }

    /// Sum over the axes along which `shape` was broadcast to produce `self`.
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(ref s) if *s == self.shape => {}
            _ => return Err(Error::shape("reduce_to", &self.shape, shape)),
        }
        let mut out = Tensor::zeros(shape);
        if is_suffix(shape, &self.shape) {
            let m = out.numel().max(1);
            for chunk in self.data.chunks(m) {
                for (o, &g) in out.data.iter_mut().zip(chunk) {
                    *o = *o + g;
                }
            }
        } else {
            let so = broadcast_strides(shape, &self.shape);
            let si = contiguous_strides(&self.shape);
            let (x, o) = (&self.data, &mut out.data);
            for_each_row(&self.shape, &si, &so, |ii, io, n, _, dout| {
                let row = &x[ii..ii + n];
                if dout == 0 {
                    o[io] = o[io] + row.iter().copied().sum::<T>();
                } else {
                    for (k, &v) in row.iter().enumerate() {
                        o[io + k * dout] = o[io + k * dout] + v;
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Generic axis permutation; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!("permutation {axes:?} invalid for rank {r}")));
        }
        let src_strides = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let zeros = vec![0; r];
        for_each_broadcast(&out_shape, &strides, &zeros, |i, _| data.push(self.data[i]));
        Ok(Tensor { shape: out_shape, data })
    }

    /// 2-D matrix product (no batching).
    pub fn matmul2d(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            &self.data,
            MatView::row_major(0, k),
            &other.data,
            MatView::row_major(0, n),
            T::zero(),
            &mut out.data,
            MatView::row_major(0, n),
        );
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` aligned to `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                base[i - off]
            }
        })
        .collect()
}

/// `shape` (with leading ones stripped) equals a trailing block of `out`.
fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    let stripped: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    stripped.len() <= out.len() && out[out.len() - stripped.len()..] == stripped[..]
}

/// Visits every index of `shape` in row-major order, yielding the two flat
/// offsets given by strides `sa` and `sb`.
fn for_each_broadcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    for_each_row(shape, sa, sb, |oa, ob, inner, da, db| {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..inner {
            f(a, b);
            a += da;
            b += db;
        }
    });
}

/// Visits the innermost rows of `shape`, yielding the start offsets under
/// strides `sa` and `sb`, the row length, and the innermost strides.
fn for_each_row(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let r = shape.len();
    if shape.contains(&0) {
        return;
    }
    if r == 0 {
        f(0, 0, 1, 0, 0);
        return;
    }
    let inner = shape[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        f(oa, ob, inner, ia_step, ib_step);
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}
