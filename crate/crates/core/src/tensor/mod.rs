//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Gradient tracking
//! lives on a [`Tape`], which records every primitive applied to its [`Var`]
//! handles and replays them backwards. A tape whose leaves do not require
//! gradients is a plain forward evaluator, which is how frozen teachers run.

pub mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use tape::{Grads, RowSelect, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type. `f64` is the default everywhere; `f32` is an
/// optional speed mode that is never used for gradient checks.
pub trait Element: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// True if any element is NaN or infinite.
    fn any_non_finite(data: &[Self]) -> bool;

    /// `e^x` for the softmax and GELU kernels. Plain `exp` unless the type
    /// has a cheaper inlineable version.
    #[inline]
    fn kernel_exp(self) -> Self {
        self.exp()
    }

    /// `c = alpha * op(a) * op(b) + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping regions
    /// of the stated extents.
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

impl Element for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn any_non_finite(data: &[f64]) -> bool {
        // All-ones exponent marks NaN and infinities. An OR of compare masks
        // vectorizes on baseline SSE2; an early-exit search or a max does not.
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        data.iter()
            .fold(false, |seen, v| seen | (v.to_bits() & EXP == EXP))
    }

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

impl Element for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    /// Range reduction to `r` in `[-ln2/2, ln2/2]` plus the Cephes `expf`
    /// polynomial (about 2 ulp), with no libm call so loops vectorize.
    #[inline]
    fn kernel_exp(self) -> f32 {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        // Adding and subtracting 1.5 * 2^23 rounds to the nearest integer.
        const ROUND: f32 = 12_582_912.0;
        let x = self.clamp(-87.3, 88.3);
        let t = x * LOG2E + ROUND;
        let n = t - ROUND;
        let r = x - n * LN2_HI - n * LN2_LO;
        let mut p = 1.987_569_1e-4;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 0.166_666_65;
        p = p * r + 0.5;
        let y = p * r * r + r + 1.0;
        // The low mantissa bits of `t` hold `n`; reading them directly avoids
        // a saturating float-to-int cast, which blocks vectorization.
        let scale = t.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23;
        y * f32::from_bits(scale)
    }

    fn any_non_finite(data: &[f32]) -> bool {
        // All-ones exponent marks NaN and infinities. An OR of compare masks
        // vectorizes on baseline SSE2; an early-exit search or a max does not.
        const EXP: u32 = 0x7f80_0000;
        data.iter()
            .fold(false, |seen, v| seen | (v.to_bits() & EXP == EXP))
    }

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
}

/// Dense n-dimensional array in row-major order.
///
/// A scalar has an empty shape and one element. Every extent is positive.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", E::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::contract(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("Tensor::new (element {pos})"),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| E::of(v)).collect())
    }

    /// Skips validation; callers guarantee `data.len() == product(shape)`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Swaps two axes, copying into a fresh row-major buffer.
    pub fn transposed(&self, ax1: usize, ax2: usize) -> Result<Self> {
        let (data, shape) = kernels::swap_axes(&self.data, &self.shape, ax1, ax2)?;
        Ok(Tensor { shape, data })
    }

    /// Selects rows along the second-to-last axis, per leading batch entry.
    pub fn select_rows(&self, rows: &RowSelect) -> Result<Self> {
        let (data, shape) = kernels::gather_rows(&self.data, &self.shape, rows)?;
        Ok(Tensor { shape, data })
    }

    /// Selects the same index set from both trailing axes of a `[.., N, N]`
    /// tensor, keeping ascending order.
    pub fn select_square(&self, keep: &RowSelect) -> Result<Self> {
        let rows = self.select_rows(keep)?;
        let cols = rows.transposed(rows.ndim() - 2, rows.ndim() - 1)?;
        let cols = cols.select_rows(keep)?;
        cols.transposed(cols.ndim() - 2, cols.ndim() - 1)
    }
}
