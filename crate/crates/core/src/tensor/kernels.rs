//! Slice-level numeric kernels shared by the tape ops and plain tensor helpers.

use super::{Element, RowSelect};
use crate::error::{Error, Result};

/// Independent accumulators for row reductions. A single running sum is one
/// long dependency chain; eight short ones keep the FP units busy.
const LANES: usize = 8;

/// `sum_i f(i)` over `0..len` with [`LANES`] partial sums.
#[inline]
fn lane_sum<E: Element>(len: usize, f: impl Fn(usize) -> E) -> E {
    let mut acc = [E::zero(); LANES];
    let whole = len - len % LANES;
    for base in (0..whole).step_by(LANES) {
        for (l, a) in acc.iter_mut().enumerate() {
            *a = *a + f(base + l);
        }
    }
    let mut total = (whole..len).fold(E::zero(), |s, i| s + f(i));
    for a in acc {
        total = total + a;
    }
    total
}

#[inline]
fn lane_max<E: Element>(x: &[E]) -> E {
    let mut acc = [E::neg_infinity(); LANES];
    let mut chunks = x.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    let tail = chunks.remainder().iter().fold(E::neg_infinity(), |m, &v| m.max(v));
    acc.iter().fold(tail, |m, &v| m.max(v))
}

/// `c (+)= op(a) * op(b)` for row-major matrices.
///
/// `a` is `[m, k]` (or `[k, m]` when `a_t`), `b` is `[k, n]` (or `[n, k]`
/// when `b_t`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    a_t: bool,
    b: &[E],
    b_t: bool,
    c: &mut [E],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { E::one() } else { E::zero() };
    // SAFETY: extents were checked above and the three buffers are distinct
    // borrows.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `op(a) * op(b)` for `batch` stacked products into a fresh buffer. `b` is
/// either stacked the same way or shared by every product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<E: Element>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    b_shared: bool,
) -> Vec<E> {
    let len = batch * m * n;
    assert!(a.len() >= batch * m * k && b.len() >= if b_shared { k * n } else { batch * k * n });
    let mut out = Vec::with_capacity(len);
    let c = out.as_mut_ptr();
    // SAFETY: extents were checked above. With beta = 0 the kernel never
    // reads `c`, and every one of the `len` outputs is written before the
    // length is set.
    unsafe {
        if b_shared {
            E::gemm_raw(
                batch * m,
                k,
                n,
                E::one(),
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                E::zero(),
                c,
                n as isize,
                1,
            );
        } else {
            for i in 0..batch {
                E::gemm_raw(
                    m,
                    k,
                    n,
                    E::one(),
                    a.as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    b.as_ptr().add(i * k * n),
                    n as isize,
                    1,
                    E::zero(),
                    c.add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        out.set_len(len);
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn swap_axes<E: Element>(
    data: &[E],
    shape: &[usize],
    ax1: usize,
    ax2: usize,
) -> Result<(Vec<E>, Vec<usize>)> {
    let nd = shape.len();
    if ax1 >= nd || ax2 >= nd {
        return Err(Error::Index {
            op: "transpose",
            index: ax1.max(ax2),
            extent: nd,
        });
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    if ax1 == ax2 {
        return Ok((data.to_vec(), out_shape));
    }
    let (lo, hi) = (ax1.min(ax2), ax1.max(ax2));
    let pre: usize = shape[..lo].iter().product();
    let a = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let b = shape[hi];
    let post: usize = shape[hi + 1..].iter().product();

    let mut out = Vec::with_capacity(data.len());
    for p in 0..pre {
        for j in 0..b {
            for m in 0..mid {
                for i in 0..a {
                    let src = (((p * a + i) * mid + m) * b + j) * post;
                    if post == 1 {
                        out.push(data[src]);
                    } else {
                        out.extend_from_slice(&data[src..src + post]);
                    }
                }
            }
        }
    }
    Ok((out, out_shape))
}

/// Resolved row-gather plan: for each leading slice, the source row list.
pub(crate) struct GatherPlan<'a> {
    pub slices: usize,
    pub group: usize,
    pub rows_in: usize,
    pub width: usize,
    pub select: &'a RowSelect,
}

impl GatherPlan<'_> {
    pub fn rows_for(&self, slice: usize) -> &[usize] {
        match self.select {
            RowSelect::Shared(rows) => rows,
            RowSelect::PerBatch(sets) => &sets[slice / self.group],
        }
    }

    pub fn rows_out(&self) -> usize {
        self.rows_for(0).len()
    }
}

pub(crate) fn gather_plan<'a>(shape: &[usize], select: &'a RowSelect) -> Result<GatherPlan<'a>> {
    let nd = shape.len();
    if nd < 2 {
        return Err(Error::contract(format!(
            "gather_rows needs at least 2 axes, got {shape:?}"
        )));
    }
    let rows_in = shape[nd - 2];
    let width = shape[nd - 1];
    let slices: usize = shape[..nd - 2].iter().product();
    let group = match select {
        RowSelect::Shared(_) => 1,
        RowSelect::PerBatch(sets) => {
            if nd < 3 || sets.len() != shape[0] {
                return Err(Error::shape(
                    "gather_rows (per-batch sets)",
                    shape,
                    &[sets.len()],
                ));
            }
            slices / shape[0]
        }
    };
    let sets: Vec<&[usize]> = match select {
        RowSelect::Shared(rows) => vec![rows.as_slice()],
        RowSelect::PerBatch(sets) => sets.iter().map(|s| s.as_slice()).collect(),
    };
    let count = sets[0].len();
    for rows in sets {
        if rows.is_empty() {
            return Err(Error::contract("gather_rows selecting zero rows"));
        }
        if rows.len() != count {
            return Err(Error::contract(
                "gather_rows per-batch sets must have equal length",
            ));
        }
        for w in rows.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::contract(
                    "gather_rows indices must be strictly ascending",
                ));
            }
        }
        if let Some(&last) = rows.last() {
            if last >= rows_in {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: last,
                    extent: rows_in,
                });
            }
        }
    }
    Ok(GatherPlan {
        slices,
        group,
        rows_in,
        width,
        select,
    })
}

pub(crate) fn gather_rows<E: Element>(
    data: &[E],
    shape: &[usize],
    select: &RowSelect,
) -> Result<(Vec<E>, Vec<usize>)> {
    let plan = gather_plan(shape, select)?;
    let mut out_shape = shape.to_vec();
    let nd = shape.len();
    out_shape[nd - 2] = plan.rows_out();
    let mut out = Vec::with_capacity(plan.slices * plan.rows_out() * plan.width);
    for s in 0..plan.slices {
        let base = s * plan.rows_in * plan.width;
        for &r in plan.rows_for(s) {
            let src = base + r * plan.width;
            out.extend_from_slice(&data[src..src + plan.width]);
        }
    }
    Ok((out, out_shape))
}

/// Adds `grad` (gathered layout) back into `dst` (source layout).
pub(crate) fn scatter_rows_add<E: Element>(plan: &GatherPlan<'_>, grad: &[E], dst: &mut [E]) {
    let w = plan.width;
    let k = plan.rows_out();
    for s in 0..plan.slices {
        let base = s * plan.rows_in * w;
        for (j, &r) in plan.rows_for(s).iter().enumerate() {
            let g = &grad[(s * k + j) * w..(s * k + j + 1) * w];
            let d = &mut dst[base + r * w..base + (r + 1) * w];
            for (d, g) in d.iter_mut().zip(g) {
                *d = *d + *g;
            }
        }
    }
}

pub(crate) fn softmax<E: Element>(x: &[E], outer: usize, len: usize, inner: usize) -> Vec<E> {
    let mut y = vec![E::zero(); x.len()];
    if inner == 1 {
        for (xr, yr) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)) {
            let max = lane_max(xr);
            for (yv, &xv) in yr.iter_mut().zip(xr) {
                *yv = (xv - max).kernel_exp();
            }
            let inv = lane_sum(len, |j| yr[j]).recip();
            for yv in yr.iter_mut() {
                *yv = *yv * inv;
            }
        }
        return y;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(E::neg_infinity(), |m, j| m.max(x[at(j)]));
            let mut sum = E::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).kernel_exp();
                y[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<E: Element>(
    y: &[E],
    dy: &[E],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [E],
) {
    if inner == 1 {
        for ((yr, dyr), dxr) in y
            .chunks_exact(len)
            .zip(dy.chunks_exact(len))
            .zip(dx.chunks_exact_mut(len))
        {
            let dot = lane_sum(len, |j| dyr[j] * yr[j]);
            for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
                *d = *d + yv * (g - dot);
            }
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot = (0..len).fold(E::zero(), |acc, j| acc + dy[at(j)] * y[at(j)]);
            for j in 0..len {
                let p = at(j);
                dx[p] = dx[p] + y[p] * (dy[p] - dot);
            }
        }
    }
}

/// Layer normalization over the last axis. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm<E: Element>(
    x: &[E],
    width: usize,
    gamma: &[E],
    beta: &[E],
    eps: E,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let rows = x.len() / width;
    let w = E::of(width as f64);
    let mut y = vec![E::zero(); x.len()];
    let mut xhat = vec![E::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = lane_sum(width, |c| xr[c]) / w;
        let var = lane_sum(width, |c| (xr[c] - mean) * (xr[c] - mean)) / w;
        let rs = (var + eps).sqrt().recip();
        rstd.push(rs);
        for c in 0..width {
            let h = (xr[c] - mean) * rs;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

/// Input gradient of layer norm, accumulated into `dx`; parameter gradients
/// accumulated into `dgamma`/`dbeta` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<E: Element>(
    dy: &[E],
    xhat: &[E],
    rstd: &[E],
    gamma: &[E],
    width: usize,
    dx: Option<&mut [E]>,
    dgamma: Option<&mut [E]>,
    dbeta: Option<&mut [E]>,
) {
    let rows = dy.len() / width;
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for c in 0..width {
                dg[c] = dg[c] + dy[r * width + c] * xhat[r * width + c];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for c in 0..width {
                db[c] = db[c] + dy[r * width + c];
            }
        }
    }
    if let Some(dx) = dx {
        let w = E::of(width as f64);
        for (r, &rs) in rstd.iter().enumerate().take(rows) {
            let span = r * width..(r + 1) * width;
            let (dyr, xr) = (&dy[span.clone()], &xhat[span.clone()]);
            let mean_g = lane_sum(width, |c| dyr[c] * gamma[c]) / w;
            let mean_gx = lane_sum(width, |c| dyr[c] * gamma[c] * xr[c]) / w;
            let dxr = &mut dx[span];
            for c in 0..width {
                let g = dyr[c] * gamma[c];
                dxr[c] = dxr[c] + rs * (g - mean_g - xr[c] * mean_gx);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `1 - 2 / (e^{2z} + 1)`: one `exp` instead of libm's `tanh`, which is
/// several times slower. Saturates cleanly when `exp` over- or underflows.
#[inline]
fn tanh<E: Element>(z: E) -> E {
    let two = E::of(2.0);
    E::one() - two / ((two * z).kernel_exp() + E::one())
}

/// Tanh-form GELU.
#[inline]
pub(crate) fn gelu<E: Element>(x: E) -> E {
    let half = E::of(0.5);
    let inner = E::of(GELU_C) * (x + E::of(GELU_A) * x * x * x);
    half * x * (E::one() + tanh(inner))
}

#[inline]
pub(crate) fn gelu_grad<E: Element>(x: E) -> E {
    let half = E::of(0.5);
    let inner = E::of(GELU_C) * (x + E::of(GELU_A) * x * x * x);
    let t = tanh(inner);
    let dinner = E::of(GELU_C) * (E::one() + E::of(3.0 * GELU_A) * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * dinner
}

pub(crate) fn smooth_l1_elem<E: Element>(delta: E, beta: E) -> E {
    let a = delta.abs();
    if a < beta {
        E::of(0.5) * a * a / beta
    } else {
        a - E::of(0.5) * beta
    }
}

pub(crate) fn smooth_l1_grad<E: Element>(delta: E, beta: E) -> E {
    if delta.abs() < beta {
        delta / beta
    } else {
        delta.signum()
    }
}

pub(crate) fn first_non_finite<E: Element>(data: &[E]) -> Option<usize> {
    if !E::any_non_finite(data) {
        return None;
    }
    data.iter().position(|v| !v.is_finite())
}
