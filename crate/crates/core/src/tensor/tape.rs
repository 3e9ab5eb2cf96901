use super::kernels::{self, axis_split};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row selection along the second-to-last axis.
///
/// `Shared` applies one index list to every leading slice. `PerBatch` holds
/// one list per entry of the first axis; all lists must have equal length.
/// Indices are strictly ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowSelect {
    Shared(Vec<usize>),
    PerBatch(Vec<Vec<usize>>),
}

enum Op<E> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: E,
    },
    Gelu {
        x: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Transpose {
        x: usize,
        ax1: usize,
        ax2: usize,
    },
    Reshape {
        x: usize,
    },
    MeanAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        x: usize,
    },
    Sum {
        x: usize,
    },
    GatherRows {
        x: usize,
        select: RowSelect,
    },
    BlendRows {
        x: usize,
        token: usize,
        weights: Vec<E>,
    },
    SmoothL1 {
        a: usize,
        b: usize,
        beta: E,
    },
    Mse {
        a: usize,
        b: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Every op appends one node; [`Tape::backward`] walks the nodes in reverse
/// application order, visiting each exactly once.
pub struct Tape<E: Element = f64> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<E> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Grads<E> {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<E> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, var: Var) -> Tensor<E> {
        let shape = self.shapes[var.0].clone();
        match self.grads[var.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite<E: Element>(op: &str, data: &[E]) -> Result<()> {
    match kernels::first_non_finite(data) {
        None => Ok(()),
        Some(pos) => Err(Error::NonFinite {
            op: format!("{op} (element {pos})"),
        }),
    }
}

fn acc<E: Element>(slot: &mut Option<Vec<E>>, len: usize) -> &mut Vec<E> {
    slot.get_or_insert_with(|| vec![E::zero(); len])
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are only tracked from leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor<E>, op: Op<E>, inputs: &[usize]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `[.., M, K] @ [.., K, N]`. The right operand
    /// either has exactly the left operand's batch extents or none, in which
    /// case it is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_shared = batch_b.is_empty();
        if k != kb || !(b_shared || batch_a == batch_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let out = kernels::batched_gemm(
            batch,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            b_shared,
        );
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            &[a.0, b.0],
        )
    }

    /// Elementwise sum. `b` may have fewer axes than `a` as long as its shape
    /// is a suffix of `a`'s; it is then repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            chunk.iter_mut().zip(bv).for_each(|(x, &y)| *x = *x + y);
        }
        let shape = sa.to_vec();
        self.push(
            "add",
            Tensor::from_parts(shape, out),
            Op::Add { a: a.0, b: b.0 },
            &[a.0, b.0],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(
            "mul",
            Tensor::from_parts(shape, out),
            Op::Mul { a: a.0, b: b.0 },
            &[a.0, b.0],
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = E::of(factor);
        let out: Vec<E> = self.value(x).data().iter().map(|&v| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "scale",
            Tensor::from_parts(shape, out),
            Op::Scale { x: x.0, factor: f },
            &[x.0],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::gelu(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "gelu",
            Tensor::from_parts(shape, out),
            Op::Gelu { x: x.0 },
            &[x.0],
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                extent: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let out = kernels::softmax(self.value(x).data(), outer, len, inner);
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            &[x.0],
        )
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm on scalar"))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (y, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            width,
            self.value(gamma).data(),
            self.value(beta).data(),
            E::of(eps),
        );
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    pub fn transpose(&mut self, x: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let (data, shape) = kernels::swap_axes(self.value(x).data(), self.shape(x), ax1, ax2)?;
        self.push(
            "transpose",
            Tensor::from_parts(shape, data),
            Op::Transpose { x: x.0, ax1, ax2 },
            &[x.0],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "mean_axis",
                index: axis,
                extent: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let inv = E::of(1.0 / len as f64);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(
            "mean_axis",
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis {
                x: x.0,
                outer,
                len,
                inner,
            },
            &[x.0],
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mean = v.data().iter().fold(E::zero(), |a, &b| a + b) / E::of(v.len() as f64);
        self.push(
            "reduce_mean",
            Tensor::scalar(mean),
            Op::Mean { x: x.0 },
            &[x.0],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(E::zero(), |a, &b| a + b);
        self.push("sum", Tensor::scalar(total), Op::Sum { x: x.0 }, &[x.0])
    }

    /// Selects rows along the second-to-last axis. The gradient scatters back
    /// to the selected source rows; dropped rows receive zero.
    pub fn gather_rows(&mut self, x: Var, select: RowSelect) -> Result<Var> {
        let (data, shape) = kernels::gather_rows(self.value(x).data(), self.shape(x), &select)?;
        self.push(
            "gather_rows",
            Tensor::from_parts(shape, data),
            Op::GatherRows { x: x.0, select },
            &[x.0],
        )
    }

    /// `out[.., n, :] = (1 - w[.., n]) * x[.., n, :] + w[.., n] * token`.
    ///
    /// Used to substitute a learned embedding at masked positions.
    pub fn blend_rows(&mut self, x: Var, token: Var, weights: Vec<E>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if self.shape(token) != [width] || weights.len() * width != self.value(x).len() {
            return Err(Error::shape("blend_rows", &shape, self.shape(token)));
        }
        let tv = self.value(token).data();
        let out: Vec<E> = self
            .value(x)
            .data()
            .chunks_exact(width)
            .zip(&weights)
            .flat_map(|(row, &w)| {
                row.iter()
                    .zip(tv)
                    .map(move |(&r, &t)| (E::one() - w) * r + w * t)
            })
            .collect();
        self.push(
            "blend_rows",
            Tensor::from_parts(shape, out),
            Op::BlendRows {
                x: x.0,
                token: token.0,
                weights,
            },
            &[x.0, token.0],
        )
    }

    /// Mean smooth-L1 distance with transition point `beta`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("smooth_l1", self.shape(a), self.shape(b)));
        }
        let beta = E::of(beta);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total = av.iter().zip(bv).fold(E::zero(), |s, (&x, &y)| {
            s + kernels::smooth_l1_elem(x - y, beta)
        });
        let mean = total / E::of(av.len() as f64);
        self.push(
            "smooth_l1",
            Tensor::scalar(mean),
            Op::SmoothL1 {
                a: a.0,
                b: b.0,
                beta,
            },
            &[a.0, b.0],
        )
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total = av
            .iter()
            .zip(bv)
            .fold(E::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
        let mean = total / E::of(av.len() as f64);
        self.push(
            "mse",
            Tensor::scalar(mean),
            Op::Mse { a: a.0, b: b.0 },
            &[a.0, b.0],
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: classes,
            });
        }
        let probs = kernels::softmax(self.value(logits).data(), shape[0], classes, 1);
        let total = labels.iter().enumerate().fold(E::zero(), |s, (i, &l)| {
            s - probs[i * classes + l].max(E::min_positive_value()).ln()
        });
        let mean = total / E::of(labels.len() as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<E>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                check_finite("backward", g)?;
            }
        }
        Ok(Grads {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn len_of(&self, i: usize) -> usize {
        self.nodes[i].value.len()
    }

    fn backward_node(&self, node: &Node<E>, g: &[E], grads: &mut [Option<Vec<E>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                if self.wants(a) {
                    let len = self.len_of(a);
                    let da = acc(&mut grads[a], len);
                    if b_shared {
                        kernels::gemm(batch * m, n, k, g, false, bv, true, da, true);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &bv[i * k * n..],
                                true,
                                &mut da[i * m * k..],
                                true,
                            );
                        }
                    }
                }
                if self.wants(b) {
                    let len = self.len_of(b);
                    let db = acc(&mut grads[b], len);
                    if b_shared {
                        kernels::gemm(k, batch * m, n, av, true, g, false, db, true);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..],
                                true,
                                &g[i * m * n..],
                                false,
                                &mut db[i * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    let len = self.len_of(a);
                    let da = acc(&mut grads[a], len);
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if self.wants(b) {
                    let len = self.len_of(b);
                    let db = acc(&mut grads[b], len);
                    for chunk in g.chunks_exact(len) {
                        db.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                if self.wants(a) {
                    let da = acc(&mut grads[a], av.len());
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * y;
                    }
                }
                if self.wants(b) {
                    let db = acc(&mut grads[b], bv.len());
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * x;
                    }
                }
            }
            &Op::Scale { x, factor } => {
                let dx = acc(&mut grads[x], g.len());
                dx.iter_mut()
                    .zip(g)
                    .for_each(|(d, &v)| *d = *d + v * factor);
            }
            &Op::Gelu { x } => {
                let xv = self.nodes[x].value.data();
                let dx = acc(&mut grads[x], g.len());
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *d = *d + gv * kernels::gelu_grad(v);
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let dx = acc(&mut grads[x], g.len());
                kernels::softmax_backward(y, g, outer, len, inner, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let width = self.nodes[gamma].value.len();
                let gv = self.nodes[gamma].value.data();
                // Three distinct slots; take them out to borrow independently.
                let mut dx = self
                    .wants(x)
                    .then(|| grads[x].take().unwrap_or_else(|| vec![E::zero(); g.len()]));
                let mut dgamma = self.wants(gamma).then(|| {
                    grads[gamma]
                        .take()
                        .unwrap_or_else(|| vec![E::zero(); width])
                });
                let mut dbeta = self
                    .wants(beta)
                    .then(|| grads[beta].take().unwrap_or_else(|| vec![E::zero(); width]));
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    gv,
                    width,
                    dx.as_deref_mut(),
                    dgamma.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                if dx.is_some() {
                    grads[x] = dx;
                }
                if dgamma.is_some() {
                    grads[gamma] = dgamma;
                }
                if dbeta.is_some() {
                    grads[beta] = dbeta;
                }
            }
            &Op::Transpose { x, ax1, ax2 } => {
                let (back, _) = kernels::swap_axes(g, node.value.shape(), ax1, ax2)
                    .expect("transpose axes validated on forward");
                let dx = acc(&mut grads[x], g.len());
                dx.iter_mut().zip(&back).for_each(|(d, &v)| *d = *d + v);
            }
            &Op::Reshape { x } => {
                let dx = acc(&mut grads[x], g.len());
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
            }
            &Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let inv = E::of(1.0 / len as f64);
                let dx = acc(&mut grads[x], outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        dst.iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d = *d + v * inv);
                    }
                }
            }
            &Op::Mean { x } => {
                let len = self.len_of(x);
                let v = g[0] / E::of(len as f64);
                let dx = acc(&mut grads[x], len);
                dx.iter_mut().for_each(|d| *d = *d + v);
            }
            &Op::Sum { x } => {
                let len = self.len_of(x);
                let dx = acc(&mut grads[x], len);
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::GatherRows { x, select } => {
                let x = *x;
                let plan = kernels::gather_plan(self.nodes[x].value.shape(), select)
                    .expect("gather validated on forward");
                let len = self.len_of(x);
                let dx = acc(&mut grads[x], len);
                kernels::scatter_rows_add(&plan, g, dx);
            }
            Op::BlendRows { x, token, weights } => {
                let (x, token) = (*x, *token);
                let width = self.len_of(token);
                if self.wants(x) {
                    let dx = acc(&mut grads[x], g.len());
                    for ((drow, grow), &w) in dx
                        .chunks_exact_mut(width)
                        .zip(g.chunks_exact(width))
                        .zip(weights)
                    {
                        let keep = E::one() - w;
                        drow.iter_mut()
                            .zip(grow)
                            .for_each(|(d, &v)| *d = *d + keep * v);
                    }
                }
                if self.wants(token) {
                    let dt = acc(&mut grads[token], width);
                    for (grow, &w) in g.chunks_exact(width).zip(weights) {
                        if w != E::zero() {
                            dt.iter_mut().zip(grow).for_each(|(d, &v)| *d = *d + w * v);
                        }
                    }
                }
            }
            &Op::SmoothL1 { a, b, beta } => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let scale = g[0] / E::of(av.len() as f64);
                let deltas: Vec<E> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| kernels::smooth_l1_grad(x - y, beta) * scale)
                    .collect();
                if self.wants(a) {
                    let da = acc(&mut grads[a], av.len());
                    da.iter_mut().zip(&deltas).for_each(|(d, &v)| *d = *d + v);
                }
                if self.wants(b) {
                    let db = acc(&mut grads[b], bv.len());
                    db.iter_mut().zip(&deltas).for_each(|(d, &v)| *d = *d - v);
                }
            }
            &Op::Mse { a, b } => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let scale = E::of(2.0) * g[0] / E::of(av.len() as f64);
                if self.wants(a) {
                    let da = acc(&mut grads[a], av.len());
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d = *d + (x - y) * scale;
                    }
                }
                if self.wants(b) {
                    let db = acc(&mut grads[b], bv.len());
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d = *d - (x - y) * scale;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let classes = probs.len() / labels.len();
                let scale = g[0] / E::of(labels.len() as f64);
                let dl = acc(&mut grads[logits], probs.len());
                for (i, &l) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == l { E::one() } else { E::zero() };
                        let p = i * classes + c;
                        dl[p] = dl[p] + (probs[p] - onehot) * scale;
                    }
                }
            }
        }
    }
}
