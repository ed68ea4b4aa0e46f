//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node to the [`Tape`]; parents always precede
//! children, so the record is already in topological order and backward is a
//! single reverse sweep. Nodes whose parents need no gradient carry no
//! backward closure.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Real, Tensor};

/// Local derivative: maps the output cotangent to one cotangent per parent.
/// The flag slice tells which parents actually need one.
pub type GradFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<GradFn<T>>,
}

/// The differentiation record for one forward/backward cycle.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to an array recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients of the requires-grad leaves, indexed by node id.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf_rc(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records an operation with a custom local derivative. Modules outside
    /// the engine use this for fused kernels.
    pub fn op<'t, F>(&'t self, value: Tensor<T>, parents: &[Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let parent_ids = parents.iter().map(|p| p.id).collect();
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parent_ids,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        })
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let n = self.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        {
            let nodes = self.nodes.borrow();
            let shape = nodes[loss.id].value.shape();
            if nodes[loss.id].value.numel() != 1 {
                return Err(Error::invalid(format!(
                    "backward needs a scalar loss, got shape {shape:?}"
                )));
            }
            grads[loss.id] = Some(Tensor::ones(shape));
        }
        for id in (0..=loss.id).rev() {
            let (backward, parents, needs) = {
                let mut nodes = self.nodes.borrow_mut();
                if grads[id].is_none() || nodes[id].backward.is_none() {
                    continue;
                }
                let parents = nodes[id].parents.clone();
                let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
                (nodes[id].backward.take().unwrap(), parents, needs)
            };
            let g = grads[id].take().unwrap();
            let pgrads = backward(&g, &needs);
            debug_assert_eq!(pgrads.len(), parents.len());
            for ((&p, pg), need) in parents.iter().zip(pgrads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let nodes = self.nodes.borrow();
        for (id, g) in grads.iter_mut().enumerate() {
            if !(nodes[id].requires_grad && nodes[id].parents.is_empty()) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero arrays"))?
            .shape();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            widths.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.op(out, parts, move |g, needs| {
            let mut offset = 0;
            shapes
                .iter()
                .zip(needs)
                .map(|(s, &need)| {
                    let w = s[axis];
                    let r = need.then(|| {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + w * inner]);
                        }
                        Tensor::new(s, d).unwrap()
                    });
                    offset += w;
                    r
                })
                .collect()
        }))
    }
}

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh_fast())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let th = (c * (x + k * x * x * x)).tanh_fast();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// Fallible arithmetic (shape errors) rather than std::ops.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, no gradient path.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf_rc(self.value(), false)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = self.value().broadcast_zip(&other.value(), |x, y| x + y)?;
        Ok(self.tape.op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.reduce_to(&sa).unwrap()),
                needs[1].then(|| g.reduce_to(&sb).unwrap()),
            ]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = self.value().broadcast_zip(&other.value(), |x, y| x - y)?;
        Ok(self.tape.op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.reduce_to(&sa).unwrap()),
                needs[1].then(|| g.map(|x| -x).reduce_to(&sb).unwrap()),
            ]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.broadcast_zip(&b, |x, y| x * y)?;
        Ok(self.tape.op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| sum_to(g.broadcast_zip(&b, |g, y| g * y).unwrap(), a.shape())),
                needs[1].then(|| sum_to(g.broadcast_zip(&a, |g, x| g * x).unwrap(), b.shape())),
            ]
        }))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = Rc::new(a.broadcast_zip(&b, |x, y| x / y)?);
        let q = out.clone();
        let sa = a.shape().to_vec();
        Ok(self.tape.op((*out).clone(), &[self, other], move |g, needs| {
            let ga = g.broadcast_zip(&b, |g, y| g / y).unwrap();
            let gb = needs[1].then(|| sum_to(ga.zip_map(&q, |h, q| -h * q).unwrap(), b.shape()));
            vec![needs[0].then(|| sum_to(ga, &sa)), gb]
        }))
    }

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let out = (*y).clone();
        self.tape.op(out, &[self], move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), d).unwrap())]
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * c);
        self.tape.op(out, &[self], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x + c);
        self.tape.op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| T::of(2.0) * x)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu_fwd, |x, _| gelu_grad(x))
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = Tensor::scalar(v.sum());
        self.tape
            .op(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let from = self.shape();
        let out = self.value().reshape(shape)?;
        Ok(self
            .tape
            .op(out, &[self], move |g, _| vec![Some(g.clone().reshaped(&from))]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self
            .tape
            .op(out, &[self], move |g, _| vec![Some(g.permute(&inverse).unwrap())]))
    }

    /// Reverses the order along `axis`.
    pub fn flip(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("flip axis {axis} out of range for {shape:?}")));
        }
        let out = flip_axis(&v, axis);
        Ok(self.tape.op(out, &[self], move |g, _| vec![Some(flip_axis(g, axis))]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut d = Tensor::zeros(&shape);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                d.data_mut()[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }))
    }

    /// Matrix product. `other` is either a single `[k, n]` matrix applied to
    /// every leading index of `self`, or a batch with the same leading
    /// extents as `self`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let mismatch = || Error::shape("matmul", &sa, &sb);
        if sa.is_empty() || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        if sb.len() == 2 {
            let rows = a.numel() / k.max(1);
            let mut out_shape = sa.clone();
            *out_shape.last_mut().unwrap() = n;
            let mut out = Tensor::zeros(&out_shape);
            gemm(
                rows,
                k,
                n,
                a.data(),
                MatView::row_major(0, k),
                b.data(),
                MatView::row_major(0, n),
                T::zero(),
                out.data_mut(),
                MatView::row_major(0, n),
            );
            return Ok(self.tape.op(out, &[self, other], move |g, needs| {
                let da = needs[0].then(|| {
                    let mut d = Tensor::zeros(a.shape());
                    gemm(
                        rows,
                        n,
                        k,
                        g.data(),
                        MatView::row_major(0, n),
                        b.data(),
                        MatView::row_major(0, n).transposed(),
                        T::zero(),
                        d.data_mut(),
                        MatView::row_major(0, k),
                    );
                    d
                });
                let db = needs[1].then(|| {
                    let mut d = Tensor::zeros(b.shape());
                    gemm(
                        k,
                        rows,
                        n,
                        a.data(),
                        MatView::row_major(0, k).transposed(),
                        g.data(),
                        MatView::row_major(0, n),
                        T::zero(),
                        d.data_mut(),
                        MatView::row_major(0, n),
                    );
                    d
                });
                vec![da, db]
            }));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let m = sa[sa.len() - 2];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                a.data(),
                MatView::row_major(i * m * k, k),
                b.data(),
                MatView::row_major(i * k * n, n),
                T::zero(),
                out.data_mut(),
                MatView::row_major(i * m * n, n),
            );
        }
        Ok(self.tape.op(out, &[self, other], move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = Tensor::zeros(a.shape());
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        MatView::row_major(i * m * n, n),
                        b.data(),
                        MatView::row_major(i * k * n, n).transposed(),
                        T::zero(),
                        d.data_mut(),
                        MatView::row_major(i * m * k, k),
                    );
                }
                d
            });
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros(b.shape());
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        a.data(),
                        MatView::row_major(i * m * k, k).transposed(),
                        g.data(),
                        MatView::row_major(i * m * n, n),
                        T::zero(),
                        d.data_mut(),
                        MatView::row_major(i * k * n, n),
                    );
                }
                d
            });
            vec![da, db]
        }))
    }

    /// `x·W + b` over the last axis, `W: [in, out]`, `b: [out]`.
    pub fn linear(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.grouped_linear_impl(w, b, 1, true, "linear")
    }

    /// `G` independent linear maps writing adjacent output blocks.
    ///
    /// `w: [G, in, out]`, `b: [G, out]`. With `shared_input` every group reads
    /// the same `in`-wide input; otherwise the last axis of `self` holds `G`
    /// consecutive `in`-wide blocks and group `g` reads block `g`. The output's
    /// last axis holds the `G` results back to back (`G·out`).
    pub fn grouped_linear(self, w: Var<'t, T>, b: Var<'t, T>, shared_input: bool) -> Result<Var<'t, T>> {
        let groups = *w.shape().first().unwrap_or(&0);
        self.grouped_linear_impl(w, b, groups, shared_input, "grouped_linear")
    }

    fn grouped_linear_impl(
        self,
        w: Var<'t, T>,
        b: Var<'t, T>,
        groups: usize,
        shared_input: bool,
        name: &'static str,
    ) -> Result<Var<'t, T>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let sx = x.shape().to_vec();
        let sw = wv.shape().to_vec();
        let ws = &sw[sw.len().saturating_sub(2)..];
        if sx.is_empty() || sw.len() < 2 || groups == 0 {
            return Err(Error::shape(name, &sx, &sw));
        }
        let (din, dout) = (ws[0], ws[1]);
        let last = sx[sx.len() - 1];
        let expect_last = if shared_input { din } else { groups * din };
        let w_ok = if name == "linear" {
            sw.len() == 2
        } else {
            sw.len() == 3 && sw[0] == groups
        };
        if last != expect_last || !w_ok {
            return Err(Error::shape(name, &sx, &sw));
        }
        if bv.numel() != groups * dout {
            return Err(Error::shape(name, &sw, bv.shape()));
        }
        let rows = x.numel() / last.max(1);
        let width = groups * dout;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = width;
        let mut out = Tensor::zeros(&out_shape);
        for row in out.data_mut().chunks_mut(width.max(1)) {
            row.copy_from_slice(bv.data());
        }
        let in_view = move |g: usize| MatView {
            offset: if shared_input { 0 } else { g * din },
            rs: last,
            cs: 1,
        };
        let w_view = move |g: usize| MatView::row_major(g * din * dout, dout);
        let out_view = move |g: usize| MatView {
            offset: g * dout,
            rs: width,
            cs: 1,
        };
        for g in 0..groups {
            gemm(
                rows,
                din,
                dout,
                x.data(),
                in_view(g),
                wv.data(),
                w_view(g),
                T::one(),
                out.data_mut(),
                out_view(g),
            );
        }
        Ok(self.tape.op(out, &[self, w, b], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut d = Tensor::zeros(x.shape());
                for grp in 0..groups {
                    gemm(
                        rows,
                        dout,
                        din,
                        g.data(),
                        out_view(grp),
                        wv.data(),
                        w_view(grp).transposed(),
                        T::one(),
                        d.data_mut(),
                        in_view(grp),
                    );
                }
                d
            });
            let dw = needs[1].then(|| {
                let mut d = Tensor::zeros(wv.shape());
                for grp in 0..groups {
                    gemm(
                        din,
                        rows,
                        dout,
                        x.data(),
                        in_view(grp).transposed(),
                        g.data(),
                        out_view(grp),
                        T::zero(),
                        d.data_mut(),
                        w_view(grp),
                    );
                }
                d
            });
            let db = needs[2].then(|| {
                let mut d = Tensor::zeros(bv.shape());
                for row in g.data().chunks(width.max(1)) {
                    for (acc, &v) in d.data_mut().iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                d
            });
            vec![dx, dw, db]
        }))
    }

    /// Normalizes the last axis to zero mean and unit variance. No affine.
    pub fn layer_norm(self, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on a rank-0 array"))?;
        if d == 0 {
            return Err(Error::invalid("layer_norm over an empty axis"));
        }
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = Tensor::zeros(x.shape());
        let mut rstd = Vec::with_capacity(x.numel() / d);
        for (row, out) in x.data().chunks(d).zip(xhat.data_mut().chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let xhat = Rc::new(xhat);
        let saved = xhat.clone();
        Ok(self.tape.op((*xhat).clone(), &[self], move |g, _| {
            let mut dx = Tensor::zeros(g.shape());
            for (((grow, hrow), drow), &r) in g
                .data()
                .chunks(d)
                .zip(saved.data().chunks(d))
                .zip(dx.data_mut().chunks_mut(d))
                .zip(&rstd)
            {
                let mg = grow.iter().copied().sum::<T>() * inv_d;
                let mgh = grow.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                for ((o, &gv), &h) in drow.iter_mut().zip(grow).zip(hrow) {
                    *o = r * (gv - mg - h * mgh);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Row lookup: `self` is a `[V, D]` table, result is `[ids.len(), D]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        let s = table.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("gather_rows needs a [V, D] table, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "row id {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut dt = Tensor::zeros(&s);
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..d {
                    let slot = &mut dt.data_mut()[i * d + c];
                    *slot = *slot + g.data()[r * d + c];
                }
            }
            vec![Some(dt)]
        }))
    }
}

/// Sums a broadcast cotangent back down to the operand shape.
fn sum_to<T: Real>(t: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        t
    } else {
        t.reduce_to(shape).unwrap()
    }
}

fn flip_axis<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(t.numel());
    for o in 0..outer {
        for i in (0..n).rev() {
            let s = (o * n + i) * inner;
            data.extend_from_slice(&t.data()[s..s + inner]);
        }
    }
    Tensor::new(shape, data).unwrap()
}
