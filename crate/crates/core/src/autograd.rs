//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted node holding its value, the nodes it was
//! computed from and a closure producing the parents' gradients. Graphs are
//! built eagerly by calling ops; [`Var::backward`] walks them in reverse
//! topological order. Inside [`no_grad`] ops record nothing, so intermediate
//! values are freed as soon as they go out of scope.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Maps the output gradient (plus parents and output value) to one optional
/// gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[Var], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

impl Drop for Node {
    // Long chains would otherwise drop recursively.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id())
    }
}

impl Var {
    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A trainable leaf.
    pub fn parameter(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Records a new node. Gradient tracking only happens when grad mode is
    /// on and at least one parent requires gradients.
    pub fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Tensor, &[Var], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(Var::requires_grad);
        if track {
            Self(Rc::new(Node {
                value,
                requires_grad: true,
                parents,
                backward: Some(Box::new(backward)),
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Backpropagates from this node, seeding it with ones.
    pub fn backward(&self) -> Gradients {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !v.requires_grad() || !visited.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        let mut pending: HashMap<usize, Tensor> = HashMap::new();
        pending.insert(self.id(), Tensor::ones(self.shape()));
        let mut leaves = HashMap::new();
        for v in order.iter().rev() {
            let Some(g) = pending.remove(&v.id()) else {
                continue;
            };
            match &v.0.backward {
                None => {
                    leaves.insert(v.id(), g);
                }
                Some(bw) => {
                    let grads = bw(&g, &v.0.parents, &v.0.value);
                    for (p, pg) in v.0.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                    *a += b;
                                }
                            }
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { map: leaves }
    }

    // ---------------------------------------------------------------
    // elementwise

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value().map(f);
        Var::from_op(value, vec![self.clone()], move |g, p, out| {
            let x = p[0].value().data();
            let data = g
                .data()
                .iter()
                .zip(x)
                .zip(out.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(&self, e: f64) -> Var {
        self.unary(move |x| x.powf(e), move |x, _| e * x.powf(e - 1.0))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        self.unary(move |x| x * s, move |_, _| s)
    }

    /// `max(x, lo)`; the gradient is passed only where `x > lo`.
    pub fn clamp_min(&self, lo: f64) -> Var {
        self.unary(move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    // ---------------------------------------------------------------
    // broadcasting binary ops (numpy rules)

    fn binary(
        &self,
        other: &Var,
        f: fn(f64, f64) -> f64,
        d: fn(f64, f64) -> (f64, f64),
    ) -> Var {
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            let value = Tensor::from_parts(a.shape().to_vec(), data);
            return Var::from_op(value, vec![self.clone(), other.clone()], move |g, p, _| {
                let (a, b) = (p[0].value().data(), p[1].value().data());
                let mut ga = Vec::with_capacity(a.len());
                let mut gb = Vec::with_capacity(a.len());
                for ((g, &x), &y) in g.data().iter().zip(a).zip(b) {
                    let (dx, dy) = d(x, y);
                    ga.push(g * dx);
                    gb.push(g * dy);
                }
                vec![
                    p[0].requires_grad()
                        .then(|| Tensor::from_parts(g.shape().to_vec(), ga)),
                    p[1].requires_grad()
                        .then(|| Tensor::from_parts(g.shape().to_vec(), gb)),
                ]
            });
        }
        let (out_shape, sa_shape, sb_shape) = broadcast_shapes(a.shape(), b.shape());
        let sa = broadcast_strides(&sa_shape, &out_shape);
        let sb = broadcast_strides(&sb_shape, &out_shape);
        let mut data = vec![0.0; out_shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        for_each_index2(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
        let value = Tensor::from_parts(out_shape.clone(), data);
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, p, _| {
            let (a, b) = (p[0].value(), p[1].value());
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            for_each_index2(&out_shape, &sa, &sb, |o, ia, ib| {
                let (dx, dy) = d(ad[ia], bd[ib]);
                ga[ia] += gd[o] * dx;
                gb[ib] += gd[o] * dy;
            });
            vec![
                p[0].requires_grad()
                    .then(|| Tensor::from_parts(a.shape().to_vec(), ga)),
                p[1].requires_grad()
                    .then(|| Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        })
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var) -> Var {
        self.binary(other, f64::min, |a, b| if a <= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var) -> Var {
        self.binary(other, f64::max, |a, b| if a >= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    // ---------------------------------------------------------------
    // reductions

    pub fn sum_all(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(value, vec![self.clone()], |g, p, _| {
            vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    fn reduce(&self, axes: &[usize], max: bool) -> Var {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let so = broadcast_strides(&out_shape, &in_shape);
        let si = contiguous_strides(&in_shape);
        let out_len: usize = out_shape.iter().product();
        let xd = x.data();
        if max {
            let mut best = vec![f64::NEG_INFINITY; out_len];
            let mut arg = vec![usize::MAX; out_len];
            for_each_index2(&in_shape, &si, &so, |i, _, o| {
                if arg[o] == usize::MAX || xd[i] > best[o] {
                    best[o] = xd[i];
                    arg[o] = i;
                }
            });
            let value = Tensor::from_parts(out_shape, best);
            let arg = Rc::new(arg);
            Var::from_op(value, vec![self.clone()], move |g, p, _| {
                let mut gx = vec![0.0; p[0].value().numel()];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g.data()[o];
                }
                vec![Some(Tensor::from_parts(p[0].shape().to_vec(), gx))]
            })
        } else {
            let mut acc = vec![0.0; out_len];
            for_each_index2(&in_shape, &si, &so, |i, _, o| acc[o] += xd[i]);
            let value = Tensor::from_parts(out_shape, acc);
            Var::from_op(value, vec![self.clone()], move |g, p, _| {
                let mut gx = vec![0.0; p[0].value().numel()];
                let gd = g.data();
                for_each_index2(&in_shape, &si, &so, |i, _, o| gx[i] = gd[o]);
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            })
        }
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var {
        self.reduce(axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.reduce(axes, false).mul_scalar(1.0 / count as f64)
    }

    /// Max over `axes` (keepdim). Ties send the gradient to the first maximum.
    pub fn max_axes(&self, axes: &[usize]) -> Var {
        self.reduce(axes, true)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut y = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(y[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..len {
                    let e = (y[base + k * inner] - m).exp();
                    y[base + k * inner] = e;
                    s += e;
                }
                for k in 0..len {
                    y[base + k * inner] /= s;
                }
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        Var::from_op(value, vec![self.clone()], move |g, _, out| {
            let (yd, gd) = (out.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for k in 0..len {
                        dot += gd[base + k * inner] * yd[base + k * inner];
                    }
                    for k in 0..len {
                        let j = base + k * inner;
                        gx[j] = yd[j] * (gd[j] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), gx))]
        })
    }

    // ---------------------------------------------------------------
    // shape ops

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self
            .value()
            .clone()
            .reshape(shape)
            .expect("reshape: element count must match");
        Var::from_op(value, vec![self.clone()], |g, p, _| {
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), g.data().to_vec()))]
        })
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let shape0 = parts[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&shape0, axis);
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), shape0.len(), "concat rank mismatch");
                for (d, (&a, &b)) in s.iter().zip(&shape0).enumerate() {
                    assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {shape0:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let chunk = l * inner;
                data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = shape0;
        out_shape[axis] = total;
        let value = Tensor::from_parts(out_shape, data);
        Var::from_op(value, parts.to_vec(), move |g, p, _| {
            let mut grads: Vec<Vec<f64>> =
                lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gv, &l) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&gd[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(gv, pv)| {
                    pv.requires_grad()
                        .then(|| Tensor::from_parts(pv.shape().to_vec(), gv))
                })
                .collect()
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let xd = self.value().data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Applies a fixed sparse linear map (gathers, resampling, pooling).
    pub fn sparse_map(&self, map: &Rc<SparseMap>) -> Var {
        assert_eq!(self.value().numel(), map.in_len, "sparse map input size");
        let value = map.apply(self.value());
        let map = Rc::clone(map);
        Var::from_op(value, vec![self.clone()], move |g, p, _| {
            vec![Some(map.transpose_apply(g, p[0].shape()))]
        })
    }

    // ---------------------------------------------------------------
    // products and convolutions

    /// Batched matrix product. `self` is `[B, M, K]`; `other` is `[B|1, K, N]`,
    /// or `[B|1, N, K]` when `trans_b`.
    pub fn bmm(&self, other: &Var, trans_b: bool) -> Var {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.rank(), 3, "bmm lhs must be rank 3");
        assert_eq!(b.rank(), 3, "bmm rhs must be rank 3");
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let bb = b.shape()[0];
        assert!(bb == bs || bb == 1, "bmm batch mismatch");
        let (kb, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        assert_eq!(k, kb, "bmm inner dimension mismatch");
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[(if bb == 1 { 0 } else { i }) * k * n..][..k * n];
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            gemm(
                m,
                k,
                n,
                (ai, k as isize, 1),
                (bi, rsb, csb),
                0.0,
                (&mut out[i * m * n..(i + 1) * m * n], n as isize, 1),
            );
        }
        let value = Tensor::from_parts(vec![bs, m, n], out);
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, p, _| {
            let (a, b) = (p[0].value(), p[1].value());
            let gd = g.data();
            let mut ga = p[0].requires_grad().then(|| vec![0.0; a.numel()]);
            let mut gb = p[1].requires_grad().then(|| vec![0.0; b.numel()]);
            for i in 0..bs {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bo = (if bb == 1 { 0 } else { i }) * k * n;
                let bi = &b.data()[bo..bo + k * n];
                if let Some(ga) = ga.as_mut() {
                    // ga = g · b^T  ([M,N] x [N,K])
                    let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    gemm(
                        m,
                        n,
                        k,
                        (gi, n as isize, 1),
                        (bi, rsb, csb),
                        0.0,
                        (&mut ga[i * m * k..(i + 1) * m * k], k as isize, 1),
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb[bo..bo + k * n];
                    if trans_b {
                        // gb = g^T · a  ([N,M] x [M,K])
                        gemm(n, m, k, (gi, 1, n as isize), (ai, k as isize, 1), 1.0, (dst, k as isize, 1));
                    } else {
                        // gb = a^T · g  ([K,M] x [M,N])
                        gemm(k, m, n, (ai, 1, k as isize), (gi, n as isize, 1), 1.0, (dst, n as isize, 1));
                    }
                }
            }
            vec![
                ga.map(|v| Tensor::from_parts(a.shape().to_vec(), v)),
                gb.map(|v| Tensor::from_parts(b.shape().to_vec(), v)),
            ]
        })
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    ///
    /// `self`: `[N, Ci, H, W]`, `weight`: `[Co, Ci, kh, kw]`, `bias`: `[Co]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: (usize, usize)) -> Var {
        let geo = ConvGeometry::new(self.shape(), weight.shape(), stride, pad);
        let x = self.value();
        let w = weight.value();
        let ConvGeometry { n, co, ho, wo, .. } = geo;
        let (kk, pp) = (geo.patch(), ho * wo);
        let mut out = vec![0.0; n * co * pp];
        let in_len = geo.ci * geo.h * geo.w;
        let mut cols = Vec::new();
        for b in 0..n {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let src = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols[..]
            };
            gemm(
                co,
                kk,
                pp,
                (w.data(), kk as isize, 1),
                (src, pp as isize, 1),
                0.0,
                (&mut out[b * co * pp..(b + 1) * co * pp], pp as isize, 1),
            );
        }
        if let Some(bias) = bias {
            let bd = bias.value().data();
            assert_eq!(bd.len(), co, "conv bias length");
            for b in 0..n {
                for (c, &bv) in bd.iter().enumerate() {
                    for v in &mut out[(b * co + c) * pp..(b * co + c + 1) * pp] {
                        *v += bv;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, co, ho, wo], out);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(value, parents, move |g, p, _| {
            let x = p[0].value();
            let w = p[1].value();
            let gd = g.data();
            let mut gx = p[0].requires_grad().then(|| vec![0.0; x.numel()]);
            let mut gw = p[1].requires_grad().then(|| vec![0.0; w.numel()]);
            let mut cols = Vec::new();
            let mut gcols = vec![0.0; if geo.is_pointwise() { 0 } else { kk * pp }];
            for b in 0..n {
                let gb = &gd[b * co * pp..(b + 1) * co * pp];
                let xb = &x.data()[b * in_len..(b + 1) * in_len];
                if let Some(gw) = gw.as_mut() {
                    let src = if geo.is_pointwise() {
                        xb
                    } else {
                        geo.im2col(xb, &mut cols);
                        &cols[..]
                    };
                    // gw += g · cols^T
                    gemm(co, pp, kk, (gb, pp as isize, 1), (src, 1, pp as isize), 1.0, (gw, kk as isize, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[b * in_len..(b + 1) * in_len];
                    if geo.is_pointwise() {
                        gemm(kk, co, pp, (w.data(), 1, kk as isize), (gb, pp as isize, 1), 1.0, (dst, pp as isize, 1));
                    } else {
                        gemm(kk, co, pp, (w.data(), 1, kk as isize), (gb, pp as isize, 1), 0.0, (&mut gcols, pp as isize, 1));
                        geo.col2im(&gcols, dst);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
                gw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
            ];
            if p.len() == 3 {
                let gbias = p[2].requires_grad().then(|| {
                    let mut acc = vec![0.0; co];
                    for b in 0..n {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += gd[(b * co + c) * pp..(b * co + c + 1) * pp].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_parts(vec![co], acc)
                });
                grads.push(gbias);
            }
            grads
        })
    }

    /// Single-channel 3-D convolution treating `[N, C, H, W]` as `N` volumes of
    /// depth `C`. `kernel` is `[kd, kh, kw]` with odd extents, zero padding keeps
    /// the volume shape; `bias` is `[1]`.
    pub fn conv3d_volume(&self, kernel: &Var, bias: Option<&Var>) -> Var {
        let x = self.value();
        let (n, d, h, w) = x.dims4();
        let ks = kernel.value().shape().to_vec();
        assert_eq!(ks.len(), 3, "volume kernel must be rank 3");
        assert!(ks.iter().all(|k| k % 2 == 1), "volume kernel extents must be odd");
        let vol = VolumeGeometry { n, d, h, w, kd: ks[0], kh: ks[1], kw: ks[2] };
        let mut out = vec![bias.map_or(0.0, |b| b.value().data()[0]); x.numel()];
        vol.forward(x.data(), kernel.value().data(), &mut out);
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(value, parents, move |g, p, _| {
            let x = p[0].value();
            let k = p[1].value();
            let gx = p[0].requires_grad().then(|| {
                let mut gx = vec![0.0; x.numel()];
                vol.backward_input(g.data(), k.data(), &mut gx);
                Tensor::from_parts(x.shape().to_vec(), gx)
            });
            let gk = p[1].requires_grad().then(|| {
                let mut gk = vec![0.0; k.numel()];
                vol.backward_kernel(g.data(), x.data(), &mut gk);
                Tensor::from_parts(k.shape().to_vec(), gk)
            });
            let mut grads = vec![gx, gk];
            if p.len() == 3 {
                grads.push(p[2].requires_grad().then(|| Tensor::scalar(g.sum())));
            }
            grads
        })
    }
}

impl Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        Var::div(self, rhs)
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

// -------------------------------------------------------------------
// sparse linear maps

/// `out[o] = Σ weights[j] · in[indices[j]]` for `j` in `offsets[o]..offsets[o+1]`.
#[derive(Debug, Clone)]
pub struct SparseMap {
    pub out_shape: Vec<usize>,
    pub in_len: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    /// Pure gather: `out[o] = in[index[o]]`.
    pub fn gather(out_shape: Vec<usize>, in_len: usize, index: Vec<usize>) -> Self {
        debug_assert_eq!(index.len(), out_shape.iter().product::<usize>());
        let n = index.len();
        Self {
            out_shape,
            in_len,
            offsets: (0..=n).collect(),
            weights: vec![1.0; n],
            indices: index,
        }
    }

    /// Builds a map row by row from `(input index, weight)` taps.
    pub fn from_rows(out_shape: Vec<usize>, in_len: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (i, w) in row {
                indices.push(i);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        debug_assert_eq!(offsets.len() - 1, out_shape.iter().product::<usize>());
        Self { out_shape, in_len, offsets, indices, weights }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let xd = x.data();
        let data = self
            .offsets
            .windows(2)
            .map(|r| (r[0]..r[1]).map(|j| self.weights[j] * xd[self.indices[j]]).sum())
            .collect();
        Tensor::from_parts(self.out_shape.clone(), data)
    }

    fn transpose_apply(&self, g: &Tensor, in_shape: &[usize]) -> Tensor {
        let mut gx = vec![0.0; self.in_len];
        for (o, r) in self.offsets.windows(2).enumerate() {
            let gv = g.data()[o];
            for j in r[0]..r[1] {
                gx[self.indices[j]] += self.weights[j] * gv;
            }
        }
        Tensor::from_parts(in_shape.to_vec(), gx)
    }
}

// -------------------------------------------------------------------
// helpers

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Strides of `shape` read at positions of `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(base)
        .map(|((&s, &o), st)| if s == 1 && o != 1 { 0 } else { st })
        .collect()
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let out = pa
        .iter()
        .zip(&pb)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect();
    (out, pa, pb)
}

/// Calls `f(flat_out, index_a, index_b)` for every position of `out`.
fn for_each_index2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out.len();
    if out.iter().product::<usize>() == 0 {
        return;
    }
    let (last, la, lb) = (out[r - 1], sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let mut o = 0;
    loop {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..r - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for k in 0..last {
            f(o, ia + k * la, ib + k * lb);
            o += 1;
        }
        let mut d = r - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// `c = a · b + beta · c` over strided views.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.0.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given extents and
    // strides (asserted above for the contiguous layouts used in this module).
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.0.as_mut_ptr(), c.1, c.2,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: (usize, usize)) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [N,C,H,W], got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be [Co,Ci,kh,kw], got {w:?}");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(stride >= 1);
        let (h, wd) = (x[2] + 2 * pad.0, x[3] + 2 * pad.1);
        assert!(h >= w[2] && wd >= w[3], "conv2d kernel larger than padded input");
        Self {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            ph: pad.0,
            pw: pad.1,
            ho: (h - w[2]) / stride + 1,
            wo: (wd - w[3]) / stride + 1,
        }
    }

    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut Vec<f64>) {
        let pp = self.ho * self.wo;
        cols.clear();
        cols.resize(self.patch() * pp, 0.0);
        let mut row = 0;
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut cols[row * pp..(row + 1) * pp];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + j) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let pp = self.ho * self.wo;
        let mut row = 0;
        for c in 0..self.ci {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &cols[row * pp..(row + 1) * pp];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + j) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct VolumeGeometry {
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
}

impl VolumeGeometry {
    /// Visits every (output row, input row, kernel row) triple that overlaps,
    /// with the valid column range for each kernel column offset.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (pd, ph) = (self.kd / 2, self.kh / 2);
        for b in 0..self.n {
            for a in 0..self.kd {
                for bb in 0..self.kh {
                    let krow = (a * self.kh + bb) * self.kw;
                    for z in 0..self.d {
                        let iz = z as isize + a as isize - pd as isize;
                        if iz < 0 || iz >= self.d as isize {
                            continue;
                        }
                        for y in 0..self.h {
                            let iy = y as isize + bb as isize - ph as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let orow = ((b * self.d + z) * self.h + y) * self.w;
                            let irow = ((b * self.d + iz as usize) * self.h + iy as usize) * self.w;
                            f(orow, irow, krow);
                        }
                    }
                }
            }
        }
    }

    fn col_range(&self, c: usize) -> (usize, usize, isize) {
        let off = c as isize - (self.kw / 2) as isize;
        let lo = (-off).max(0) as usize;
        let hi = (self.w as isize - off).min(self.w as isize).max(0) as usize;
        (lo, hi, off)
    }

    fn forward(&self, x: &[f64], k: &[f64], out: &mut [f64]) {
        self.for_each_row(|orow, irow, krow| {
            for c in 0..self.kw {
                let kv = k[krow + c];
                if kv == 0.0 {
                    continue;
                }
                let (lo, hi, off) = self.col_range(c);
                if lo >= hi {
                    continue;
                }
                let src = &x[(irow as isize + lo as isize + off) as usize..][..hi - lo];
                let dst = &mut out[orow + lo..orow + hi];
                for (o, i) in dst.iter_mut().zip(src) {
                    *o += kv * i;
                }
            }
        });
    }

    fn backward_input(&self, g: &[f64], k: &[f64], gx: &mut [f64]) {
        self.for_each_row(|orow, irow, krow| {
            for c in 0..self.kw {
                let kv = k[krow + c];
                if kv == 0.0 {
                    continue;
                }
                let (lo, hi, off) = self.col_range(c);
                if lo >= hi {
                    continue;
                }
                let src = &g[orow + lo..orow + hi];
                let dst = &mut gx[(irow as isize + lo as isize + off) as usize..][..hi - lo];
                for (o, i) in dst.iter_mut().zip(src) {
                    *o += kv * i;
                }
            }
        });
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], gk: &mut [f64]) {
        self.for_each_row(|orow, irow, krow| {
            for c in 0..self.kw {
                let (lo, hi, off) = self.col_range(c);
                if lo >= hi {
                    continue;
                }
                let gs = &g[orow + lo..orow + hi];
                let xs = &x[(irow as isize + lo as isize + off) as usize..][..hi - lo];
                gk[krow + c] += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        });
    }
}
