use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::optim::{ParamId, ParamStore};
use super::sparse::SparseMatrix;
use super::Tensor;
use crate::{Error, Result, Scalar};
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    ScaleBy(usize, usize),
    ChannelBias { x: usize, bias: usize, channels: usize, inner: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom, col: Vec<T> },
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, T, T),
    Minimum(usize, usize),
    Huber(usize, T),
    Gather { x: usize, index: Vec<usize> },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize, total: usize },
    Reshape(usize),
    Slice { x: usize, outer: usize, len: usize, inner: usize, start: usize },
    SparseLinear { x: usize, matrix: Arc<SparseMatrix> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Parents always precede their children, so walking the node list backwards
/// is a reverse topological order. [`Tape::backward`] does not consume the
/// tape: calling it twice yields identical, freshly accumulated gradients.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    bindings: Vec<Binding>,
}

#[derive(Clone, Copy)]
struct Binding {
    store: u64,
    param: ParamId,
    var: Var,
    trainable: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// While disabled, new leaves and ops are recorded as constants.
    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Runs `f` with gradient recording disabled.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.grad_enabled;
        self.grad_enabled = false;
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted (unless recording is disabled).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.leaf(value, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a stored parameter as a leaf, once per tape and recording mode.
    pub fn bind(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = self.grad_enabled;
        if let Some(b) = self
            .bindings
            .iter()
            .find(|b| b.store == store.uid() && b.param == id && b.trainable == trainable)
        {
            return b.var;
        }
        let var = self.leaf(store.get(id).clone(), trainable);
        self.bindings.push(Binding {
            store: store.uid(),
            param: id,
            var,
            trainable,
        });
        var
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[a.0])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x * c, Op::MulScalar(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `x * s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", &[self.shape(x), self.shape(s)]));
        }
        let sv = self.value(s).item();
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|&v| v * sv).collect(),
        };
        Ok(self.push(value, Op::ScaleBy(x.0, s.0), &[x.0, s.0]))
    }

    /// Adds `bias[c]` along axis 1 of `x` (`B x C x ...`).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::shape("add_channel_bias", &[&shape, self.shape(bias)]));
        }
        let channels = shape[1];
        let inner = numel(&shape[2..]);
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = b[i % channels];
            for v in chunk {
                *v += bc;
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::ChannelBias {
                x: x.0,
                bias: bias.0,
                channels,
                inner,
            },
            &[x.0, bias.0],
        ))
    }

    /// `(m x k) @ (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), (k as isize, 1), self.data(b), (n as isize, 1), T::zero(), &mut data, (n as isize, 1));
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    /// Unit-stride cross-correlation of `x` (`B x C x H x W`) with `w`
    /// (`O x C x k x k`), zero padded by `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &[sx, sw]));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", &[sx, sw]));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            h: sx[2],
            w: sx[3],
            k,
            pad,
            h_out: sx[2] + 2 * pad + 1 - k,
            w_out: sx[3] + 2 * pad + 1 - k,
        };
        let (out, col) = conv2d_forward(self.data(x), self.data(w), &geom);
        let value = Tensor {
            shape: vec![geom.batch, geom.c_out, geom.h_out, geom.w_out],
            data: out,
        };
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, geom, col }, &[x.0, w.0]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a.0))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a.0, lo, hi))
    }

    /// Elementwise Huber function of a residual.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let d = T::of(delta);
        let half = T::of(0.5);
        self.unary(
            a,
            |e| {
                if e.abs() <= d {
                    half * e * e
                } else {
                    d * (e.abs() - half * d)
                }
            },
            Op::Huber(a.0, d),
        )
    }

    /// `mean(huber(pred - target))`.
    pub fn huber_loss(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        let e = self.sub(pred, target)?;
        let h = self.huber(e, delta);
        Ok(self.mean(h))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor { shape, data };
        self.push(value, Op::Gather { x: x.0, index }, &[x.0])
    }

    /// Maximum over `axis`, which is removed. Ties pick the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("max_axis", &[&shape]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut index = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for l in 1..len {
                    let j = base + l * inner;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                index.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.gather(x, out_shape, index))
    }

    /// 2x2 max pooling with stride 2 over the last two axes (`B x C x H x W`,
    /// even `H` and `W`). Ties pick the first element in row-major order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::shape("max_pool2d", &[&shape]));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut index = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    let base = p * h * w + 2 * i * w + 2 * j;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    index.push(best);
                }
            }
        }
        Ok(self.gather(x, vec![shape[0], shape[1], ho, wo], index))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    /// Sum over `axis`, which is removed.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &[&shape]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                for (d, &s) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(value, Op::SumAxis { x: x.0, outer, len, inner }, &[x.0]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", &[&first]));
        }
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == first[i]);
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|&q| self.shape(q)).collect();
                return Err(Error::shape("concat", &shapes));
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let spans: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| (p.0, self.shape(p)[axis] * inner))
            .collect();
        let total: usize = spans.iter().map(|s| s.1).sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for &(id, span) in &spans {
                data.extend_from_slice(&self.nodes[id].value.data[o * span..][..span]);
            }
        }
        let mut shape = first;
        shape[axis] = total / inner.max(1);
        if inner == 0 {
            shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        }
        let value = Tensor { shape, data };
        let ids: Vec<usize> = spans.iter().map(|s| s.0).collect();
        Ok(self.push(value, Op::Concat { parts: spans, outer, total }, &ids))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", &[&shape, &[start, end]]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(value, Op::Slice { x: x.0, outer, len, inner, start }, &[x.0]))
    }

    /// `M vec(x)`, reshaped to `shape`.
    pub fn sparse_linear(&mut self, x: Var, matrix: Arc<SparseMatrix>, shape: &[usize]) -> Result<Var> {
        if self.value(x).numel() != matrix.cols() || numel(shape) != matrix.rows() {
            return Err(Error::shape(
                "sparse_linear",
                &[self.shape(x), &[matrix.rows(), matrix.cols()], shape],
            ));
        }
        let data = matrix.apply(self.data(x));
        let value = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(value, Op::SparseLinear { x: x.0, matrix }, &[x.0]))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |id: usize| nodes[id].value.data();
        // Gradient buffer of a parent, or `None` if it needs no gradient.
        macro_rules! acc {
            ($id:expr) => {{
                let id = $id;
                if nodes[id].requires_grad {
                    Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]))
                } else {
                    None
                }
            }};
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::MulScalar(a, c) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += *c * s);
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[0];
                let vx = val(*x);
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += sv * s);
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += g.iter().zip(vx).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
            Op::ChannelBias { x, bias, channels, inner } => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = acc!(*bias) {
                    for (i, chunk) in g.chunks(*inner).enumerate() {
                        gb[i % channels] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    // dA = G B^T
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), vb, (1, n as isize), T::one(), ga, (k as isize, 1));
                }
                if let Some(gb) = acc!(*b) {
                    // dB = A^T G
                    T::gemm(k, m, n, T::one(), va, (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                }
            }
            Op::Conv2d { x, w, geom, col } => {
                let vw = val(*w);
                let mut dw = if nodes[*w].requires_grad {
                    Some(grads[*w].take().unwrap_or_else(|| vec![T::zero(); vw.len()]))
                } else {
                    None
                };
                let dx = acc!(*x);
                conv2d_backward(g, vw, col, geom, dw.as_deref_mut(), dx.map(|v| v.as_mut_slice()));
                if let Some(dw) = dw {
                    grads[*w] = Some(dw);
                }
            }
            Op::Relu(a) => {
                let va = val(*a);
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        if va[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let va = val(*a);
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / va[i];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        if va[i] > *lo && va[i] < *hi {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let pick_a: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        if pick_a[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..g.len() {
                        if !pick_a[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::Huber(a, d) => {
                let va = val(*a);
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * va[i].max(-*d).min(*d);
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = acc!(*x) {
                    for (o, &i) in index.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let s = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                if let Some(gx) = acc!(*x) {
                    for o in 0..*outer {
                        let src = &g[o * inner..][..*inner];
                        for l in 0..*len {
                            let dst = &mut gx[(o * len + l) * inner..][..*inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, total } => {
                let mut offset = 0;
                for &(id, span) in parts {
                    if let Some(gp) = acc!(id) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..][..span];
                            let dst = &mut gp[o * span..][..span];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += span;
                }
            }
            Op::Slice { x, outer, len, inner, start } => {
                let width = g.len() / outer.max(&1);
                if let Some(gx) = acc!(*x) {
                    for o in 0..*outer {
                        let dst = &mut gx[(o * len + start) * inner..][..width];
                        let src = &g[o * width..][..width];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::SparseLinear { x, matrix } => {
                if let Some(gx) = acc!(*x) {
                    matrix.apply_transpose_add(g, gx);
                }
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for constants and for values the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter of `store` bound on `tape`.
    pub fn for_store(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Vec<(ParamId, Vec<T>)> {
        tape.bindings
            .iter()
            .filter(|b| b.store == store.uid() && b.trainable)
            .filter_map(|b| self.get(b.var).map(|g| (b.param, g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_and_tanh_at_anchors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[-2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0]);
        let l = tape.sum(r);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[0.0]);

        let z = tape.param(t(&[1], &[0.0]));
        let th = tape.tanh(z);
        assert_eq!(tape.value(th).data(), &[0.0]);
        let l = tape.sum(th);
        assert_eq!(tape.backward(l).unwrap().get(z).unwrap(), &[1.0]);
    }

    #[test]
    fn conv_without_padding_is_a_dot_product() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = (1..=9).map(f64::from).collect();
        let ws: Vec<f64> = (1..=9).map(|v| f64::from(v) * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &xs));
        let w = tape.param(t(&[1, 1, 3, 3], &ws));
        let y = tape.conv2d(x, w, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        let dot: f64 = xs.iter().zip(&ws).map(|(a, b)| a * b).sum();
        assert!((tape.value(y).item() - dot).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        let cc = tape.mul(c, c).unwrap();
        let y = tape.mul(cc, p).unwrap();
        let l = tape.sum(y);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(cc).is_none());
        assert_eq!(grads.get(p).unwrap(), &[1.0, 4.0]);
        assert!(!tape.requires_grad(cc));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_gives_identical_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.3, -0.2, 0.5, 0.9]));
        let y = tape.tanh(x);
        let z = tape.matmul(y, x).unwrap();
        let l = tape.sum(z);
        let g1 = tape.backward(l).unwrap().get(x).unwrap().to_vec();
        let g2 = tape.backward(l).unwrap().get(x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn shape_errors_name_the_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[3, 2]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![3, 2]]);
            }
            other => panic!("unexpected {:?}", other.map(|v| v.id())),
        }
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn no_grad_records_constants() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[2.0]));
        let y = tape.no_grad(|tp| tp.mul(x, x).unwrap());
        assert!(!tape.requires_grad(y));
        assert!(tape.grad_enabled());
    }
}
