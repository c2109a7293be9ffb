use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{axis_geometry, col2im_add, gemm, im2col, ConvGeom};
use super::{Tensor, EPS};
use crate::error::{Error, Result};
use crate::par;

/// Recorded operation. Parent references are node ids, which are always
/// smaller than the id of the node holding them, so reverse id order is a
/// valid reverse topological traversal.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    SumAxis {
        src: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(usize),
    TransposeLast2 {
        src: usize,
        batch: usize,
        m: usize,
        n: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    SoftmaxLast(usize),
    LogSoftmaxLast(usize),
    L2NormalizeLast {
        src: usize,
        norms: Vec<f64>,
    },
    SumNormalizeLast {
        src: usize,
        denoms: Vec<f64>,
        clamped: Vec<bool>,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    AddChannelBias {
        x: usize,
        b: usize,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    AvgPool2d {
        src: usize,
        outer: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    Slice {
        src: usize,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        take: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of differentiable operations.
///
/// A tape is confined to one thread. Values are appended as operations
/// execute; [`Tape::backward`] walks the record once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of every `requires_grad` leaf reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it does not require grad.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros when the leaf did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_flag(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len())
            .map(|i| {
                let n = &nodes[i];
                (matches!(n.op, Op::Leaf) && n.requires_grad)
                    .then(|| Tensor::zeros(n.value.shape()))
            })
            .collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                if let Some(slot) = leaves[id].as_mut() {
                    slot.data_mut().copy_from_slice(&g);
                }
                continue;
            }
            let mut acc = |pid: usize, contrib: Vec<f64>| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            backprop(&nodes, node, &g, &mut acc);
        }
        Ok(Gradients { leaves })
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], acc: &mut impl FnMut(usize, Vec<f64>)) {
    let val = |id: usize| nodes[id].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
            acc(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
        }
        Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
        Op::AddScalar(a) => acc(*a, g.to_vec()),
        Op::MulScalarVar(a, s) => {
            let sv = val(*s)[0];
            let va = val(*a);
            acc(*a, g.iter().map(|x| x * sv).collect());
            acc(*s, vec![g.iter().zip(va).map(|(g, a)| g * a).sum()]);
        }
        Op::Relu(a) => {
            let va = val(*a);
            acc(*a, g.iter().zip(va).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
        }
        Op::Exp(a) => acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
        Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
        Op::Sum(a) => acc(*a, vec![g[0]; nodes[*a].value.numel()]),
        Op::SumAxis {
            src,
            outer,
            len,
            inner,
        } => {
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    let dst = &mut dx[(o * len + l) * inner..][..*inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            acc(*src, dx);
        }
        Op::Reshape(a) => acc(*a, g.to_vec()),
        Op::TransposeLast2 { src, batch, m, n } => {
            acc(*src, transpose_last2(g, *batch, *n, *m));
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..*batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * n };
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..],
                        (n as isize, 1),
                        &vb[boff..],
                        (1, n as isize),
                        0.0,
                        &mut da[bi * m * k..],
                        (k as isize, 1),
                    );
                }
                acc(*a, da);
            }
            if nodes[*b].requires_grad {
                let nb = if *shared_rhs { 1 } else { *batch };
                let mut db = vec![0.0; nb * k * n];
                for bi in 0..*batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * n };
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        &va[bi * m * k..],
                        (1, k as isize),
                        &g[bi * m * n..],
                        (n as isize, 1),
                        1.0,
                        &mut db[boff..],
                        (n as isize, 1),
                    );
                }
                acc(*b, db);
            }
        }
        Op::SoftmaxLast(a) => {
            let w = *nodes[*a].value.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            acc(*a, dx);
        }
        Op::LogSoftmaxLast(a) => {
            let w = *nodes[*a].value.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                let gsum: f64 = gr.iter().sum();
                for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = g - y.exp() * gsum;
                }
            }
            acc(*a, dx);
        }
        Op::L2NormalizeLast { src, norms } => {
            let w = y.len() / norms.len();
            let mut dx = vec![0.0; y.len()];
            for (r, norm) in norms.iter().enumerate() {
                let (yr, gr) = (&y[r * w..][..w], &g[r * w..][..w]);
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dx[r * w..][..w].iter_mut().zip(yr).zip(gr) {
                    *d = (g - y * dot) / norm;
                }
            }
            acc(*src, dx);
        }
        Op::SumNormalizeLast {
            src,
            denoms,
            clamped,
        } => {
            let w = y.len() / denoms.len();
            let mut dx = vec![0.0; y.len()];
            for (r, (den, cl)) in denoms.iter().zip(clamped).enumerate() {
                let (yr, gr) = (&y[r * w..][..w], &g[r * w..][..w]);
                let dot = if *cl {
                    0.0
                } else {
                    yr.iter().zip(gr).map(|(y, g)| y * g).sum()
                };
                for (d, g) in dx[r * w..][..w].iter_mut().zip(gr) {
                    *d = (g - dot) / den;
                }
            }
            acc(*src, dx);
        }
        Op::Conv2d { x, w, geom } => conv2d_backward(nodes, *x, *w, geom, g, acc),
        Op::AddChannelBias {
            x,
            b,
            outer,
            channels,
            inner,
        } => {
            acc(*x, g.to_vec());
            let mut db = vec![0.0; *channels];
            for o in 0..*outer {
                for (c, d) in db.iter_mut().enumerate() {
                    *d += g[(o * channels + c) * inner..][..*inner].iter().sum::<f64>();
                }
            }
            acc(*b, db);
        }
        Op::AvgPool2d {
            src,
            outer,
            h,
            w,
            k,
        } => {
            let (ho, wo) = (h / k, w / k);
            let scale = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; outer * h * w];
            for o in 0..*outer {
                for iy in 0..*h {
                    for ix in 0..*w {
                        dx[(o * h + iy) * w + ix] = g[(o * ho + iy / k) * wo + ix / k] * scale;
                    }
                }
            }
            acc(*src, dx);
        }
        Op::Slice {
            src,
            outer,
            len,
            inner,
            start,
            take,
        } => {
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..*outer {
                let dst = &mut dx[(o * len + start) * inner..][..take * inner];
                dst.copy_from_slice(&g[o * take * inner..][..take * inner]);
            }
            acc(*src, dx);
        }
        Op::Concat {
            parts,
            outer,
            inner,
            total,
        } => {
            let mut offset = 0;
            for &(pid, plen) in parts {
                let mut dp = vec![0.0; outer * plen * inner];
                for o in 0..*outer {
                    dp[o * plen * inner..][..plen * inner]
                        .copy_from_slice(&g[(o * total + offset) * inner..][..plen * inner]);
                }
                offset += plen;
                acc(pid, dp);
            }
        }
    }
}

fn conv2d_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    geom: &ConvGeom,
    g: &[f64],
    acc: &mut impl FnMut(usize, Vec<f64>),
) {
    let xv = nodes[x].value.data();
    let wv = nodes[w].value.data();
    let (plen, plane) = (geom.patch_len(), geom.out_plane());
    if nodes[x].requires_grad {
        let mut dx = vec![0.0; geom.n * geom.in_sample()];
        par::for_each_chunk_mut(&mut dx, geom.in_sample(), |n, dxn| {
            let mut dcols = vec![0.0; plen * plane];
            // dcols = Wᵀ · dY_n
            gemm(
                plen,
                geom.cout,
                plane,
                wv,
                (1, plen as isize),
                &g[n * geom.out_sample()..],
                (plane as isize, 1),
                0.0,
                &mut dcols,
                (plane as isize, 1),
            );
            col2im_add(&dcols, geom, dxn);
        });
        acc(x, dx);
    }
    if nodes[w].requires_grad {
        let per_sample = par::map_indexed(geom.n, |n| {
            let mut cols = vec![0.0; plen * plane];
            im2col(&xv[n * geom.in_sample()..], geom, &mut cols);
            let mut dw = vec![0.0; geom.cout * plen];
            // dW_n = dY_n · colsᵀ
            gemm(
                geom.cout,
                plane,
                plen,
                &g[n * geom.out_sample()..],
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                0.0,
                &mut dw,
                (plen as isize, 1),
            );
            dw
        });
        let mut dw = vec![0.0; geom.cout * plen];
        for part in &per_sample {
            dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        acc(w, dw);
    }
}

fn transpose_last2(src: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let (s, d) = (&src[b * m * n..][..m * n], &mut out[b * m * n..][..m * n]);
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

fn last_width(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Current value (cheap shared handle).
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    /// Scalar value; panics on multi-element vars.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn zip_same(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    /// Multiply every element by a one-element var.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(shape_err("mul_scalar", &self.shape(), sv.shape()));
        }
        let c = sv.item();
        let v = self.value().map(|x| x * c);
        Ok(self.binary(s, v, Op::MulScalarVar(self.id, s.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    /// Natural log; the input must be strictly positive.
    pub fn log(&self) -> Var<'t> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(shape_err("sum_axis", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_geometry(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = x.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                for (t, s) in dst.iter_mut().zip(&d[(o * len + l) * inner..][..inner]) {
                    *t += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(
            Tensor::new(shape, out)?,
            Op::SumAxis {
                src: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(shape_err("transpose", x.shape(), &[]));
        }
        let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
        let batch = x.numel() / (m * n);
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let data = transpose_last2(x.data(), batch, m, n);
        Ok(self.unary(
            Tensor::new(shape, data)?,
            Op::TransposeLast2 {
                src: self.id,
                batch,
                m,
                n,
            },
        ))
    }

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]`
    /// and a shared right operand `[b,m,k]·[k,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let err = || shape_err("matmul", a.shape(), b.shape());
        let (batch, m, k, shared_rhs) = match a.rank() {
            2 => (1, a.shape()[0], a.shape()[1], true),
            3 => (a.shape()[0], a.shape()[1], a.shape()[2], b.rank() == 2),
            _ => return Err(err()),
        };
        let (kb, n) = match (b.rank(), shared_rhs) {
            (2, true) => (b.shape()[0], b.shape()[1]),
            (3, false) if b.shape()[0] == batch => (b.shape()[1], b.shape()[2]),
            _ => return Err(err()),
        };
        if kb != k {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if shared_rhs { 0 } else { bi * k * n };
            gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..],
                (k as isize, 1),
                &b.data()[boff..],
                (n as isize, 1),
                0.0,
                &mut out[bi * m * n..],
                (n as isize, 1),
            );
        }
        let shape = if a.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.binary(
            other,
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        ))
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Var<'t> {
        let x = self.value();
        let w = last_width(x.shape());
        let mut out = x.data().to_vec();
        out.chunks_mut(w).for_each(softmax_in_place);
        let v = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.unary(v, Op::SoftmaxLast(self.id))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let x = self.value();
        let w = last_width(x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(w) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.unary(v, Op::LogSoftmaxLast(self.id))
    }

    /// Scale every row (last axis) to unit L2 norm. Rows with norm at or
    /// below [`EPS`] are rejected.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let x = self.value();
        let w = last_width(x.shape());
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite { op: "l2_normalize" });
            }
            if norm <= EPS {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    norm,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(
            v,
            Op::L2NormalizeLast {
                src: self.id,
                norms,
            },
        ))
    }

    /// Divide every row (last axis) by its sum. A sum whose magnitude is
    /// below [`EPS`] is replaced by `±EPS` (sign preserved, zero counts as
    /// positive) and treated as a constant.
    pub fn sum_normalize(&self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "sum_normalize" });
        }
        let w = last_width(x.shape());
        let mut out = x.data().to_vec();
        let rows = out.len() / w;
        let (mut denoms, mut clamped) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        for row in out.chunks_mut(w) {
            let s: f64 = row.iter().sum();
            let (d, c) = if s.abs() < EPS {
                (if s < 0.0 { -EPS } else { EPS }, true)
            } else {
                (s, false)
            };
            row.iter_mut().for_each(|v| *v /= d);
            denoms.push(d);
            clamped.push(c);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(
            v,
            Op::SumNormalizeLast {
                src: self.id,
                denoms,
                clamped,
            },
        ))
    }

    /// Cross-correlation of `[n,cin,h,w]` (or unbatched `[cin,h,w]`) with
    /// weights `[cout,cin,kh,kw]`. Output extents are `⌊(h+2p−kh)/s⌋+1`.
    pub fn conv2d(&self, weight: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let err = || shape_err("conv2d", x.shape(), w.shape());
        let (n, xs) = match x.rank() {
            3 => (1, x.shape()),
            4 => (x.shape()[0], &x.shape()[1..]),
            _ => return Err(err()),
        };
        if w.rank() != 4 || w.shape()[1] != xs[0] || stride == 0 {
            return Err(err());
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(err());
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let mut out = vec![0.0; n * geom.out_sample()];
        let (xd, wdat) = (x.data(), w.data());
        par::for_each_chunk_mut(&mut out, geom.out_sample(), |i, o| {
            let mut cols = vec![0.0; geom.patch_len() * geom.out_plane()];
            im2col(&xd[i * geom.in_sample()..], &geom, &mut cols);
            gemm(
                cout,
                geom.patch_len(),
                geom.out_plane(),
                wdat,
                (geom.patch_len() as isize, 1),
                &cols,
                (geom.out_plane() as isize, 1),
                0.0,
                o,
                (geom.out_plane() as isize, 1),
            );
        });
        let shape = if x.rank() == 3 {
            vec![cout, geom.ho, geom.wo]
        } else {
            vec![n, cout, geom.ho, geom.wo]
        };
        Ok(self.binary(
            weight,
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
            },
        ))
    }

    /// Add `bias[c]` along axis 1 of a `[n, c, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if x.rank() < 2 || b.rank() != 1 || b.shape()[0] != x.shape()[1] {
            return Err(shape_err("add_channel_bias", x.shape(), b.shape()));
        }
        let (outer, channels, inner) = axis_geometry(x.shape(), 1);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for c in 0..channels {
                let bc = b.data()[c];
                out[(o * channels + c) * inner..][..inner]
                    .iter_mut()
                    .for_each(|v| *v += bc);
            }
        }
        Ok(self.binary(
            bias,
            Tensor::new(x.shape().to_vec(), out)?,
            Op::AddChannelBias {
                x: self.id,
                b: bias.id,
                outer,
                channels,
                inner,
            },
        ))
    }

    /// Non-overlapping `k×k` average pooling over the last two axes.
    pub fn avg_pool2d(&self, k: usize) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 || k == 0 || x.shape()[r - 2] % k != 0 || x.shape()[r - 1] % k != 0 {
            return Err(shape_err("avg_pool2d", x.shape(), &[k, k]));
        }
        let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
        let outer = x.numel() / (h * w);
        let (ho, wo) = (h / k, w / k);
        let mut out = vec![0.0; outer * ho * wo];
        let d = x.data();
        for o in 0..outer {
            for iy in 0..h {
                for ix in 0..w {
                    out[(o * ho + iy / k) * wo + ix / k] += d[(o * h + iy) * w + ix];
                }
            }
        }
        let scale = 1.0 / (k * k) as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = x.shape().to_vec();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(self.unary(
            Tensor::new(shape, out)?,
            Op::AvgPool2d {
                src: self.id,
                outer,
                h,
                w,
                k,
            },
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return Err(shape_err("slice", x.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = axis_geometry(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::new(shape, out)?,
            Op::Slice {
                src: self.id,
                outer,
                len: full,
                inner,
                start,
                take: len,
            },
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Format("concat of zero vars".into()))?;
        let tape = first.tape;
        let base = first.value();
        if axis >= base.rank() {
            return Err(shape_err("concat", base.shape(), &[axis]));
        }
        let (outer, _, inner) = axis_geometry(base.shape(), axis);
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            let compatible = v.rank() == base.rank()
                && v.shape()
                    .iter()
                    .zip(base.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", base.shape(), v.shape()));
            }
            lens.push(v.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        let mut requires_grad = false;
        for (p, &plen) in parts.iter().zip(&lens) {
            let v = p.value();
            for o in 0..outer {
                out[(o * total + offset) * inner..][..plen * inner]
                    .copy_from_slice(&v.data()[o * plen * inner..][..plen * inner]);
            }
            offset += plen;
            requires_grad |= p.requires_grad();
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.iter().zip(&lens).map(|(p, &l)| (p.id, l)).collect(),
            outer,
            inner,
            total,
        };
        Ok(tape.push(Tensor::new(shape, out)?, op, requires_grad))
    }

    /// Copy of this value with no path back to its inputs.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
