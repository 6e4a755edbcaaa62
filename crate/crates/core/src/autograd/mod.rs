//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records each differentiable operation as it is evaluated. With
//! recording disabled (`Tape::inference`) values are computed eagerly and
//! intermediate tensors are freed as soon as their [`Var`] handles drop.

pub mod conv;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

pub use conv::ConvGeom;

use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Var<T> {
    id: usize,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Sqrt,
    Square,
    Abs,
    Exp,
    Ln,
    /// Standard normal CDF.
    Phi,
    /// `max(x, bound)`; gradient is zero below the bound.
    LowerBound(f64),
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::LeakyRelu(a) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::c(a)
                }
            }
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Phi => T::c(std_normal_cdf(x.f64())),
            Unary::LowerBound(b) => x.max(T::c(b)),
        }
    }

    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::LeakyRelu(a) => {
                if x > T::zero() {
                    one
                } else {
                    T::c(a)
                }
            }
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Sqrt => T::c(0.5) / y,
            Unary::Square => T::c(2.0) * x,
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::Exp => y,
            Unary::Ln => one / x,
            Unary::Phi => T::c(std_normal_pdf(x.f64())),
            Unary::LowerBound(b) => {
                if x >= T::c(b) {
                    one
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Conv { x: Rc<Tensor<T>>, w: Rc<Tensor<T>>, bias: bool, geom: ConvGeom },
    ConvT { x: Rc<Tensor<T>>, w: Rc<Tensor<T>>, bias: bool, geom: ConvGeom },
    Binary { kind: BinaryKind, a: Rc<Tensor<T>>, b: Rc<Tensor<T>>, bmap: Option<Rc<Vec<usize>>> },
    Unary { kind: Unary, x: Rc<Tensor<T>>, y: Rc<Tensor<T>> },
    Scale(T),
    AddScalar,
    Concat { outer: usize, inner: usize, sizes: Vec<usize> },
    Slice { outer: usize, inner: usize, total: usize, start: usize, len: usize },
    Gather { index: Rc<Vec<usize>>, in_shape: Vec<usize> },
    Reshape { in_shape: Vec<usize> },
    Bmm { a: Rc<Tensor<T>>, b: Rc<Tensor<T>>, trans_b: bool },
    Softmax { y: Rc<Tensor<T>> },
    Sum { in_shape: Vec<usize> },
}

struct Record<T> {
    out: usize,
    inputs: Vec<(usize, bool)>,
    op: Op<T>,
}

/// Sentinel in gather index maps producing a zero element.
pub const GATHER_ZERO: usize = usize::MAX;

pub struct Tape<T> {
    records: RefCell<Vec<Record<T>>>,
    next_id: Cell<usize>,
    recording: bool,
    param_leaves: RefCell<Vec<(usize, ParamId)>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            next_id: Cell::new(0),
            recording: true,
            param_leaves: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records; use for evaluation.
    pub fn inference() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn fresh_id(&self) -> usize {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        id
    }

    /// Leaf whose gradient is tracked (for input-gradient checks).
    pub fn var(&self, t: Tensor<T>) -> Var<T> {
        Var { id: self.fresh_id(), value: Rc::new(t), requires_grad: self.recording }
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { id: self.fresh_id(), value: Rc::new(t), requires_grad: false }
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let v = Var { id: self.fresh_id(), value: store.shared(id), requires_grad: self.recording };
        if self.recording {
            self.param_leaves.borrow_mut().push((v.id, id));
        }
        v
    }

    fn emit(&self, value: Tensor<T>, inputs: &[&Var<T>], op: impl FnOnce() -> Op<T>) -> Var<T> {
        self.emit_rc(Rc::new(value), inputs, op)
    }

    fn emit_rc(&self, value: Rc<Tensor<T>>, inputs: &[&Var<T>], op: impl FnOnce() -> Op<T>) -> Var<T> {
        let rg = self.recording && inputs.iter().any(|v| v.requires_grad);
        let id = self.fresh_id();
        if rg {
            self.records.borrow_mut().push(Record {
                out: id,
                inputs: inputs.iter().map(|v| (v.id, v.requires_grad)).collect(),
                op: op(),
            });
        }
        Var { id, value, requires_grad: rg }
    }

    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, geom: ConvGeom) -> Result<Var<T>> {
        let y = conv::conv2d_forward(&x.value, &w.value, b.map(|b| &*b.value), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.emit(y, &inputs, || Op::Conv {
            x: x.value.clone(),
            w: w.value.clone(),
            bias: b.is_some(),
            geom,
        }))
    }

    /// Transposed convolution; kernel layout `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        geom: ConvGeom,
    ) -> Result<Var<T>> {
        let y = conv::conv_t2d_forward(&x.value, &w.value, b.map(|b| &*b.value), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.emit(y, &inputs, || Op::ConvT {
            x: x.value.clone(),
            w: w.value.clone(),
            bias: b.is_some(),
            geom,
        }))
    }

    fn binary(&self, kind: BinaryKind, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let bmap = broadcast_map(a.shape(), b.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let ad = a.value.data();
        let bd = b.value.data();
        let data: Vec<T> = match &bmap {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m.iter()).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        let y = Tensor::from_vec(a.shape(), data)?;
        let bmap = bmap.map(Rc::new);
        Ok(self.emit(y, &[a, b], || Op::Binary { kind, a: a.value.clone(), b: b.value.clone(), bmap }))
    }

    /// `a + b`; `b` may broadcast along any axis where its extent is 1.
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&self, kind: Unary, x: &Var<T>) -> Var<T> {
        let y = Rc::new(x.value.map(|v| kind.apply(v)));
        self.emit_rc(y.clone(), &[x], || Op::Unary { kind, x: x.value.clone(), y })
    }

    pub fn leaky_relu(&self, x: &Var<T>, slope: f64) -> Var<T> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Tanh, x)
    }

    pub fn softplus(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sqrt(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Square, x)
    }

    pub fn abs(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Abs, x)
    }

    pub fn ln(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Ln, x)
    }

    pub fn phi(&self, x: &Var<T>) -> Var<T> {
        self.unary(Unary::Phi, x)
    }

    pub fn lower_bound(&self, x: &Var<T>, bound: f64) -> Var<T> {
        self.unary(Unary::LowerBound(bound), x)
    }

    pub fn scale(&self, x: &Var<T>, s: f64) -> Var<T> {
        let s = T::c(s);
        self.emit(x.value.map(|v| v * s), &[x], || Op::Scale(s))
    }

    pub fn add_scalar(&self, x: &Var<T>, c: f64) -> Var<T> {
        let c = T::c(c);
        self.emit(x.value.map(|v| v + c), &[x], || Op::AddScalar)
    }

    /// Concatenate along axis 1.
    pub fn concat(&self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let shape = first.shape();
        if shape.len() < 2 {
            return Err(shape_err!("concat needs rank >= 2"));
        }
        let outer = shape[0];
        let inner: usize = shape[2..].iter().product();
        let mut sizes = Vec::with_capacity(xs.len());
        for v in xs {
            let s = v.shape();
            if s.len() != shape.len() || s[0] != outer || s[2..] != shape[2..] {
                return Err(shape_err!("concat {:?} with {:?}", shape, s));
            }
            sizes.push(s[1]);
        }
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &c) in xs.iter().zip(&sizes) {
                data.extend_from_slice(&v.value.data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = total;
        let y = Tensor::from_vec(&out_shape, data)?;
        Ok(self.emit(y, xs, || Op::Concat { outer, inner, sizes }))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(shape_err!("slice {}..{} of {:?}", start, start + len, shape));
        }
        let outer = shape[0];
        let total = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&x.value.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = len;
        let y = Tensor::from_vec(&out_shape, data)?;
        Ok(self.emit(y, &[x], || Op::Slice { outer, inner, total, start, len }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&self, x: &Var<T>, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<T>> {
        let n = x.value.len();
        if index.iter().any(|&i| i != GATHER_ZERO && i >= n) {
            return Err(shape_err!("gather index out of range for {:?}", x.shape()));
        }
        let src = x.value.data();
        let data = index.iter().map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i] }).collect();
        let y = Tensor::from_vec(shape, data)?;
        Ok(self.emit(y, &[x], || Op::Gather { index, in_shape: x.shape().to_vec() }))
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let y = (*x.value).clone().reshape(shape)?;
        Ok(self.emit(y, &[x], || Op::Reshape { in_shape: x.shape().to_vec() }))
    }

    /// Batched matmul: `a [B, m, k] x b [B, k, n]`, or `b [B, n, k]` read
    /// transposed when `trans_b`.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let (ab, m, k) = dims3(a.shape())?;
        let (bb, b1, b2) = dims3(b.shape())?;
        let (bk, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ab != bb || bk != k {
            return Err(shape_err!("bmm {:?} x {:?} (trans_b={})", a.shape(), b.shape(), trans_b));
        }
        let mut out = vec![T::zero(); ab * m * n];
        for i in 0..ab {
            let am = MatRef::new(&a.value.data()[i * m * k..(i + 1) * m * k], m, k);
            let bs = &b.value.data()[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { MatRef::t(bs, n, k) } else { MatRef::new(bs, k, n) };
            gemm(am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let y = Tensor::from_vec(&[ab, m, n], out)?;
        Ok(self.emit(y, &[a, b], || Op::Bmm { a: a.value.clone(), b: b.value.clone(), trans_b }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: &Var<T>) -> Var<T> {
        let d = *x.shape().last().unwrap_or(&1);
        let mut y = (*x.value).clone();
        for row in y.data_mut().chunks_mut(d.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(y);
        self.emit_rc(y.clone(), &[x], || Op::Softmax { y })
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let s = x.value.sum();
        self.emit(Tensor::scalar(s), &[x], || Op::Sum { in_shape: x.shape().to_vec() })
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: &Var<T>) -> Result<Grads<T>> {
        if out.value.len() != 1 {
            return Err(shape_err!("backward needs a scalar output, got {:?}", out.shape()));
        }
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        grads.insert(out.id, Tensor::full(out.shape(), T::one()));
        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let g = match grads.remove(&rec.out) {
                Some(g) => g,
                None => continue,
            };
            let need: Vec<bool> = rec.inputs.iter().map(|&(_, rg)| rg).collect();
            let ins = backward_op(&rec.op, &g, &need)?;
            for ((id, _), gi) in rec.inputs.iter().zip(ins) {
                if let Some(gi) = gi {
                    match grads.get_mut(id) {
                        Some(acc) => acc.add_assign(&gi),
                        None => {
                            grads.insert(*id, gi);
                        }
                    }
                }
            }
        }
        Ok(Grads { map: grads, param_leaves: self.param_leaves.borrow().clone() })
    }
}

pub struct Grads<T> {
    map: HashMap<usize, Tensor<T>>,
    param_leaves: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.map.get(&v.id)
    }

    /// Gradients summed per parameter (over every use of the parameter).
    pub fn params(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; store.len()];
        for &(vid, pid) in &self.param_leaves {
            if let Some(g) = self.map.get(&vid) {
                match &mut out[pid.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn dims3(s: &[usize]) -> Result<(usize, usize, usize)> {
    match s[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(shape_err!("expected a 3-D tensor, got {:?}", s)),
    }
}

/// For `b` broadcasting into `a`'s shape, the b-index of every a-element.
/// `None` means identical shapes.
fn broadcast_map(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(shape_err!("cannot broadcast {:?} into {:?}", b, a));
    }
    let nd = a.len();
    let mut bstride = vec![0usize; nd];
    let mut acc = 1;
    for d in (0..nd).rev() {
        bstride[d] = if b[d] == 1 { 0 } else { acc };
        acc *= b[d];
    }
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    for _ in 0..n {
        map.push(idx.iter().zip(&bstride).map(|(i, s)| i * s).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn reduce_to<T: Scalar>(g: Vec<T>, bmap: &Option<Rc<Vec<usize>>>, shape: &[usize]) -> Result<Tensor<T>> {
    match bmap {
        None => Tensor::from_vec(shape, g),
        Some(m) => {
            let mut out = vec![T::zero(); shape.iter().product()];
            for (v, &j) in g.into_iter().zip(m.iter()) {
                out[j] += v;
            }
            Tensor::from_vec(shape, out)
        }
    }
}

fn backward_op<T: Scalar>(op: &Op<T>, g: &Tensor<T>, need: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
    Ok(match op {
        Op::Conv { x, w, bias, geom } => {
            let r = conv::conv2d_backward(x, w, g, *geom, (need[0], need[1], *bias && need[2]))?;
            let mut v = vec![r.x, r.w];
            if *bias {
                v.push(r.b);
            }
            v
        }
        Op::ConvT { x, w, bias, geom } => {
            let r = conv::conv_t2d_backward(x, w, g, *geom, (need[0], need[1], *bias && need[2]))?;
            let mut v = vec![r.x, r.w];
            if *bias {
                v.push(r.b);
            }
            v
        }
        Op::Binary { kind, a, b, bmap } => {
            let gd = g.data();
            let bv = |i: usize| match bmap {
                None => b.data()[i],
                Some(m) => b.data()[m[i]],
            };
            let ga = if need[0] {
                let d: Vec<T> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                    BinaryKind::Mul => gd.iter().enumerate().map(|(i, &gv)| gv * bv(i)).collect(),
                    BinaryKind::Div => gd.iter().enumerate().map(|(i, &gv)| gv / bv(i)).collect(),
                };
                Some(Tensor::from_vec(a.shape(), d)?)
            } else {
                None
            };
            let gb = if need[1] {
                let ad = a.data();
                let d: Vec<T> = match kind {
                    BinaryKind::Add => gd.to_vec(),
                    BinaryKind::Sub => gd.iter().map(|&gv| -gv).collect(),
                    BinaryKind::Mul => gd.iter().zip(ad).map(|(&gv, &av)| gv * av).collect(),
                    BinaryKind::Div => gd
                        .iter()
                        .zip(ad)
                        .enumerate()
                        .map(|(i, (&gv, &av))| {
                            let bi = bv(i);
                            -gv * av / (bi * bi)
                        })
                        .collect(),
                };
                Some(reduce_to(d, bmap, b.shape())?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Unary { kind, x, y } => {
            let d = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                .collect();
            vec![Some(Tensor::from_vec(x.shape(), d)?)]
        }
        Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::Concat { outer, inner, sizes } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for (&c, &nd) in sizes.iter().zip(need) {
                if nd {
                    let mut d = Vec::with_capacity(outer * c * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + c * inner]);
                    }
                    let mut shape = g.shape().to_vec();
                    shape[1] = c;
                    res.push(Some(Tensor::from_vec(&shape, d)?));
                } else {
                    res.push(None);
                }
                offset += c;
            }
            res
        }
        Op::Slice { outer, inner, total, start, len } => {
            let mut d = vec![T::zero(); outer * total * inner];
            for o in 0..*outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            let mut shape = g.shape().to_vec();
            shape[1] = *total;
            vec![Some(Tensor::from_vec(&shape, d)?)]
        }
        Op::Gather { index, in_shape } => {
            let mut d = vec![T::zero(); in_shape.iter().product()];
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != GATHER_ZERO {
                    d[i] += gv;
                }
            }
            vec![Some(Tensor::from_vec(in_shape, d)?)]
        }
        Op::Reshape { in_shape } => vec![Some(g.clone().reshape(in_shape)?)],
        Op::Bmm { a, b, trans_b } => {
            let (bs, m, k) = dims3(a.shape())?;
            let n = g.shape()[2];
            let ga = if need[0] {
                let mut d = vec![T::zero(); a.len()];
                for i in 0..bs {
                    let gm = MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
                    let bsl = &b.data()[i * k * n..(i + 1) * k * n];
                    let bm = if *trans_b { MatRef::new(bsl, n, k) } else { MatRef::t(bsl, k, n) };
                    gemm(gm, bm, T::zero(), &mut d[i * m * k..(i + 1) * m * k]);
                }
                Some(Tensor::from_vec(a.shape(), d)?)
            } else {
                None
            };
            let gb = if need[1] {
                let mut d = vec![T::zero(); b.len()];
                for i in 0..bs {
                    let gsl = &g.data()[i * m * n..(i + 1) * m * n];
                    let asl = &a.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut d[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(MatRef::t(gsl, m, n), MatRef::new(asl, m, k), T::zero(), dst);
                    } else {
                        gemm(MatRef::t(asl, m, k), MatRef::new(gsl, m, n), T::zero(), dst);
                    }
                }
                Some(Tensor::from_vec(b.shape(), d)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Softmax { y } => {
            let d = *y.shape().last().unwrap_or(&1);
            let mut out = vec![T::zero(); y.len()];
            for ((orow, yrow), grow) in
                out.chunks_mut(d.max(1)).zip(y.data().chunks(d.max(1))).zip(g.data().chunks(d.max(1)))
            {
                let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_vec(y.shape(), out)?)]
        }
        Op::Sum { in_shape } => vec![Some(Tensor::full(in_shape, g.data()[0]))],
    })
}
