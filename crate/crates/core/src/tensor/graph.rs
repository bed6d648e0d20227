//! Recording graph with reverse-mode differentiation.
//!
//! Every primitive's backward rule is itself written in terms of recorded
//! primitives, so a gradient returned by [`Graph::grad`] is an ordinary graph
//! value and can be differentiated again. [`Graph::hvp`] relies on this.
//!
//! Nodes live in an append-only arena, so node ids are already a topological
//! order. A graph is single-threaded (`!Send`); build one per thread.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Pow(Var, T),
    Ln(Var),
    Softmax(Var),
    Take(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    Reshape(Var),
    Concat(Rc<[Var]>),
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Pow(..) => "pow",
            Op::Ln(..) => "ln",
            Op::Softmax(..) => "softmax",
            Op::Take(..) => "take",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
        }
    }

    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Pow(a, _)
            | Op::Ln(a)
            | Op::Softmax(a)
            | Op::Take(a, _)
            | Op::ScatterAdd(a, _)
            | Op::Reshape(a)
            | Op::Sum(a) => f(*a),
            Op::Concat(xs) => xs.iter().copied().for_each(f),
        }
    }
}

struct Node<T> {
    shape: Rc<[usize]>,
    value: Rc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// The public primitive set, for callers that dispatch by kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Tanh,
    Silu,
    Softmax,
    LayerNorm,
    Mean,
    Sum,
    Square,
    Sqrt,
    Concat,
    Reshape(Vec<usize>),
    /// Rows `start..end` of a 2-D input.
    Slice {
        start: usize,
        end: usize,
    },
    /// Rows of a 2-D table selected by id.
    EmbeddingLookup(Vec<usize>),
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses the parameter-free primitives by name.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "tanh" => Primitive::Tanh,
            "silu" => Primitive::Silu,
            "softmax" => Primitive::Softmax,
            "layer_norm" => Primitive::LayerNorm,
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            "square" => Primitive::Square,
            "sqrt" => Primitive::Sqrt,
            "concat" => Primitive::Concat,
            other => return Err(Error::UnsupportedPrimitive(other.to_string())),
        })
    }
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// For every element of `dst`, the flat index of the element of `src` it
/// broadcasts from. `src` is left-padded with unit dimensions.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::shape(
            "broadcast",
            format!("{src:?} has higher rank than {dst:?}"),
        ));
    }
    let pad = dst.len() - src.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad)
        .chain(src.iter().copied())
        .collect();
    for (s, d) in padded.iter().zip(dst) {
        if *s != 1 && s != d {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {src:?} to {dst:?}"),
            ));
        }
    }
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for k in (0..dst.len()).rev() {
        strides[k] = if padded[k] == 1 { 0 } else { acc };
        acc *= padded[k];
    }
    let total = numel(dst);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for k in (0..dst.len()).rev() {
            idx[k] += 1;
            if idx[k] < dst[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(map)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        std::iter::repeat_n(1, rank - s.len())
            .chain(s.iter().copied())
            .collect()
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(
                "broadcast",
                format!("incompatible shapes {a:?} and {b:?}"),
            )),
        })
        .collect()
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Rc<[usize]>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().fold(true, |ok, x| ok & x.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut requires_grad = false;
        op.for_each_input(|v| requires_grad |= nodes[v.0].requires_grad);
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: tensor.shape().into(),
            value: Rc::new(tensor.data().to_vec()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    /// A differentiable leaf.
    pub fn param(&self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor, true)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(&Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Rc<Vec<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Rc<[usize]> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        Tensor::new(node.shape.to_vec(), node.value.to_vec()).expect("graph values are finite")
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.to_vec()));
        }
        Ok(node.value[0])
    }

    fn unary_map(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        self.push(shape, value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Rc<[usize]>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    // ---- recorded primitives -------------------------------------------

    /// Elementwise sum of equal-shaped inputs.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = va.iter().zip(vb.iter()).map(|(&x, &y)| x + y).collect();
        self.push(shape, value, Op::Add(a, b))
    }

    /// Elementwise product of equal-shaped inputs.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = va.iter().zip(vb.iter()).map(|(&x, &y)| x * y).collect();
        self.push(shape, value, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, factor: T) -> Result<Var> {
        self.unary_map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Result<Var> {
        self.unary_map(x, Op::AddScalar(x), |v| v + c)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_kernel(&self.value(a), &self.value(b), m, k, n);
        self.push(Rc::from([m, n]), value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(v[i * c + j]);
            }
        }
        self.push(Rc::from([c, r]), out, Op::Transpose(x))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, x: Var, exponent: T) -> Result<Var> {
        self.unary_map(x, Op::Pow(x, exponent), |v| v.powf(exponent))
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Ln(x), |v| v.ln())
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let cols = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        if cols > 0 {
            for (row, orow) in v.chunks(cols).zip(out.chunks_mut(cols)) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = 0.0f64;
                for (o, &r) in orow.iter_mut().zip(row) {
                    *o = (r - max).exp();
                    total += o.as_f64();
                }
                let inv = T::of(1.0 / total);
                orow.iter_mut().for_each(|o| *o = *o * inv);
            }
        }
        self.push(shape, out, Op::Softmax(x))
    }

    /// Gathers `x.flat[indices[i]]` into a tensor of the given shape.
    pub fn take(&self, x: Var, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != indices.len() {
            return Err(Error::shape(
                "take",
                format!("{} indices for shape {shape:?}", indices.len()),
            ));
        }
        let v = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape(
                "take",
                format!("index {bad} out of bounds for {} elements", v.len()),
            ));
        }
        let out = indices.iter().map(|&i| v[i]).collect();
        self.push(shape.into(), out, Op::Take(x, indices))
    }

    /// Adjoint of [`take`](Self::take): accumulates `x.flat[i]` into
    /// `out.flat[indices[i]]`, with 64-bit accumulation.
    pub fn scatter_add(&self, x: Var, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != indices.len() {
            return Err(Error::shape(
                "scatter_add",
                format!("{} values for {} indices", v.len(), indices.len()),
            ));
        }
        let n = numel(shape);
        let mut acc = vec![0.0f64; n];
        for (&i, &x) in indices.iter().zip(v.iter()) {
            if i >= n {
                return Err(Error::shape(
                    "scatter_add",
                    format!("index {i} out of bounds for {n} elements"),
                ));
            }
            acc[i] += x.as_f64();
        }
        let out = acc.into_iter().map(T::of).collect();
        self.push(shape.into(), out, Op::ScatterAdd(x, indices))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if numel(&old) != numel(shape) {
            return Err(Error::shape("reshape", format!("{old:?} to {shape:?}")));
        }
        let value = self.value(x).to_vec();
        self.push(shape.into(), value, Op::Reshape(x))
    }

    /// Concatenation along the first axis.
    pub fn concat(&self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("concat input"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs [_, {tail:?}]")));
            }
            rows += s[0];
            value.extend_from_slice(&self.value(x));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(shape.into(), value, Op::Concat(xs.into()))
    }

    /// Sum of all elements (64-bit accumulation), shape `[]`.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        self.push(Rc::from([]), vec![T::of(total)], Op::Sum(x))
    }

    // ---- composites --------------------------------------------------------

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.pow(x, T::of(0.5))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = numel(&self.shape(x));
        if n == 0 {
            return Err(Error::Empty("mean input"));
        }
        let s = self.sum(x)?;
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Σ a ⊙ b.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if &src[..] == shape {
            return Ok(x);
        }
        let map = broadcast_map(&src, shape)?;
        self.take(x, map.into(), shape)
    }

    /// Sums `x` down to `shape`, the inverse of broadcasting.
    pub fn sum_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if &src[..] == shape {
            return Ok(x);
        }
        let map = broadcast_map(shape, &src)?;
        self.scatter_add(x, map.into(), shape)
    }

    fn broadcast_pair(&self, a: Var, b: Var) -> Result<(Var, Var)> {
        let shape = broadcast_shape(&self.shape(a), &self.shape(b))?;
        Ok((self.broadcast_to(a, &shape)?, self.broadcast_to(b, &shape)?))
    }

    /// Addition with numpy-style broadcasting.
    pub fn add_bcast(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.add(a, b)
    }

    pub fn sub_bcast(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.sub(a, b)
    }

    pub fn mul_bcast(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.mul(a, b)
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => return Err(Error::shape("sum_last", "scalar input")),
        }
        self.sum_to(x, &shape)
    }

    pub fn mean_last(&self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        let s = self.sum_last(x)?;
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let mu = self.mean_last(x)?;
        let centered = self.sub_bcast(x, mu)?;
        let sq = self.square(centered)?;
        let var = self.mean_last(sq)?;
        let shifted = self.add_scalar(var, T::of(eps))?;
        let inv = self.pow(shifted, T::of(-0.5))?;
        self.mul_bcast(centered, inv)
    }

    /// `x · W + b` with `x: [m, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bcast(y, b)
    }

    /// Rows `start..end` of a 2-D value.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start > end || end > s[0] {
            return Err(Error::shape(
                "slice",
                format!("rows {start}..{end} of {s:?}"),
            ));
        }
        let cols = s[1];
        let idx: Rc<[usize]> = (start * cols..end * cols).collect();
        self.take(x, idx, &[end - start, cols])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table {s:?} is not 2-D")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidToken(bad));
        }
        let idx: Rc<[usize]> = ids.iter().flat_map(|&r| r * cols..(r + 1) * cols).collect();
        self.take(table, idx, &[ids.len(), cols])
    }

    /// Dispatches one primitive by kind.
    pub fn apply_primitive(&self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    "apply_primitive",
                    format!("{prim:?} takes {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match prim {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale(c) => {
                arity(1)?;
                self.scale(inputs[0], T::of(*c))
            }
            Primitive::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            Primitive::Silu => {
                arity(1)?;
                self.silu(inputs[0])
            }
            Primitive::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            Primitive::LayerNorm => {
                arity(1)?;
                self.layer_norm(inputs[0], 1e-5)
            }
            Primitive::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            Primitive::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            Primitive::Square => {
                arity(1)?;
                self.square(inputs[0])
            }
            Primitive::Sqrt => {
                arity(1)?;
                self.sqrt(inputs[0])
            }
            Primitive::Concat => self.concat(inputs),
            Primitive::Reshape(shape) => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
            Primitive::Slice { start, end } => {
                arity(1)?;
                self.slice_rows(inputs[0], *start, *end)
            }
            Primitive::EmbeddingLookup(ids) => {
                arity(1)?;
                self.embedding(inputs[0], ids)
            }
        }
    }

    // ---- differentiation -----------------------------------------------

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned gradients are recorded on this graph. A target that
    /// `output` does not depend on gets a zero tensor.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out_shape = self.shape(output);
        if numel(&out_shape) != 1 {
            return Err(Error::NotScalar(out_shape.to_vec()));
        }
        let n = output.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        if let Some(start) = wrt.iter().map(|w| w.0).filter(|&i| i < n).min() {
            let nodes = self.nodes.borrow();
            for id in start..n {
                if !relevant[id] {
                    let mut hit = false;
                    nodes[id].op.for_each_input(|v| hit |= relevant[v.0]);
                    relevant[id] = hit;
                }
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        if relevant[output.0] {
            let seed = Tensor::full(&out_shape, T::one());
            grads[output.0] = Some(self.constant(&seed));
        }
        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            self.backprop(Var(id), &op, g, &relevant, &mut grads)?;
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(&Tensor::zeros(&self.shape(w)))),
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Var>], target: Var, g: Var) -> Result<()> {
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    fn backprop(
        &self,
        node: Var,
        op: &Op<T>,
        g: Var,
        relevant: &[bool],
        grads: &mut [Option<Var>],
    ) -> Result<()> {
        let want = |v: Var| relevant[v.0];
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if want(x) {
                        self.accumulate(grads, x, g)?;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let ga = self.mul(g, *b)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if want(*b) {
                    let gb = self.mul(g, *a)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    let ga = self.scale(g, *c)?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) if !want(*a) => {}
            Op::AddScalar(a) => self.accumulate(grads, *a, g)?,
            Op::Reshape(a) => {
                let ga = self.reshape(g, &self.shape(*a))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::MatMul(a, b) => {
                if want(*a) {
                    let bt = self.transpose(*b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if want(*b) {
                    let at = self.transpose(*a)?;
                    let gb = self.matmul(at, g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    let ga = self.transpose(g)?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Tanh(a) => {
                if want(*a) {
                    // g · (1 − y²), written against the output node
                    let y2 = self.square(node)?;
                    let slope = self.scale(y2, -T::one())?;
                    let slope = self.add_scalar(slope, T::one())?;
                    let ga = self.mul(g, slope)?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    let one_minus = self.scale(node, -T::one())?;
                    let one_minus = self.add_scalar(one_minus, T::one())?;
                    let slope = self.mul(node, one_minus)?;
                    let ga = self.mul(g, slope)?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Pow(a, p) => {
                if want(*a) {
                    let lower = self.pow(*a, *p - T::one())?;
                    let slope = self.scale(lower, *p)?;
                    let ga = self.mul(g, slope)?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Ln(a) => {
                if want(*a) {
                    let inv = self.pow(*a, -T::one())?;
                    let ga = self.mul(g, inv)?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    // y ⊙ g − y ⊙ Σ_last(y ⊙ g)
                    let yg = self.mul(node, g)?;
                    let s = self.sum_last(yg)?;
                    let ys = self.mul_bcast(node, s)?;
                    let ga = self.sub(yg, ys)?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Take(a, idx) => {
                if want(*a) {
                    let ga = self.scatter_add(g, idx.clone(), &self.shape(*a))?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::ScatterAdd(a, idx) => {
                if want(*a) {
                    let ga = self.take(g, idx.clone(), &self.shape(*a))?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs.iter() {
                    let shape = self.shape(x);
                    let len = numel(&shape);
                    if want(x) {
                        let idx: Rc<[usize]> = (offset..offset + len).collect();
                        let gx = self.take(g, idx, &shape)?;
                        self.accumulate(grads, x, gx)?;
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let ga = self.broadcast_to(g, &self.shape(*a))?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
        }
        Ok(())
    }

    /// Hessian-vector product `H·v` of `loss` with respect to the
    /// concatenation of `wrt` (row-major, in the given order).
    ///
    /// Differentiates `⟨∇loss, v⟩` with `v` held constant.
    pub fn hvp(&self, loss: Var, wrt: &[Var], vector: &[T]) -> Result<Vec<T>> {
        let total: usize = wrt.iter().map(|&w| numel(&self.shape(w))).sum();
        if vector.len() != total {
            return Err(Error::LengthMismatch {
                expected: total,
                got: vector.len(),
            });
        }
        let grads = self.grad(loss, wrt)?;
        let inner = self.inner_with_constant(&grads, vector)?;
        let hv = self.grad(inner, wrt)?;
        let mut out = Vec::with_capacity(total);
        for h in hv {
            out.extend_from_slice(&self.value(h));
        }
        Ok(out)
    }

    /// `Σ_i ⟨xs[i], v_i⟩` where `v` is split to match the shapes of `xs`.
    pub fn inner_with_constant(&self, xs: &[Var], vector: &[T]) -> Result<Var> {
        let mut offset = 0;
        let mut terms = Vec::with_capacity(xs.len());
        for &x in xs {
            let shape = self.shape(x);
            let len = numel(&shape);
            let chunk = vector
                .get(offset..offset + len)
                .ok_or(Error::LengthMismatch {
                    expected: offset + len,
                    got: vector.len(),
                })?;
            let c = self.constant(&Tensor::new(shape.to_vec(), chunk.to_vec())?);
            terms.push(self.dot(x, c)?);
            offset += len;
        }
        if offset != vector.len() {
            return Err(Error::LengthMismatch {
                expected: offset,
                got: vector.len(),
            });
        }
        let mut acc = match terms.first() {
            Some(&t) => t,
            None => return Ok(self.scalar(T::zero())),
        };
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }
}
