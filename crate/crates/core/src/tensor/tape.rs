use std::cell::{Ref, RefCell};
use std::ops::Range;

use rand::Rng;

use super::array::{is_suffix, Mask, Tensor};
use super::kernels::{mm_nn, mm_nt, mm_tn};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Relu(Var),
    EluPlusOne(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm(Var, S),
    Dropout(Var, Vec<S>),
    Gather(Var, Vec<usize>),
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    PairwiseDistance(Var, Var),
    RowDistance(Var, Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    /// Some ancestor (or the node itself) is a trainable leaf.
    needs_grad: bool,
    /// Accumulated gradient; only kept for leaves created with `requires_grad`.
    grad: Option<Tensor<S>>,
}

/// Reverse-mode autodiff tape.
///
/// Every operation appends a node; node ids are therefore a topological
/// order, and `backward` walks them in reverse. Gradients are retained on
/// leaves created with `requires_grad = true` and accumulate across repeated
/// `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Trainable leaves receive gradients on `backward`.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn variable(&self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product over the last two dimensions.
    ///
    /// Either side may be a plain 2-D matrix shared across the other side's
    /// batch; otherwise the leading dimensions must agree.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k, p) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let lead: Vec<usize> = match (sa.len(), sb.len()) {
                (2, 2) => Vec::new(),
                (2, _) => sb[..sb.len() - 2].to_vec(),
                (_, 2) => sa[..sa.len() - 2].to_vec(),
                _ if sa[..sa.len() - 2] == sb[..sb.len() - 2] => sa[..sa.len() - 2].to_vec(),
                _ => return Err(Error::shape("matmul", sa, sb)),
            };
            let batch: usize = lead.iter().product();
            let (a_shared, b_shared) = (sa.len() == 2, sb.len() == 2);
            let mut out = vec![S::zero(); batch * m * p];
            for bi in 0..batch {
                let ao = if a_shared { 0 } else { bi * m * k };
                let bo = if b_shared { 0 } else { bi * k * p };
                mm_nn(
                    m,
                    k,
                    p,
                    &ta.data()[ao..ao + m * k],
                    &tb.data()[bo..bo + k * p],
                    &mut out[bi * m * p..(bi + 1) * m * p],
                );
            }
            let mut shape = lead;
            shape.extend([m, p]);
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let t = self.value(x);
            if t.ndim() < 2 {
                return Err(Error::contract("transpose needs at least 2 dimensions"));
            }
            transpose_last2(&t)
        };
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if !is_suffix(ta.shape(), tb.shape()) {
                return Err(Error::shape(name, ta.shape(), tb.shape()));
            }
            let r = tb.numel();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % r]))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, op, &[a, b]))
    }

    /// `a + b`, where `b`'s shape may be a suffix of `a`'s (repeated over the
    /// leading dimensions).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= S::zero() || v.is_nan()) {
            return Err(Error::contract("log of a non-positive value"));
        }
        Ok(self.unary(x, S::ln, Op::Log(x)))
    }

    /// Square root; every input must be strictly positive.
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= S::zero() || v.is_nan()) {
            return Err(Error::contract("sqrt of a non-positive value"));
        }
        Ok(self.unary(x, S::sqrt, Op::Sqrt(x)))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    /// `ELU(x) + 1`: `x + 1` for positive inputs, `exp(x)` otherwise.
    /// Output is strictly positive for every finite input.
    pub fn elu_plus_one(&self, x: Var) -> Var {
        self.unary(x, elu_plus_one, Op::EluPlusOne(x))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, n) = {
            let t = self.value(x);
            (t.data().iter().copied().sum::<S>(), t.numel())
        };
        let m = s / S::from_usize(n.max(1)).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sums over the last dimension: `[.., f] -> [..]`.
    pub fn sum_last(&self, x: Var) -> Var {
        let value = {
            let t = self.value(x);
            let f = t.cols();
            let data = t.data().chunks(f).map(|c| c.iter().copied().sum()).collect();
            let shape = t.shape()[..t.ndim().saturating_sub(1)].to_vec();
            Tensor::new(shape, data).expect("sum_last shape")
        };
        self.push(value, Op::SumLast(x), &[x])
    }

    // ---- normalisation ----------------------------------------------------

    /// Row-wise softmax over the last dimension.
    ///
    /// Entries where `mask` is false come out exactly zero and each row is
    /// normalised over its allowed entries. The mask shape must equal, or be
    /// a suffix of, the input shape. A row with no allowed entry is a
    /// contract violation.
    pub fn softmax_rows(&self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = {
            let t = self.value(x);
            if let Some(m) = mask {
                if !is_suffix(t.shape(), m.shape()) {
                    return Err(Error::shape("softmax_rows mask", t.shape(), m.shape()));
                }
            }
            let f = t.cols();
            let mut out = vec![S::zero(); t.numel()];
            for (r, (row, out_row)) in t.data().chunks(f).zip(out.chunks_mut(f)).enumerate() {
                let allowed = |j: usize| mask.is_none_or(|m| m.get((r * f + j) % m.data().len()));
                let mut max = S::neg_infinity();
                let mut any = false;
                for (j, &v) in row.iter().enumerate() {
                    if allowed(j) {
                        any = true;
                        max = max.max(v);
                    }
                }
                if !any {
                    return Err(Error::contract(format!(
                        "softmax row {r} has no unmasked entry"
                    )));
                }
                let mut total = S::zero();
                for (j, (&v, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
                    if allowed(j) {
                        *o = (v - max).exp();
                        total += *o;
                    }
                }
                for o in out_row.iter_mut() {
                    *o /= total;
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Normalises each row (last dimension) to zero mean and unit variance.
    /// No affine part; compose with [`Tape::mul`]/[`Tape::add`] for gain and bias.
    pub fn layer_norm(&self, x: Var, eps: S) -> Var {
        let value = {
            let t = self.value(x);
            let f = t.cols();
            let nf = S::from_usize(f).unwrap();
            let mut out = Vec::with_capacity(t.numel());
            for row in t.data().chunks(f) {
                let mean = row.iter().copied().sum::<S>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
                let inv = (var + eps).sqrt().recip();
                out.extend(row.iter().map(|&v| (v - mean) * inv));
            }
            Tensor::new(t.shape().to_vec(), out).expect("layer_norm shape")
        };
        self.push(value, Op::LayerNorm(x, eps), &[x])
    }

    /// Inverted dropout. With `rng = None` (evaluation) or `p == 0` this is
    /// the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 - p);
        let (value, mask) = {
            let t = self.value(x);
            let mask: Vec<S> = (0..t.numel())
                .map(|_| {
                    if rng.gen::<f64>() < p {
                        S::zero()
                    } else {
                        keep.recip()
                    }
                })
                .collect();
            let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (Tensor::new(t.shape().to_vec(), data)?, mask)
        };
        Ok(self.push(value, Op::Dropout(x, mask), &[x]))
    }

    // ---- indexing ---------------------------------------------------------

    /// Gathers rows of a 2-D `table`: output is `[ids.len() × cols]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(table);
            if t.ndim() != 2 {
                return Err(Error::contract("gather_rows expects a 2-D table"));
            }
            let (rows, f) = (t.rows(), t.cols());
            let mut out = Vec::with_capacity(ids.len() * f);
            for &id in ids {
                if id >= rows {
                    return Err(Error::contract(format!(
                        "row id {id} out of range for table with {rows} rows"
                    )));
                }
                out.extend_from_slice(t.row(id));
            }
            Tensor::new([ids.len(), f], out)?
        };
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Sub-block over the last two dimensions.
    pub fn slice(&self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let value = {
            let t = self.value(x);
            if t.ndim() < 2 || rows.end > t.rows() || cols.end > t.cols() || rows.start > rows.end || cols.start > cols.end {
                return Err(Error::contract(format!(
                    "slice {rows:?}×{cols:?} out of bounds for {:?}",
                    t.shape()
                )));
            }
            let mut out = Vec::with_capacity(t.batch() * rows.len() * cols.len());
            for b in 0..t.batch() {
                let m = t.matrix(b);
                for r in rows.clone() {
                    out.extend_from_slice(&m[r * t.cols() + cols.start..r * t.cols() + cols.end]);
                }
            }
            let mut shape = t.shape().to_vec();
            let nd = shape.len();
            shape[nd - 2] = rows.len();
            shape[nd - 1] = cols.len();
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::Slice { x, rows, cols }, &[x]))
    }

    /// Concatenates along the last dimension.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .map(|v| &nodes[v.0].value)
                .ok_or_else(|| Error::contract("concat of nothing"))?;
            let lead = &first.shape()[..first.ndim() - 1];
            let mut width = 0;
            for v in parts {
                let s = nodes[v.0].value.shape();
                if &s[..s.len() - 1] != lead {
                    return Err(Error::shape("concat_cols", first.shape(), s));
                }
                width += s[s.len() - 1];
            }
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for v in parts {
                    let t = &nodes[v.0].value;
                    let c = t.cols();
                    out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenates along the second-to-last dimension.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .map(|v| &nodes[v.0].value)
                .ok_or_else(|| Error::contract("concat of nothing"))?;
            if first.ndim() < 2 {
                return Err(Error::contract("concat_rows needs at least 2 dimensions"));
            }
            let nd = first.ndim();
            let mut total_rows = 0;
            for v in parts {
                let s = nodes[v.0].value.shape();
                if s.len() != nd || s[..nd - 2] != first.shape()[..nd - 2] || s[nd - 1] != first.cols() {
                    return Err(Error::shape("concat_rows", first.shape(), s));
                }
                total_rows += s[nd - 2];
            }
            let batch = first.batch();
            let mut out = Vec::with_capacity(batch * total_rows * first.cols());
            for b in 0..batch {
                for v in parts {
                    out.extend_from_slice(nodes[v.0].value.matrix(b));
                }
            }
            let mut shape = first.shape().to_vec();
            shape[nd - 2] = total_rows;
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- distances --------------------------------------------------------

    /// Euclidean distances between every row of `a` (`[.., n, f]`) and every
    /// row of `b` (`[.., m, f]`, or a shared `[m, f]`): output `[.., n, m]`.
    ///
    /// The derivative at a zero distance is taken as zero.
    pub fn pairwise_distance(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (sa, sb) = (ta.shape(), tb.shape());
            let shared = sb.len() == 2;
            if sa.len() < 2 || sb.len() < 2 || ta.cols() != tb.cols() || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
                return Err(Error::shape("pairwise_distance", sa, sb));
            }
            let (n, m, f) = (ta.rows(), tb.rows(), ta.cols());
            let batch = ta.batch();
            let mut out = Vec::with_capacity(batch * n * m);
            for bi in 0..batch {
                let am = ta.matrix(bi);
                let bm = if shared { tb.data() } else { tb.matrix(bi) };
                for i in 0..n {
                    let ar = &am[i * f..(i + 1) * f];
                    for j in 0..m {
                        let br = &bm[j * f..(j + 1) * f];
                        let sq: S = ar.iter().zip(br).map(|(&x, &y)| (x - y) * (x - y)).sum();
                        out.push(sq.sqrt());
                    }
                }
            }
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(m);
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::PairwiseDistance(a, b), &[a, b]))
    }

    /// Euclidean distance between matching rows: `[.., f] × [.., f] -> [..]`.
    /// The derivative at a zero distance is taken as zero.
    pub fn row_distance(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() || ta.ndim() == 0 {
                return Err(Error::shape("row_distance", ta.shape(), tb.shape()));
            }
            let f = ta.cols();
            let data = ta
                .data()
                .chunks(f)
                .zip(tb.data().chunks(f))
                .map(|(x, y)| {
                    x.iter()
                        .zip(y)
                        .map(|(&p, &q)| (p - q) * (p - q))
                        .sum::<S>()
                        .sqrt()
                })
                .collect();
            Tensor::new(ta.shape()[..ta.ndim() - 1].to_vec(), data)?
        };
        Ok(self.push(value, Op::RowDistance(a, b), &[a, b]))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d root / d leaf` into every trainable leaf that `root`
    /// depends on.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if root.0 >= nodes.len() {
            return Err(Error::contract("backward root is not on this tape"));
        }
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        if !nodes[root.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape().to_vec(), S::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = nodes[i].op {
                match &mut nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in backprop(&nodes, i, &g) {
                if !nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn log_sigmoid<S: Scalar>(x: S) -> S {
    // -softplus(-x)
    if x >= S::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn elu_plus_one<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + S::one()
    } else {
        x.exp()
    }
}

fn transpose_last2<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(t.numel());
    for b in 0..t.batch() {
        let m = t.matrix(b);
        for j in 0..c {
            for i in 0..r {
                out.push(m[i * c + j]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let nd = shape.len();
    shape.swap(nd - 1, nd - 2);
    Tensor::new(shape, out).expect("transpose shape")
}

/// Sums a gradient of the broadcast shape back onto the smaller operand.
fn reduce_to<S: Scalar>(g: &[S], shape: &[usize], f: impl Fn(usize, S) -> S) -> Tensor<S> {
    let r: usize = shape.iter().product();
    let mut out = vec![S::zero(); r];
    for (i, &gv) in g.iter().enumerate() {
        out[i % r] += f(i, gv);
    }
    Tensor::new(shape.to_vec(), out).expect("reduce shape")
}

fn map_grad<S: Scalar>(shape: &[usize], g: &[S], f: impl Fn(usize, S) -> S) -> Tensor<S> {
    let data = g.iter().enumerate().map(|(i, &gv)| f(i, gv)).collect();
    Tensor::new(shape.to_vec(), data).expect("grad shape")
}

/// Vector-Jacobian products of node `i` with respect to its inputs.
fn backprop<S: Scalar>(nodes: &[Node<S>], i: usize, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
    let node = &nodes[i];
    let out = &node.value;
    let val = |v: &Var| &nodes[v.0].value;
    let wants = |v: &Var| nodes[v.0].needs_grad;
    let gd = g.data();

    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, p) = (ta.rows(), ta.cols(), tb.cols());
            let batch = out.batch();
            let (a_shared, b_shared) = (ta.ndim() == 2, tb.ndim() == 2);
            let mut res = Vec::new();
            if wants(a) {
                let mut da = vec![S::zero(); ta.numel()];
                for bi in 0..batch {
                    let ao = if a_shared { 0 } else { bi * m * k };
                    let bo = if b_shared { 0 } else { bi * k * p };
                    mm_nt(
                        m,
                        p,
                        k,
                        &gd[bi * m * p..(bi + 1) * m * p],
                        &tb.data()[bo..bo + k * p],
                        &mut da[ao..ao + m * k],
                    );
                }
                res.push((*a, Tensor::new(ta.shape().to_vec(), da).unwrap()));
            }
            if wants(b) {
                let mut db = vec![S::zero(); tb.numel()];
                for bi in 0..batch {
                    let ao = if a_shared { 0 } else { bi * m * k };
                    let bo = if b_shared { 0 } else { bi * k * p };
                    mm_tn(
                        k,
                        m,
                        p,
                        &ta.data()[ao..ao + m * k],
                        &gd[bi * m * p..(bi + 1) * m * p],
                        &mut db[bo..bo + k * p],
                    );
                }
                res.push((*b, Tensor::new(tb.shape().to_vec(), db).unwrap()));
            }
            res
        }
        Op::Transpose(x) => vec![(*x, transpose_last2(g))],
        Op::Add(a, b) => {
            let mut res = vec![(*a, g.clone())];
            if wants(b) {
                res.push((*b, reduce_to(gd, val(b).shape(), |_, v| v)));
            }
            res
        }
        Op::Sub(a, b) => {
            let mut res = vec![(*a, g.clone())];
            if wants(b) {
                res.push((*b, reduce_to(gd, val(b).shape(), |_, v| -v)));
            }
            res
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let r = tb.numel();
            let mut res = Vec::new();
            if wants(a) {
                res.push((*a, map_grad(ta.shape(), gd, |j, v| v * tb.data()[j % r])));
            }
            if wants(b) {
                res.push((*b, reduce_to(gd, tb.shape(), |j, v| v * ta.data()[j])));
            }
            res
        }
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
        Op::Sum(x) => {
            let t = val(x);
            vec![(*x, Tensor::full(t.shape().to_vec(), gd[0]))]
        }
        Op::Mean(x) => {
            let t = val(x);
            let n = S::from_usize(t.numel().max(1)).unwrap();
            vec![(*x, Tensor::full(t.shape().to_vec(), gd[0] / n))]
        }
        Op::SumLast(x) => {
            let t = val(x);
            let f = t.cols();
            vec![(*x, map_grad(t.shape(), t.data(), |j, _| gd[j / f]))]
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            vec![(*x, map_grad(out.shape(), gd, |j, v| v * y[j] * (S::one() - y[j])))]
        }
        Op::LogSigmoid(x) => {
            let xs = val(x).data();
            vec![(*x, map_grad(out.shape(), gd, |j, v| v * sigmoid(-xs[j])))]
        }
        Op::Log(x) => {
            let xs = val(x).data();
            vec![(*x, map_grad(out.shape(), gd, |j, v| v / xs[j]))]
        }
        Op::Relu(x) => {
            let xs = val(x).data();
            vec![(
                *x,
                map_grad(out.shape(), gd, |j, v| if xs[j] > S::zero() { v } else { S::zero() }),
            )]
        }
        Op::EluPlusOne(x) => {
            let xs = val(x).data();
            vec![(
                *x,
                map_grad(out.shape(), gd, |j, v| {
                    if xs[j] > S::zero() {
                        v
                    } else {
                        v * xs[j].exp()
                    }
                }),
            )]
        }
        Op::Sqrt(x) => {
            let y = out.data();
            let half = S::lit(0.5);
            vec![(*x, map_grad(out.shape(), gd, |j, v| v * half / y[j]))]
        }
        Op::Softmax(x) => {
            let y = out.data();
            let f = out.cols();
            let mut dx = vec![S::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks(f).zip(gd.chunks(f)).zip(dx.chunks_mut(f)) {
                let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![(*x, Tensor::new(out.shape().to_vec(), dx).unwrap())]
        }
        Op::LayerNorm(x, eps) => {
            let xs = val(x).data();
            let y = out.data();
            let f = out.cols();
            let nf = S::from_usize(f).unwrap();
            let mut dx = vec![S::zero(); y.len()];
            for (r, dr) in dx.chunks_mut(f).enumerate() {
                let xr = &xs[r * f..(r + 1) * f];
                let yr = &y[r * f..(r + 1) * f];
                let gr = &gd[r * f..(r + 1) * f];
                let mean = xr.iter().copied().sum::<S>() / nf;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
                let inv = (var + *eps).sqrt().recip();
                let g_mean = gr.iter().copied().sum::<S>() / nf;
                let gy_mean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / nf;
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = inv * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![(*x, Tensor::new(out.shape().to_vec(), dx).unwrap())]
        }
        Op::Dropout(x, mask) => vec![(*x, map_grad(out.shape(), gd, |j, v| v * mask[j]))],
        Op::Gather(table, ids) => {
            let t = val(table);
            let f = t.cols();
            let mut dt = vec![S::zero(); t.numel()];
            for (k, &id) in ids.iter().enumerate() {
                for c in 0..f {
                    dt[id * f + c] += gd[k * f + c];
                }
            }
            vec![(*table, Tensor::new(t.shape().to_vec(), dt).unwrap())]
        }
        Op::Slice { x, rows, cols } => {
            let t = val(x);
            let (r, c) = (t.rows(), t.cols());
            let (sr, sc) = (rows.len(), cols.len());
            let mut dt = vec![S::zero(); t.numel()];
            for b in 0..t.batch() {
                for (i, ri) in rows.clone().enumerate() {
                    for (j, cj) in cols.clone().enumerate() {
                        dt[(b * r + ri) * c + cj] += gd[(b * sr + i) * sc + j];
                    }
                }
            }
            vec![(*x, Tensor::new(t.shape().to_vec(), dt).unwrap())]
        }
        Op::ConcatCols(parts) => {
            let width = out.cols();
            let rows = out.numel() / width.max(1);
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for v in parts {
                let t = val(v);
                let c = t.cols();
                if wants(v) {
                    let mut d = Vec::with_capacity(t.numel());
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * width + offset..r * width + offset + c]);
                    }
                    res.push((*v, Tensor::new(t.shape().to_vec(), d).unwrap()));
                }
                offset += c;
            }
            res
        }
        Op::ConcatRows(parts) => {
            let per_out = out.rows() * out.cols();
            let cols = out.cols();
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for v in parts {
                let t = val(v);
                let per = t.rows() * cols;
                if wants(v) {
                    let mut d = Vec::with_capacity(t.numel());
                    for b in 0..out.batch() {
                        let start = b * per_out + offset;
                        d.extend_from_slice(&gd[start..start + per]);
                    }
                    res.push((*v, Tensor::new(t.shape().to_vec(), d).unwrap()));
                }
                offset += per;
            }
            res
        }
        Op::Reshape(x) => {
            let t = val(x);
            vec![(*x, g.clone().reshape(t.shape().to_vec()).unwrap())]
        }
        Op::PairwiseDistance(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let shared = tb.ndim() == 2;
            let (n, m, f) = (ta.rows(), tb.rows(), ta.cols());
            let mut da = vec![S::zero(); ta.numel()];
            let mut db = vec![S::zero(); tb.numel()];
            let dist = out.data();
            for bi in 0..ta.batch() {
                let ao = bi * n * f;
                let bo = if shared { 0 } else { bi * m * f };
                for i in 0..n {
                    for j in 0..m {
                        let k = (bi * n + i) * m + j;
                        let d = dist[k];
                        if d == S::zero() || gd[k] == S::zero() {
                            continue;
                        }
                        let w = gd[k] / d;
                        for c in 0..f {
                            let diff = ta.data()[ao + i * f + c] - tb.data()[bo + j * f + c];
                            da[ao + i * f + c] += w * diff;
                            db[bo + j * f + c] -= w * diff;
                        }
                    }
                }
            }
            vec![
                (*a, Tensor::new(ta.shape().to_vec(), da).unwrap()),
                (*b, Tensor::new(tb.shape().to_vec(), db).unwrap()),
            ]
        }
        Op::RowDistance(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let f = ta.cols();
            let dist = out.data();
            let mut da = vec![S::zero(); ta.numel()];
            for (r, &d) in dist.iter().enumerate() {
                if d == S::zero() {
                    continue;
                }
                let w = gd[r] / d;
                for c in 0..f {
                    da[r * f + c] = w * (ta.data()[r * f + c] - tb.data()[r * f + c]);
                }
            }
            let db = da.iter().map(|&v| -v).collect();
            vec![
                (*a, Tensor::new(ta.shape().to_vec(), da).unwrap()),
                (*b, Tensor::new(tb.shape().to_vec(), db).unwrap()),
            ]
        }
    }
}
