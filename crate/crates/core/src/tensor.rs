//! Dense f32 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] replays the
//! nodes in reverse order and accumulates gradients additively. Handles to
//! recorded values are plain [`Var`] indices, so graphs are built with explicit
//! calls such as `tape.matmul(a, b)?`.

use rand::Rng;

use crate::error::{contract, Error, Result};

/// A dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Like [`Tensor::new`] but admits non-finite values, e.g. from a diagnostic dump.
    pub fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-place parameter updates.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, s: f32 },
    MulConst { a: Var, c: Vec<f32> },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    ClampMin { a: Var, floor: f32 },
    Softmax { a: Var, outer: usize, axis: usize, inner: usize },
    MaskedSoftmax { a: Var, lk: usize },
    LogSoftmax { a: Var },
    Concat { inputs: Vec<Var>, outer: usize, inner: usize },
    Slice { a: Var, outer: usize, axis: usize, inner: usize, start: usize, len: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Pick { a: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, count: usize, probs: Vec<f32> },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    nan_guard: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c (+)= op(a) · op(b)` for logical shapes `[m×k]·[k×n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps every output linear index of a permutation to its input linear index.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n = numel(in_shape);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    map
}

fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Abort with the offending op name on the first non-finite output.
    pub fn with_nan_guard(mut self, on: bool) -> Self {
        self.nan_guard = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: self.grad(v).map(|g| g.to_vec()),
            requires_grad: n.requires_grad,
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f32>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.nan_guard && value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        self.push("constant", shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `[B×m×k]·[B×k×n]`, or `[B×m×k]·[B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds `bias[n]` to every length-`n` row of `a[...×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sb[0];
        let bv = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_row", sa, out, Op::AddRow { a, bias }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale { a, s }, rg)
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&mut self, a: Var, c: Vec<f32>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        let rg = self.rg(a);
        self.push("mul_const", self.shape(a).to_vec(), out, Op::MulConst { a, c }, rg)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(name, self.shape(a).to_vec(), out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f32::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu { a })
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Result<Var> {
        self.map("clamp_min", a, |x| x.max(floor), Op::ClampMin { a, floor })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return contract(format!("softmax axis {axis} invalid for shape {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.rg(a);
        self.push("softmax", shape, out, Op::Softmax { a, outer, axis: len, inner }, rg)
    }

    /// Softmax over the last axis of `a[G·repeat × lq × lk]` restricted to
    /// keys where `mask[G × lq × lk]` is true. Masked entries are exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>, lq: usize, lk: usize, repeat: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let total = numel(&shape);
        if shape.last() != Some(&lk) || lq == 0 || repeat == 0 || total % (lq * lk * repeat) != 0 {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![lq, lk, repeat],
            });
        }
        let groups = total / (lq * lk * repeat);
        if mask.len() != groups * lq * lk {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let x = self.value(a);
        let mut out = vec![0.0; total];
        for r in 0..total / lk {
            let (mat, q) = (r / lq, r % lq);
            let mrow = &mask[((mat / repeat) * lq + q) * lk..][..lk];
            let row = &x[r * lk..(r + 1) * lk];
            let mut max = f32::NEG_INFINITY;
            for j in 0..lk {
                if mrow[j] {
                    max = max.max(row[j]);
                }
            }
            if !mrow.iter().any(|&m| m) {
                return contract("no attendable key for attention query row");
            }
            if !max.is_finite() {
                return Err(Error::NonFinite { op: "masked_softmax" });
            }
            let o = &mut out[r * lk..(r + 1) * lk];
            let mut sum = 0.0;
            for j in 0..lk {
                if mrow[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(
            "masked_softmax",
            shape,
            out,
            Op::MaskedSoftmax { a, lk },
            rg,
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 {
            return contract("log_softmax needs a non-empty last axis");
        }
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_row(row, o);
        }
        let rg = self.rg(a);
        self.push("log_softmax", shape, out, Op::LogSoftmax { a }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return contract("concat of zero tensors"),
        };
        if axis >= first.len() {
            return contract(format!("concat axis {axis} invalid for shape {first:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            shape,
            out,
            Op::Concat { inputs: inputs.to_vec(), outer, inner },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * alen + start) * inner..(o * alen + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(a);
        self.push(
            "slice",
            oshape,
            out,
            Op::Slice { a, outer, axis: alen, inner, start, len },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let map = permute_index(&shape, perm);
        let x = self.value(a);
        let out = map.iter().map(|&i| x[i]).collect();
        let oshape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        self.push("permute", oshape, out, Op::Permute { a, perm: perm.to_vec() }, rg)
    }

    /// Gathers rows of `table[V×d]`; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s,
                rhs: vec![],
            });
        }
        let (v, d) = (s[0], s[1]);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Per-row normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        )
    }

    /// Inverted dropout: keeps each entry with probability `1 - p` and rescales.
    pub fn dropout(&mut self, a: Var, p: f32, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return contract("dropout probability must be < 1");
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(a).len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    /// Selects `a[i, idx[i]]` from `a[N×V]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::Shape {
                op: "pick",
                lhs: s,
                rhs: vec![idx.len()],
            });
        }
        let v = s[1];
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= v {
                return Err(Error::Index {
                    what: "pick",
                    index: i,
                    bound: v,
                });
            }
            out.push(x[r * v + i]);
        }
        let rg = self.rg(a);
        self.push("pick", vec![idx.len()], out, Op::Pick { a, idx: idx.to_vec() }, rg)
    }

    /// Mean negative log-softmax probability of `targets` over rows whose
    /// target differs from `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let n = s[1];
        for &t in targets {
            if t != ignore_index && t >= n {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: n,
                });
            }
        }
        let count = targets.iter().filter(|&&t| t != ignore_index).count();
        if count == 0 {
            return contract("no effective targets");
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0f64;
        let mut lp = vec![0.0; n];
        for (r, &t) in targets.iter().enumerate() {
            log_softmax_row(&x[r * n..(r + 1) * n], &mut lp);
            for j in 0..n {
                probs[r * n + j] = lp[j].exp();
            }
            if t != ignore_index {
                total -= lp[t] as f64;
            }
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_index,
                count,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().map(|&x| x as f64).sum::<f64>() as f32;
        let rg = self.rg(a);
        self.push("sum", vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return contract("mean of empty tensor");
        }
        let s = (self.value(a).iter().map(|&x| x as f64).sum::<f64>() / n as f64) as f32;
        let rg = self.rg(a);
        self.push("mean", vec![], vec![s], Op::Mean { a }, rg)
    }

    /// Reverse pass from a scalar loss. Gradients are readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return contract(format!(
                "backward called on non-scalar of shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.as_slice();
        fn buf(grads: &mut [Option<Vec<f32>>], v: Var, n: usize) -> &mut Vec<f32> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if rg(a) {
                    let ga = buf(grads, a, m * k);
                    gemm(m, n, k, g, false, val(b), true, ga, true);
                }
                if rg(b) {
                    let gb = buf(grads, b, k * n);
                    gemm(k, m, n, val(a), true, g, false, gb, true);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                if rg(a) {
                    let ga = buf(grads, a, batch * m * k);
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &val(b)[t * k * n..(t + 1) * k * n];
                        // dA = dC · Bᵀ (or dC · B when B was transposed)
                        gemm(m, n, k, gs, false, bs, !trans_b, &mut ga[t * m * k..(t + 1) * m * k], true);
                    }
                }
                if rg(b) {
                    let gb = buf(grads, b, batch * k * n);
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &val(a)[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // B stored [n×k]: dB = dCᵀ · A
                            gemm(n, m, k, gs, true, as_, false, out, true);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, out, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if rg(v) {
                        buf(grads, v, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if rg(a) {
                    buf(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(b) {
                    buf(grads, b, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    let other = val(b);
                    let ga = buf(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * other[j];
                    }
                }
                if rg(b) {
                    let other = val(a);
                    let gb = buf(grads, b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * other[j];
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                if rg(a) {
                    buf(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(bias) {
                    let n = len(bias);
                    let gb = buf(grads, bias, n);
                    for (j, y) in g.iter().enumerate() {
                        gb[j % n] += y;
                    }
                }
            }
            &Op::Scale { a, s } => {
                if rg(a) {
                    buf(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::MulConst { a, c } => {
                if rg(*a) {
                    let ga = buf(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * c[j];
                    }
                }
            }
            &Op::Tanh { a } => {
                if rg(a) {
                    let y = &node.value;
                    let ga = buf(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            &Op::Sigmoid { a } => {
                if rg(a) {
                    let y = &node.value;
                    let ga = buf(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            &Op::Relu { a } => {
                if rg(a) {
                    let x = val(a);
                    let ga = buf(grads, a, g.len());
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            &Op::ClampMin { a, floor } => {
                if rg(a) {
                    let x = val(a);
                    let ga = buf(grads, a, g.len());
                    for j in 0..g.len() {
                        if x[j] > floor {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            &Op::Softmax { a, outer, axis, inner } => {
                if rg(a) {
                    let y = &node.value;
                    let ga = buf(grads, a, g.len());
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let idx = |j: usize| (o * axis + j) * inner + i2;
                            let dot: f32 = (0..axis).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..axis {
                                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::MaskedSoftmax { a, lk } => {
                if rg(a) {
                    let y = &node.value;
                    let ga = buf(grads, a, g.len());
                    for r in 0..g.len() / lk {
                        let (ys, gs) = (&y[r * lk..(r + 1) * lk], &g[r * lk..(r + 1) * lk]);
                        let dot: f32 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..lk {
                            ga[r * lk + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                if rg(a) {
                    let n = *node.shape.last().unwrap();
                    let y = &node.value;
                    let ga = buf(grads, a, g.len());
                    for r in 0..g.len() / n {
                        let gs = &g[r * n..(r + 1) * n];
                        let total: f32 = gs.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += gs[j] - y[r * n + j].exp() * total;
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = node.value.len() / (outer * inner);
                let mut offset = 0;
                for &v in inputs {
                    let alen = len(v) / (outer * inner);
                    if rg(v) {
                        let gv = buf(grads, v, len(v));
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + alen) * inner];
                            gv[o * alen * inner..(o + 1) * alen * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += alen;
                }
            }
            &Op::Slice { a, outer, axis, inner, start, len: l } => {
                if rg(a) {
                    let ga = buf(grads, a, outer * axis * inner);
                    for o in 0..outer {
                        let dst = &mut ga[(o * axis + start) * inner..(o * axis + start + l) * inner];
                        dst.iter_mut()
                            .zip(&g[o * l * inner..(o + 1) * l * inner])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Reshape { a } => {
                if rg(a) {
                    buf(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Permute { a, perm } => {
                if rg(*a) {
                    let map = permute_index(&nodes[a.0].shape, perm);
                    let ga = buf(grads, *a, g.len());
                    for (o, &src) in map.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = nodes[table.0].shape[1];
                    let gt = buf(grads, *table, len(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = nodes[gain.0].value.len();
                let gv = val(*gain);
                if rg(*gain) {
                    let gg = buf(grads, *gain, d);
                    for (j, (gy, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += gy * h;
                    }
                }
                if rg(*bias) {
                    let gb = buf(grads, *bias, d);
                    for (j, gy) in g.iter().enumerate() {
                        gb[j % d] += gy;
                    }
                }
                if rg(*x) {
                    let gx = buf(grads, *x, g.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gs = &g[r * d..(r + 1) * d];
                        let hs = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gs[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hs[j];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        for j in 0..d {
                            let dh = gs[j] * gv[j];
                            gx[r * d + j] += rs * (dh - m1 - hs[j] * m2);
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                if rg(*a) {
                    let v = nodes[a.0].shape[1];
                    let ga = buf(grads, *a, len(*a));
                    for (r, &i2) in idx.iter().enumerate() {
                        ga[r * v + i2] += g[r];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, count, probs } => {
                if rg(*logits) {
                    let n = nodes[logits.0].shape[1];
                    let scale = g[0] / *count as f32;
                    let gl = buf(grads, *logits, len(*logits));
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * n + j] += (probs[r * n + j] - onehot) * scale;
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if rg(a) {
                    buf(grads, a, len(a)).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean { a } => {
                if rg(a) {
                    let s = g[0] / len(a) as f32;
                    buf(grads, a, len(a)).iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }
}

/// Draws an index from a probability row (entries need not be normalised).
pub fn multinomial_sample(probs: &[f32], rng: &mut impl Rng) -> usize {
    let total: f64 = probs.iter().map(|&p| p as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        u -= p as f64;
        if u < 0.0 {
            return i;
        }
    }
    // Rounding left a sliver; fall back to the last non-zero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub passed: bool,
    pub analytic: Vec<Vec<f32>>,
    pub numeric: Vec<Vec<f32>>,
}

/// Compares analytic gradients of `f` with central finite differences
/// `(f(x+ε) − f(x−ε)) / 2ε` for every coordinate of every input.
///
/// The per-coordinate error is `|a − n| / max(1, |a|, |n|)`, i.e. relative for
/// large gradients and absolute below unit magnitude.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0] as f64)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_err = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let mut col = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let orig = t.data[j];
            probe[k].data[j] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data[j] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data[j] = orig;
            let num = (up - down) / (2.0 * eps as f64);
            let a = analytic[k][j] as f64;
            let err = (a - num).abs() / 1f64.max(a.abs()).max(num.abs());
            max_err = max_err.max(err);
            col.push(num as f32);
        }
        numeric.push(col);
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        passed: max_err <= tol,
        analytic,
        numeric,
    })
}
