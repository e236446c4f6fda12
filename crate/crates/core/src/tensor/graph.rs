use super::{axis_layout, gemm, Element, Tensor};
use crate::error::{GtrError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Clamp(Var, E, E),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    L1Norm(Var),
    MeanRows(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so every
/// node's operands precede it.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_done: bool,
    matmul_flops: u64,
    branches: Option<u64>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            matmul_flops: 0,
            branches: None,
        }
    }

    /// `2·m·k·n` summed over every forward matrix product recorded so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    /// Start hashing the branch taken by every piecewise op (relu, clamp,
    /// abs, minimum, maximum) and every [`Graph::note_branch`] call.
    pub fn track_branches(&mut self) {
        self.branches = Some(FNV_OFFSET);
    }

    /// Hash of all branch decisions so far, if tracking is on. Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    /// Record a discrete decision made outside the graph (an argmin, say).
    pub fn note_branch(&mut self, v: u64) {
        if let Some(h) = self.branches.as_mut() {
            *h = (*h ^ v).wrapping_mul(FNV_PRIME);
        }
    }

    fn note_pieces(&mut self, x: Var, piece: impl Fn(E) -> u64) {
        if let Some(mut h) = self.branches {
            for &v in self.value(x) {
                h = (h ^ piece(v)).wrapping_mul(FNV_PRIME);
            }
            self.branches = Some(h);
        }
    }

    fn note_order(&mut self, a: Var, b: Var) {
        if let Some(mut h) = self.branches {
            for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
                h = (h ^ u64::from(x <= y)).wrapping_mul(FNV_PRIME);
            }
            self.branches = Some(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, op: Op<E>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. Its `requires_grad` flag decides whether it collects a gradient.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn leaf_owned(&mut self, t: Tensor<E>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, t.requires_grad)
    }

    /// Record a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![E::of(v)], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> E {
        self.nodes[v.0].value[0]
    }

    /// Snapshot of a node as a tensor, carrying its gradient if backward ran.
    pub fn tensor(&self, v: Var) -> Tensor<E> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).unwrap();
        t.set_requires_grad(n.requires_grad);
        if self.backward_done && n.requires_grad {
            t.grad = Some(self.grad(v).unwrap());
        }
        t
    }

    /// Gradient of the last backward pass w.r.t. `v`. Nodes that require a
    /// gradient but were not reached get zeros. `None` before backward or for
    /// nodes that never require a gradient.
    pub fn grad(&self, v: Var) -> Option<Vec<E>> {
        if !self.backward_done || !self.rg(v) {
            return None;
        }
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![E::zero(); self.nodes[v.0].value.len()],
        })
    }

    pub fn grad_ref(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GtrError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            E::zero(),
            &mut out,
        );
        self.matmul_flops += (2 * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(GtrError::dim("matmul_t", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![E::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            true,
            E::zero(),
            &mut out,
        );
        self.matmul_flops += (2 * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GtrError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E, op: Op<E>) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip(a, b, |x, y| x / y, Op::Div(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        self.note_order(a, b);
        Ok(self.zip(a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        self.note_order(a, b);
        Ok(self.zip(a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b)))
    }

    /// `x + bias` with `bias` (length = last dim of `x`) repeated over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).len() != n {
            return Err(GtrError::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg))
    }

    /// `s·x` where `s` is a one-element tensor on the tape.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(GtrError::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.item(s);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalar(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = E::of(c);
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = E::of(c);
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (E::of(lo), E::of(hi));
        self.note_pieces(x, |v| u64::from(v < lo) | (u64::from(v > hi) << 1));
        self.map(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.note_pieces(x, |v| u64::from(v > E::zero()));
        self.map(x, |v| v.max(E::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.note_pieces(x, |v| u64::from(v >= E::zero()));
        self.map(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: E = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s / E::of(n as f64)], Op::Mean(x), rg)
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.abs()).sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::L1Norm(x), rg)
    }

    /// Column means of a 2-D tensor, shaped `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x);
        if sh.len() != 2 || sh[0] == 0 {
            return Err(GtrError::dim("mean_rows", sh, &[]));
        }
        let (r, c) = (sh[0], sh[1]);
        let mut out = vec![E::zero(); c];
        for row in self.value(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
        }
        let inv = E::one() / E::of(r as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let rg = self.rg(x);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x);
        if sh.len() != 2 {
            return Err(GtrError::dim("transpose", sh, &[]));
        }
        let (r, c) = (sh[0], sh[1]);
        let v = self.value(x);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(GtrError::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| GtrError::contract("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(GtrError::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GtrError::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(GtrError::dim("slice", &sh, &[axis, start, len]));
        }
        let (outer, alen, inner) = axis_layout(&sh, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let v = self.value(x);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = sh;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Split `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let sh = self.shape(x);
        if axis >= sh.len() || sizes.iter().sum::<usize>() != sh[axis] {
            return Err(GtrError::dim("split", sh, sizes));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &n in sizes {
            parts.push(self.slice(x, axis, start, n)?);
            start += n;
        }
        Ok(parts)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() {
            return Err(GtrError::dim("softmax", &sh, &[axis]));
        }
        let (outer, len, inner) = axis_layout(&sh, axis);
        let v = self.value(x);
        let mut out = vec![E::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| v[at(j)]).fold(E::neg_infinity(), E::max);
                let mut total = E::zero();
                for j in 0..len {
                    let e = (v[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(sh, out, Op::Softmax { x, axis }, rg))
    }

    /// Normalize over the last axis, then apply elementwise `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let n = *sh.last().unwrap_or(&1);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(GtrError::dim("layer_norm", &sh, self.shape(gain)));
        }
        let eps = E::of(LAYER_NORM_EPS);
        let inv_n = E::one() / E::of(n as f64);
        let v = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(v.len() / n.max(1));
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(n.max(1)) {
            let mean = row.iter().copied().sum::<E>() * inv_n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<E>() * inv_n;
            let r = E::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &a) in row.iter().enumerate() {
                let h = (a - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            sh,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row gather from a 2-D table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let sh = self.shape(table);
        if sh.len() != 2 {
            return Err(GtrError::dim("gather_rows", sh, &[]));
        }
        let (rows, c) = (sh[0], sh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(GtrError::Vocabulary {
                id: bad,
                size: rows,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populate gradients of `loss` (a one-element tensor) w.r.t. every node.
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(GtrError::contract(
                "backward already ran on this graph; record a new forward pass",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(GtrError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[E]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let y = &node.value;
        // Accumulate into the gradient buffer of `v` if it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [E])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![E::zero(); n.value.len()]);
            f(buf);
        };
        let val = |v: Var| -> &[E] { &nodes[v.0].value };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                acc(*a, &mut |da| {
                    gemm(m, n, k, g, false, val(*b), true, E::one(), da)
                });
                acc(*b, &mut |db| {
                    gemm(k, m, n, val(*a), true, g, false, E::one(), db)
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                acc(*a, &mut |da| {
                    gemm(m, n, k, g, false, val(*b), false, E::one(), da)
                });
                acc(*b, &mut |db| {
                    gemm(n, m, k, g, true, val(*a), false, E::one(), db)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] / bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] - g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let n = d.len().max(1);
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let c = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + c * g)
                });
                acc(*s, &mut |d| {
                    d[0] = d[0] + g.iter().zip(xv).map(|(&g, &x)| g * x).sum::<E>();
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + *c * g)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (val(*a), val(*b));
                let pick_a = |j: usize| {
                    if is_min {
                        av[j] <= bv[j]
                    } else {
                        av[j] >= bv[j]
                    }
                };
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if pick_a(j) {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        if !pick_a(j) {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_layout(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].shape[*axis] * inner;
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, alen, inner) = axis_layout(&nodes[input.0].shape, *axis);
                let chunk = node.shape[*axis] * inner;
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        add_into(&mut d[base..base + chunk], &g[o * chunk..(o + 1) * chunk]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap_or(&1);
                let gv = val(*gain);
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] = d[j] + grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(n) {
                        add_into(d, grow);
                    }
                });
                let inv_n = E::one() / E::of(n as f64);
                acc(*x, &mut |d| {
                    for (r, ((drow, grow), hrow)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_dh = E::zero();
                        let mut mean_dh_h = E::zero();
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hrow[j];
                        }
                        mean_dh = mean_dh * inv_n;
                        mean_dh_h = mean_dh_h * inv_n;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            drow[j] = drow[j] + rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if y[j] > E::zero() {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * (E::one() - y[j] * y[j]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * y[j] * (E::one() - y[j]);
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] / xv[j];
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * sign(xv[j]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                acc(*x, &mut |d| {
                    let s = g[0] / E::of(d.len() as f64);
                    d.iter_mut().for_each(|d| *d = *d + s);
                });
            }
            Op::L1Norm(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[0] * sign(xv[j]);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let inv = E::one() / E::of(r as f64);
                acc(*x, &mut |d| {
                    for row in d.chunks_mut(c) {
                        for j in 0..c {
                            row[j] = row[j] + g[j] * inv;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(&node.shape, *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<E>();
                            for j in 0..len {
                                d[at(j)] = d[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let c = nodes[table.0].shape[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

#[inline]
fn sign<E: Element>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}
