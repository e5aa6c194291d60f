//! Reverse-mode differentiation over an op-recording graph.
//!
//! Nodes are appended in execution order (values are computed eagerly),
//! so the node list is already a topological order and backward simply
//! walks it in reverse. Leaves bound to a [`Param`] receive accumulated
//! gradients when [`Graph::backward`] finishes.
//!
//! Finiteness policy: every op output is scanned; NaN or +inf is an
//! error. −inf is tolerated because the streaming WKV accumulator keeps
//! a running-max exponent that starts at the −∞ sentinel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Lerp,
    Sigmoid,
    Relu,
    Exp,
    MaxScalar(F),
    Scale(F),
    MatMul { transpose_b: bool },
    LayerNorm { eps: F },
    Embed { tokens: Vec<u32> },
    StackRows,
    RowSelect(usize),
    Reshape,
    LowRankApply,
    CrossEntropy { targets: Vec<u32>, mask: Vec<bool> },
    Sum,
}

struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Vec<F>,
    param: Option<Param<F>>,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// How a binary operand pair lines up.
#[derive(Clone, Copy)]
enum Bcast {
    Equal,
    /// rhs is a row vector (len == lhs cols) repeated down the rows.
    RhsRow,
    /// lhs is a row vector repeated down the rows of rhs.
    LhsRow,
    RhsScalar,
    LhsScalar,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor<F> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("node value is shape-consistent")
    }

    fn cols(&self, id: NodeId) -> usize {
        *self.nodes[id.0].shape.last().unwrap()
    }

    fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len() / self.cols(id)
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push_unchecked(Op::Leaf, vec![], t.shape().to_vec(), t.data().to_vec(), None, false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    /// Leaf bound to a trainable parameter; data is snapshotted now,
    /// gradients flow back into the param on `backward`.
    pub fn param(&mut self, p: &Param<F>) -> NodeId {
        let (shape, data) = {
            let t = p.borrow();
            (t.shape().to_vec(), t.data().to_vec())
        };
        self.push_unchecked(Op::Leaf, vec![], shape, data, Some(p.clone()), true)
    }

    fn push_unchecked(
        &mut self,
        op: Op<F>,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Vec<F>,
        param: Option<Param<F>>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            param,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        opname: &'static str,
        op: Op<F>,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Vec<F>,
    ) -> Result<NodeId> {
        if let Some(ix) = value.iter().position(|v| v.is_nan() || *v == F::infinity()) {
            return Err(Error::NonFinite { op: opname, index: ix });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push_unchecked(op, inputs, shape, value, None, needs_grad))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn bcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la == lb && self.cols(a) == self.cols(b) {
            Ok((Bcast::Equal, sa.clone()))
        } else if lb == 1 {
            Ok((Bcast::RhsScalar, sa.clone()))
        } else if la == 1 {
            Ok((Bcast::LhsScalar, sb.clone()))
        } else if lb == self.cols(a) && la % lb == 0 {
            Ok((Bcast::RhsRow, sa.clone()))
        } else if la == self.cols(b) && lb % la == 0 {
            Ok((Bcast::LhsRow, sb.clone()))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        opname: &'static str,
        op: Op<F>,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
    ) -> Result<NodeId> {
        let (bc, shape) = self.bcast(opname, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        match bc {
            Bcast::Equal => out.extend(va.iter().zip(vb).map(|(&x, &y)| f(x, y))),
            Bcast::RhsScalar => {
                let y = vb[0];
                out.extend(va.iter().map(|&x| f(x, y)));
            }
            Bcast::LhsScalar => {
                let x = va[0];
                out.extend(vb.iter().map(|&y| f(x, y)));
            }
            Bcast::RhsRow => {
                let c = vb.len();
                out.extend(va.iter().enumerate().map(|(i, &x)| f(x, vb[i % c])));
            }
            Bcast::LhsRow => {
                let c = va.len();
                out.extend(vb.iter().enumerate().map(|(i, &y)| f(va[i % c], y)));
            }
        }
        self.push(opname, op, vec![a, b], shape, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", Op::Div, a, b, |x, y| x / y)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("maximum", Op::Maximum, a, b, |x, y| if x >= y { x } else { y })
    }

    /// mu*a + (1-mu)*b. `mu` may be a row vector broadcast over rows of
    /// `a`/`b` (token-shift interpolation uses a per-channel mu).
    pub fn lerp(&mut self, mu: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, shape) = self.bcast("lerp", a, b)?;
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "lerp",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let (bc, _) = self.bcast("lerp", a, mu)?;
        let (vm, va, vb) = (
            &self.nodes[mu.0].value,
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
        );
        let one = F::one();
        let mu_at = |i: usize| match bc {
            Bcast::Equal => vm[i],
            Bcast::RhsScalar => vm[0],
            Bcast::RhsRow => vm[i % vm.len()],
            _ => unreachable!("lerp mu must not be wider than operands"),
        };
        let out: Vec<F> = (0..va.len())
            .map(|i| {
                let m = mu_at(i);
                m * va[i] + (one - m) * vb[i]
            })
            .collect();
        self.push("lerp", Op::Lerp, vec![mu, a, b], shape, out)
    }

    fn unary(
        &mut self,
        opname: &'static str,
        op: Op<F>,
        x: NodeId,
        f: impl Fn(F) -> F,
    ) -> Result<NodeId> {
        let out: Vec<F> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(opname, op, vec![x], shape, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", Op::Sigmoid, x, |v| F::one() / (F::one() + (-v).exp()))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("relu", Op::Relu, x, |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", Op::Exp, x, |v| v.exp())
    }

    pub fn max_scalar(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        self.unary("max_scalar", Op::MaxScalar(c), x, |v| if v >= c { v } else { c })
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        self.unary("scale", Op::Scale(c), x, |v| v * c)
    }

    // ── structural ──────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                detail: format!("element count != {}", self.nodes[x.0].value.len()),
            });
        }
        let out = self.nodes[x.0].value.clone();
        self.push("reshape", Op::Reshape, vec![x], shape, out)
    }

    pub fn row_select(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if r >= rows {
            return Err(Error::precondition(format!("row {r} out of {rows}")));
        }
        let out = self.nodes[x.0].value[r * cols..(r + 1) * cols].to_vec();
        self.push("row_select", Op::RowSelect(r), vec![x], vec![1, cols], out)
    }

    /// Concatenate 2-D tensors along the row axis.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::precondition("stack_rows of zero tensors"));
        }
        let cols = self.cols(parts[0]);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += self.rows(p);
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push("stack_rows", Op::StackRows, parts.to_vec(), vec![rows, cols], out)
    }

    /// Row lookup into an embedding table `[V×E]`.
    pub fn embed(&mut self, table: NodeId, tokens: &[u32]) -> Result<NodeId> {
        let (v, e) = (self.rows(table), self.cols(table));
        let mut out = Vec::with_capacity(tokens.len() * e);
        for &t in tokens {
            if t as usize >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            let r = t as usize;
            out.extend_from_slice(&self.nodes[table.0].value[r * e..(r + 1) * e]);
        }
        self.push(
            "embed",
            Op::Embed { tokens: tokens.to_vec() },
            vec![table],
            vec![tokens.len(), e],
            out,
        )
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// `a · b` (or `a · bᵀ` with `transpose_b`), both 2-D.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (m, ka) = (self.rows(a), self.cols(a));
        let (rb, cb) = (self.rows(b), self.cols(b));
        let (kb, p) = if transpose_b { (cb, rb) } else { (rb, cb) };
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = vec![F::zero(); m * p];
        if transpose_b {
            // out[i][j] = dot(a_row_i, b_row_j)
            for i in 0..m {
                let ar = &va[i * ka..(i + 1) * ka];
                let orow = &mut out[i * p..(i + 1) * p];
                for (j, o) in orow.iter_mut().enumerate() {
                    let br = &vb[j * ka..(j + 1) * ka];
                    *o = dot(ar, br);
                }
            }
        } else {
            for i in 0..m {
                let ar = &va[i * ka..(i + 1) * ka];
                let orow = &mut out[i * p..(i + 1) * p];
                for (l, &al) in ar.iter().enumerate() {
                    let br = &vb[l * p..(l + 1) * p];
                    axpy(al, br, orow);
                }
            }
        }
        self.push(
            "matmul",
            Op::MatMul { transpose_b },
            vec![a, b],
            vec![m, p],
            out,
        )
    }

    // ── layernorm ───────────────────────────────────────────────────

    /// Per-row normalization over the last axis, then affine.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> Result<NodeId> {
        let c = self.cols(x);
        if c < 2 {
            return Err(Error::InvalidShape {
                op: "layernorm",
                shape: self.nodes[x.0].shape.clone(),
                detail: "last axis must have extent >= 2".into(),
            });
        }
        if self.nodes[gain.0].value.len() != c || self.nodes[bias.0].value.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let rows = self.rows(x);
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gain.0].value;
        let vb = &self.nodes[bias.0].value;
        let nf = F::from_f64(c as f64);
        let mut out = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let xr = &vx[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<F>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let inv = (var + eps).sqrt().recip();
            for i in 0..c {
                out.push((xr[i] - mean) * inv * vg[i] + vb[i]);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push("layernorm", Op::LayerNorm { eps }, vec![x, gain, bias], shape, out)
    }

    // ── low-rank delta application ──────────────────────────────────

    /// Per-sample factored delta: `out[k] = B_k · (A_k · z[k])`.
    ///
    /// `z` is `[K×E_in]`; `factors` holds one `(A [n×E_in], B [E_out×n])`
    /// pair per row of `z` (the `B` node may be shared across rows).
    pub fn low_rank_apply(&mut self, z: NodeId, factors: &[(NodeId, NodeId)]) -> Result<NodeId> {
        let (k_rows, e_in) = (self.rows(z), self.cols(z));
        if factors.len() != k_rows {
            return Err(Error::precondition(format!(
                "low_rank_apply: {} factor pairs for {} rows",
                factors.len(),
                k_rows
            )));
        }
        let (a0, b0) = factors[0];
        let n = self.rows(a0);
        let e_out = self.rows(b0);
        let mut out = vec![F::zero(); k_rows * e_out];
        for (k, &(a, b)) in factors.iter().enumerate() {
            if self.cols(a) != e_in || self.rows(a) != n || self.cols(b) != n || self.rows(b) != e_out
            {
                return Err(Error::ShapeMismatch {
                    op: "low_rank_apply",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
            let zr = &self.nodes[z.0].value[k * e_in..(k + 1) * e_in];
            let va = &self.nodes[a.0].value;
            let vb = &self.nodes[b.0].value;
            let u: Vec<F> = (0..n).map(|i| dot(&va[i * e_in..(i + 1) * e_in], zr)).collect();
            let orow = &mut out[k * e_out..(k + 1) * e_out];
            for (o, br) in orow.iter_mut().zip(vb.chunks_exact(n)) {
                *o = dot(br, &u);
            }
        }
        let mut inputs = vec![z];
        for &(a, b) in factors {
            inputs.push(a);
            inputs.push(b);
        }
        self.push(
            "low_rank_apply",
            Op::LowRankApply,
            inputs,
            vec![k_rows, e_out],
            out,
        )
    }

    // ── loss ────────────────────────────────────────────────────────

    /// Mean negative log-likelihood over masked rows of `[N×V]` logits,
    /// stable via max-subtraction inside log-softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> Result<NodeId> {
        let (n, v) = (self.rows(logits), self.cols(logits));
        if targets.len() != n || mask.len() != n {
            return Err(Error::precondition(format!(
                "cross_entropy: {n} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::precondition("cross_entropy: all positions masked out"));
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t as usize >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
        }
        let vals = &self.nodes[logits.0].value;
        let mut total = F::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = &vals[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[targets[r] as usize];
        }
        let loss = total / F::from_f64(count as f64);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            vec![logits],
            vec![1],
            vec![loss],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.iter().copied().sum::<F>();
        self.push("sum", Op::Sum, vec![x], vec![1], vec![s])
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-accumulate gradients from a scalar root into every
    /// trainable leaf's `Param` grad buffer (additively).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::precondition(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if let Some(p) = &self.nodes[idx].param {
                p.borrow_mut().accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(
        grads: &'a mut [Option<Vec<F>>],
        id: NodeId,
        len: usize,
    ) -> &'a mut [F] {
        grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let len_of = |id: NodeId| self.nodes[id.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let neg = matches!(node.op, Op::Sub);
                if needs(a) {
                    let buf = Self::grad_buf(grads, a, len_of(a));
                    accumulate_bcast(buf, g, false);
                }
                if needs(b) {
                    let buf = Self::grad_buf(grads, b, len_of(b));
                    accumulate_bcast(buf, g, neg);
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    let vb = &self.nodes[b.0].value;
                    let tmp: Vec<F> = scaled_by(g, vb, len_of(a));
                    let buf = Self::grad_buf(grads, a, len_of(a));
                    accumulate_bcast(buf, &tmp, false);
                }
                if needs(b) {
                    let va = &self.nodes[a.0].value;
                    let tmp: Vec<F> = scaled_by(g, va, len_of(b).max(g.len()));
                    let buf = Self::grad_buf(grads, b, len_of(b));
                    accumulate_bcast(buf, &tmp, false);
                }
            }
            Op::Div => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let at = |i: usize| va[i % va.len()];
                let bt = |i: usize| vb[i % vb.len()];
                if needs(a) {
                    let tmp: Vec<F> = (0..g.len()).map(|i| g[i] / bt(i)).collect();
                    let buf = Self::grad_buf(grads, a, len_of(a));
                    accumulate_bcast(buf, &tmp, false);
                }
                if needs(b) {
                    let tmp: Vec<F> = (0..g.len())
                        .map(|i| -g[i] * at(i) / (bt(i) * bt(i)))
                        .collect();
                    let buf = Self::grad_buf(grads, b, len_of(b));
                    accumulate_bcast(buf, &tmp, false);
                }
            }
            Op::Maximum => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let at = |i: usize| va[i % va.len()];
                let bt = |i: usize| vb[i % vb.len()];
                if needs(a) {
                    let tmp: Vec<F> = (0..g.len())
                        .map(|i| if at(i) >= bt(i) { g[i] } else { F::zero() })
                        .collect();
                    let buf = Self::grad_buf(grads, a, len_of(a));
                    accumulate_bcast(buf, &tmp, false);
                }
                if needs(b) {
                    let tmp: Vec<F> = (0..g.len())
                        .map(|i| if at(i) >= bt(i) { F::zero() } else { g[i] })
                        .collect();
                    let buf = Self::grad_buf(grads, b, len_of(b));
                    accumulate_bcast(buf, &tmp, false);
                }
            }
            Op::Lerp => {
                let (mu, a, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let vm = &self.nodes[mu.0].value;
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let mt = |i: usize| vm[i % vm.len()];
                if needs(a) {
                    let tmp: Vec<F> = (0..g.len()).map(|i| g[i] * mt(i)).collect();
                    Self::grad_buf(grads, a, len_of(a))
                        .iter_mut()
                        .zip(&tmp)
                        .for_each(|(o, &t)| *o += t);
                }
                if needs(b) {
                    let one = F::one();
                    let tmp: Vec<F> = (0..g.len()).map(|i| g[i] * (one - mt(i))).collect();
                    Self::grad_buf(grads, b, len_of(b))
                        .iter_mut()
                        .zip(&tmp)
                        .for_each(|(o, &t)| *o += t);
                }
                if needs(mu) {
                    let tmp: Vec<F> = (0..g.len()).map(|i| g[i] * (va[i] - vb[i])).collect();
                    let buf = Self::grad_buf(grads, mu, len_of(mu));
                    accumulate_bcast(buf, &tmp, false);
                }
            }
            Op::Sigmoid => {
                let x = node.inputs[0];
                if needs(x) {
                    let y = &node.value;
                    let one = F::one();
                    let buf = Self::grad_buf(grads, x, len_of(x));
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i] * (one - y[i]);
                    }
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                if needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let buf = Self::grad_buf(grads, x, len_of(x));
                    for i in 0..g.len() {
                        if vx[i] > F::zero() {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::Exp => {
                let x = node.inputs[0];
                if needs(x) {
                    let y = &node.value;
                    let buf = Self::grad_buf(grads, x, len_of(x));
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                }
            }
            Op::MaxScalar(c) => {
                let x = node.inputs[0];
                if needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let buf = Self::grad_buf(grads, x, len_of(x));
                    for i in 0..g.len() {
                        if vx[i] >= *c {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(c) => {
                let x = node.inputs[0];
                if needs(x) {
                    let buf = Self::grad_buf(grads, x, len_of(x));
                    for i in 0..g.len() {
                        buf[i] += g[i] * *c;
                    }
                }
            }
            Op::Reshape | Op::StackRows | Op::RowSelect(_) | Op::Embed { .. } => {
                self.propagate_structural(node, g, grads);
            }
            Op::MatMul { transpose_b } => {
                self.propagate_matmul(node, *transpose_b, g, grads);
            }
            Op::LayerNorm { eps } => {
                self.propagate_layernorm(node, *eps, g, grads);
            }
            Op::LowRankApply => {
                self.propagate_low_rank(node, g, grads);
            }
            Op::CrossEntropy { targets, mask } => {
                let logits = node.inputs[0];
                if needs(logits) {
                    let v = self.cols(logits);
                    let vals = &self.nodes[logits.0].value;
                    let count = mask.iter().filter(|&&m| m).count();
                    let scale = g[0] / F::from_f64(count as f64);
                    let buf = Self::grad_buf(grads, logits, len_of(logits));
                    for r in 0..mask.len() {
                        if !mask[r] {
                            continue;
                        }
                        let row = &vals[r * v..(r + 1) * v];
                        let lse = log_sum_exp(row);
                        let brow = &mut buf[r * v..(r + 1) * v];
                        for i in 0..v {
                            brow[i] += scale * (row[i] - lse).exp();
                        }
                        brow[targets[r] as usize] -= scale;
                    }
                }
            }
            Op::Sum => {
                let x = node.inputs[0];
                if needs(x) {
                    let buf = Self::grad_buf(grads, x, len_of(x));
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
            }
        }
    }

    fn propagate_structural(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Reshape => {
                let x = node.inputs[0];
                if self.nodes[x.0].needs_grad {
                    let buf = Self::grad_buf(grads, x, self.nodes[x.0].value.len());
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                }
            }
            Op::StackRows => {
                let mut off = 0;
                for &p in &node.inputs {
                    let len = self.nodes[p.0].value.len();
                    if self.nodes[p.0].needs_grad {
                        let buf = Self::grad_buf(grads, p, len);
                        for i in 0..len {
                            buf[i] += g[off + i];
                        }
                    }
                    off += len;
                }
            }
            Op::RowSelect(r) => {
                let r = *r;
                let x = node.inputs[0];
                if self.nodes[x.0].needs_grad {
                    let c = g.len();
                    let buf = Self::grad_buf(grads, x, self.nodes[x.0].value.len());
                    for i in 0..c {
                        buf[r * c + i] += g[i];
                    }
                }
            }
            Op::Embed { tokens } => {
                let table = node.inputs[0];
                if self.nodes[table.0].needs_grad {
                    let e = *self.nodes[table.0].shape.last().unwrap();
                    let buf = Self::grad_buf(grads, table, self.nodes[table.0].value.len());
                    for (r, &t) in tokens.iter().enumerate() {
                        let dst = &mut buf[t as usize * e..(t as usize + 1) * e];
                        let src = &g[r * e..(r + 1) * e];
                        for i in 0..e {
                            dst[i] += src[i];
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    fn propagate_matmul(
        &self,
        node: &Node<F>,
        transpose_b: bool,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (a, b) = (node.inputs[0], node.inputs[1]);
        let m = self.rows(a);
        let k = self.cols(a);
        let p = node.shape[1];
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if transpose_b {
            // c = a·bᵀ with b: [p×k]
            if self.nodes[a.0].needs_grad {
                let buf = Self::grad_buf(grads, a, va.len());
                for i in 0..m {
                    let grow = &g[i * p..(i + 1) * p];
                    let arow = &mut buf[i * k..(i + 1) * k];
                    for (j, &gij) in grow.iter().enumerate() {
                        axpy(gij, &vb[j * k..(j + 1) * k], arow);
                    }
                }
            }
            if self.nodes[b.0].needs_grad {
                let buf = Self::grad_buf(grads, b, vb.len());
                for i in 0..m {
                    let grow = &g[i * p..(i + 1) * p];
                    let arow = &va[i * k..(i + 1) * k];
                    for (j, &gij) in grow.iter().enumerate() {
                        axpy(gij, arow, &mut buf[j * k..(j + 1) * k]);
                    }
                }
            }
        } else {
            // c = a·b with b: [k×p]
            if self.nodes[a.0].needs_grad {
                let buf = Self::grad_buf(grads, a, va.len());
                for i in 0..m {
                    let grow = &g[i * p..(i + 1) * p];
                    let arow = &mut buf[i * k..(i + 1) * k];
                    for (l, ag) in arow.iter_mut().enumerate() {
                        *ag += dot(grow, &vb[l * p..(l + 1) * p]);
                    }
                }
            }
            if self.nodes[b.0].needs_grad {
                let buf = Self::grad_buf(grads, b, vb.len());
                for i in 0..m {
                    let grow = &g[i * p..(i + 1) * p];
                    let arow = &va[i * k..(i + 1) * k];
                    for (l, &ail) in arow.iter().enumerate() {
                        axpy(ail, grow, &mut buf[l * p..(l + 1) * p]);
                    }
                }
            }
        }
    }

    fn propagate_layernorm(&self, node: &Node<F>, eps: F, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (x, gain, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
        let c = self.cols(x);
        let rows = self.rows(x);
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gain.0].value;
        let nf = F::from_f64(c as f64);
        for r in 0..rows {
            let xr = &vx[r * c..(r + 1) * c];
            let gr = &g[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<F>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let inv = (var + eps).sqrt().recip();
            let xhat: Vec<F> = xr.iter().map(|&v| (v - mean) * inv).collect();
            if self.nodes[gain.0].needs_grad {
                let buf = Self::grad_buf(grads, gain, c);
                for i in 0..c {
                    buf[i] += gr[i] * xhat[i];
                }
            }
            if self.nodes[bias.0].needs_grad {
                let buf = Self::grad_buf(grads, bias, c);
                for i in 0..c {
                    buf[i] += gr[i];
                }
            }
            if self.nodes[x.0].needs_grad {
                // dx = inv * (gy - mean(gy) - xhat * mean(gy ⊙ xhat)),
                // with gy = g ⊙ gain
                let gy: Vec<F> = (0..c).map(|i| gr[i] * vg[i]).collect();
                let mean_gy = gy.iter().copied().sum::<F>() / nf;
                let mean_gyx = gy.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / nf;
                let buf = Self::grad_buf(grads, x, vx.len());
                let brow = &mut buf[r * c..(r + 1) * c];
                for i in 0..c {
                    brow[i] += inv * (gy[i] - mean_gy - xhat[i] * mean_gyx);
                }
            }
        }
    }

    fn propagate_low_rank(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let z = node.inputs[0];
        let e_in = self.cols(z);
        let e_out = node.shape[1];
        let k_rows = node.shape[0];
        for krow in 0..k_rows {
            let a = node.inputs[1 + 2 * krow];
            let b = node.inputs[2 + 2 * krow];
            let n = self.rows(a);
            let zr = &self.nodes[z.0].value[krow * e_in..(krow + 1) * e_in];
            let va = &self.nodes[a.0].value;
            let vb = &self.nodes[b.0].value;
            let grow = &g[krow * e_out..(krow + 1) * e_out];
            // u = A·z ;  s = Bᵀ·grow
            let u: Vec<F> = (0..n).map(|i| dot(&va[i * e_in..(i + 1) * e_in], zr)).collect();
            let mut s = vec![F::zero(); n];
            for (j, br) in vb.chunks_exact(n).enumerate() {
                axpy(grow[j], br, &mut s);
            }
            if self.nodes[b.0].needs_grad {
                let buf = Self::grad_buf(grads, b, vb.len());
                for (j, brow) in buf.chunks_exact_mut(n).enumerate() {
                    axpy(grow[j], &u, brow);
                }
            }
            if self.nodes[a.0].needs_grad {
                let buf = Self::grad_buf(grads, a, va.len());
                for (i, arow) in buf.chunks_exact_mut(e_in).enumerate() {
                    axpy(s[i], zr, arow);
                }
            }
            if self.nodes[z.0].needs_grad {
                let buf = Self::grad_buf(grads, z, self.nodes[z.0].value.len());
                let zrow = &mut buf[krow * e_in..(krow + 1) * e_in];
                for i in 0..n {
                    axpy(s[i], &va[i * e_in..(i + 1) * e_in], zrow);
                }
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────

/// Eight independent accumulator lanes so the reduction vectorizes;
/// the lane split is fixed, keeping results deterministic per build.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder()) {
        acc += xa * xb;
    }
    acc
}

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// log Σ exp(row), max-shifted.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

/// Accumulate `g` (the wide gradient) into `buf` (possibly a narrower
/// broadcast operand): exact when lengths match, row/scalar reduction
/// otherwise.
fn accumulate_bcast<F: Scalar>(buf: &mut [F], g: &[F], negate: bool) {
    let sign = if negate { -F::one() } else { F::one() };
    if buf.len() == g.len() {
        for i in 0..g.len() {
            buf[i] += sign * g[i];
        }
    } else if buf.len() == 1 {
        buf[0] += sign * g.iter().copied().sum::<F>();
    } else {
        debug_assert_eq!(g.len() % buf.len(), 0);
        let c = buf.len();
        for (i, &gi) in g.iter().enumerate() {
            buf[i % c] += sign * gi;
        }
    }
}

/// Elementwise product against a (possibly broadcast) factor, widened
/// to `len`.
fn scaled_by<F: Scalar>(g: &[F], factor: &[F], _len: usize) -> Vec<F> {
    let c = factor.len();
    (0..g.len()).map(|i| g[i] * factor[i % c]).collect()
}
