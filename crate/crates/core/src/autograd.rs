//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Operations are coarse
//! (matmul, layer norm, fused multi-head attention, fused flow loss) so a
//! forward pass through the recursive model records a few hundred nodes.
//!
//! A tape is a single differentiation root. Cutting gradient flow between
//! two computations means copying the value out of one tape and
//! re-entering it into a fresh one as a leaf.

use crate::tensor::{gemm, MatMut, MatRef, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, exposed for tape inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Scale,
    LayerNorm,
    Gelu,
    Attention,
    ConcatRows,
    SliceRows,
    PosEmbed,
    FlowLoss,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gelu(Var),
    Attention { qkv: Var, heads: usize, probs: Vec<Tensor> },
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    PosEmbed { row: Var, col: Var, side: Var, grid: usize },
    FlowLoss { pred: Var, target: Tensor, mse: f64, bce: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Attention { .. } => OpKind::Attention,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::PosEmbed { .. } => OpKind::PosEmbed,
            Op::FlowLoss { .. } => OpKind::FlowLoss,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::ConcatRows(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::SliceRows(a, _) => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Attention { qkv, .. } => vec![qkv],
            Op::PosEmbed { row, col, side, .. } => vec![row, col, side],
            Op::FlowLoss { pred, .. } => vec![pred],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients (parameters, detached chunk inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Every node reachable from `v` by following parent edges, including `v`.
    pub fn ancestors(&self, v: Var) -> Vec<Var> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![v];
        let mut out = Vec::new();
        while let Some(n) = stack.pop() {
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            out.push(n);
            stack.extend(self.nodes[n.0].op.parents());
        }
        out.sort();
        out
    }

    /// Attention probabilities recorded by an attention node, one `T×T`
    /// matrix per head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `(mse, bce)` components of a flow-loss node.
    pub fn loss_parts(&self, v: Var) -> Option<(f64, f64)> {
        match self.nodes[v.0].op {
            Op::FlowLoss { mse, bce, .. } => Some((mse, bce)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `x + b` with `b: 1×cols` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        let mut out = self.value(x).clone();
        assert_eq!(bias.len(), out.cols, "add_row bias width mismatch");
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.data[r * cols + c] * g[c] + bt[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head softmax self-attention over a fused `T × 3d` projection
    /// laid out as `[Q | K | V]`; returns the `T × d` head concatenation.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let qv = self.value(qkv);
        let t = qv.rows;
        let d = qv.cols / 3;
        assert_eq!(qv.cols, 3 * d, "qkv width must be a multiple of 3");
        assert!(heads >= 1 && d % heads == 0, "model width must be divisible by head count");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        let src = MatRef::row_major(&qv.data, 3 * d);
        for h in 0..heads {
            let mut p = Tensor::zeros(t, t);
            gemm(
                t,
                dh,
                t,
                scale,
                src.with_offset(h * dh),
                src.with_offset(d + h * dh).t(),
                0.0,
                MatMut::row_major(&mut p.data, t),
            );
            for r in 0..t {
                softmax_in_place(p.row_mut(r));
            }
            gemm(
                t,
                t,
                dh,
                1.0,
                MatRef::row_major(&p.data, t),
                src.with_offset(2 * d + h * dh),
                0.0,
                MatMut::row_major(&mut out.data, d).with_offset(h * dh),
            );
            probs.push(p);
        }
        self.push(out, Op::Attention { qkv, heads, probs })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::concat_rows(self.value(a), self.value(b));
        self.push(out, Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push(out, Op::SliceRows(x, start))
    }

    /// Factored positional table: token `(r, c)` of a `grid × grid` layout
    /// receives `row[r] + col[c]`; the trailing side tokens receive `side`.
    pub fn pos_embed(&mut self, row: Var, col: Var, side: Var, grid: usize) -> Var {
        let (rv, cv, sv) = (self.value(row), self.value(col), self.value(side));
        let d = rv.cols;
        let mut out = Tensor::zeros(grid * grid + sv.rows, d);
        for r in 0..grid {
            for c in 0..grid {
                let o = out.row_mut(r * grid + c);
                for k in 0..d {
                    o[k] = rv.data[r * d + k] + cv.data[c * d + k];
                }
            }
        }
        out.data[grid * grid * d..].copy_from_slice(&sv.data);
        self.push(out, Op::PosEmbed { row, col, side, grid })
    }

    /// Flow-field loss on token-layout predictions: every third channel
    /// (offset 2) is a foreground logit, the others are flow components.
    /// Returns `mean squared flow error + mean BCE-with-logits`.
    pub fn flow_loss(&mut self, pred: Var, target: Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "flow_loss shape mismatch");
        let n_pix = (pv.len() / 3) as f64;
        let mut se = 0.0;
        let mut bce = 0.0;
        for (i, (&p, &y)) in pv.data.iter().zip(&target.data).enumerate() {
            if i % 3 == 2 {
                bce += p.max(0.0) - p * y + (-p.abs()).exp().ln_1p();
            } else {
                se += (p - y) * (p - y);
            }
        }
        let mse = se / (2.0 * n_pix);
        let bce = bce / n_pix;
        let out = Tensor::from_vec(1, 1, vec![mse + bce]);
        self.push(out, Op::FlowLoss { pred, target, mse, bce })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if self.wants(a) {
                    let ga = grad_slot(grads, a, m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(&g.data, n),
                        MatRef::row_major(&bv.data, n).t(),
                        1.0,
                        MatMut::row_major(&mut ga.data, k),
                    );
                }
                if self.wants(b) {
                    let gb = grad_slot(grads, b, k, n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::row_major(&av.data, k).t(),
                        MatRef::row_major(&g.data, n),
                        1.0,
                        MatMut::row_major(&mut gb.data, n),
                    );
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        grad_slot(grads, v, g.rows, g.cols).add_assign(g);
                    }
                }
            }
            &Op::AddRow(x, b) => {
                if self.wants(x) {
                    grad_slot(grads, x, g.rows, g.cols).add_assign(g);
                }
                if self.wants(b) {
                    let (br, bc) = self.value(b).shape();
                    let gb = grad_slot(grads, b, br, bc);
                    for r in 0..g.rows {
                        for (acc, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                if self.wants(x) {
                    let gx = grad_slot(grads, x, g.rows, g.cols);
                    for (acc, v) in gx.data.iter_mut().zip(&g.data) {
                        *acc += s * v;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = g.shape();
                let gam = &self.value(*gamma).data;
                if self.wants(*gamma) {
                    let gg = grad_slot(grads, *gamma, 1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.data[r * cols + c] * xhat.data[r * cols + c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = grad_slot(grads, *beta, 1, cols);
                    for r in 0..rows {
                        for (acc, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = grad_slot(grads, *x, rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let xv = self.value(x);
                    let gx = grad_slot(grads, x, g.rows, g.cols);
                    for ((acc, &v), &gv) in gx.data.iter_mut().zip(&xv.data).zip(&g.data) {
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dudx = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *acc += gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dudx);
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if !self.wants(*qkv) {
                    return;
                }
                let qv = self.value(*qkv);
                let t = qv.rows;
                let d = qv.cols / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let src = MatRef::row_major(&qv.data, 3 * d);
                let gsrc = MatRef::row_major(&g.data, d);
                let gq = grad_slot(grads, *qkv, t, 3 * d);
                let mut dp = Tensor::zeros(t, t);
                for (h, p) in probs.iter().enumerate() {
                    // dP = dO_h · V_hᵀ
                    gemm(
                        t,
                        dh,
                        t,
                        1.0,
                        gsrc.with_offset(h * dh),
                        src.with_offset(2 * d + h * dh).t(),
                        0.0,
                        MatMut::row_major(&mut dp.data, t),
                    );
                    // dV_h += Pᵀ · dO_h
                    gemm(
                        t,
                        t,
                        dh,
                        1.0,
                        MatRef::row_major(&p.data, t).t(),
                        gsrc.with_offset(h * dh),
                        1.0,
                        MatMut::row_major(&mut gq.data, 3 * d).with_offset(2 * d + h * dh),
                    );
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), stored in dp
                    for r in 0..t {
                        let pr = p.row(r);
                        let dr = dp.row_mut(r);
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (dv, pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot);
                        }
                    }
                    // dQ_h += scale · dS · K_h ; dK_h += scale · dSᵀ · Q_h
                    gemm(
                        t,
                        t,
                        dh,
                        scale,
                        MatRef::row_major(&dp.data, t),
                        src.with_offset(d + h * dh),
                        1.0,
                        MatMut::row_major(&mut gq.data, 3 * d).with_offset(h * dh),
                    );
                    gemm(
                        t,
                        t,
                        dh,
                        scale,
                        MatRef::row_major(&dp.data, t).t(),
                        src.with_offset(h * dh),
                        1.0,
                        MatMut::row_major(&mut gq.data, 3 * d).with_offset(d + h * dh),
                    );
                }
            }
            &Op::ConcatRows(a, b) => {
                let ra = self.value(a).rows;
                let cols = g.cols;
                if self.wants(a) {
                    let ga = grad_slot(grads, a, ra, cols);
                    for (acc, v) in ga.data.iter_mut().zip(&g.data[..ra * cols]) {
                        *acc += v;
                    }
                }
                if self.wants(b) {
                    let rb = self.value(b).rows;
                    let gb = grad_slot(grads, b, rb, cols);
                    for (acc, v) in gb.data.iter_mut().zip(&g.data[ra * cols..]) {
                        *acc += v;
                    }
                }
            }
            &Op::SliceRows(x, start) => {
                if self.wants(x) {
                    let (rows, cols) = self.value(x).shape();
                    let gx = grad_slot(grads, x, rows, cols);
                    for (acc, v) in gx.data[start * cols..].iter_mut().zip(&g.data) {
                        *acc += v;
                    }
                }
            }
            &Op::PosEmbed { row, col, side, grid } => {
                let d = g.cols;
                if self.wants(row) {
                    let gr = grad_slot(grads, row, grid, d);
                    for r in 0..grid {
                        for c in 0..grid {
                            let src = g.row(r * grid + c);
                            for k in 0..d {
                                gr.data[r * d + k] += src[k];
                            }
                        }
                    }
                }
                if self.wants(col) {
                    let gc = grad_slot(grads, col, grid, d);
                    for r in 0..grid {
                        for c in 0..grid {
                            let src = g.row(r * grid + c);
                            for k in 0..d {
                                gc.data[c * d + k] += src[k];
                            }
                        }
                    }
                }
                if self.wants(side) {
                    let rows = self.value(side).rows;
                    let gs = grad_slot(grads, side, rows, d);
                    for (acc, v) in gs.data.iter_mut().zip(&g.data[grid * grid * d..]) {
                        *acc += v;
                    }
                }
            }
            Op::FlowLoss { pred, target, .. } => {
                if !self.wants(*pred) {
                    return;
                }
                let pv = self.value(*pred);
                let n_pix = (pv.len() / 3) as f64;
                let up = g.data[0];
                let gp = grad_slot(grads, *pred, pv.rows, pv.cols);
                for (i, ((acc, &p), &y)) in gp.data.iter_mut().zip(&pv.data).zip(&target.data).enumerate() {
                    if i % 3 == 2 {
                        *acc += up * (sigmoid(p) - y) / n_pix;
                    } else {
                        *acc += up * (p - y) / n_pix;
                    }
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every leaf gradient of `f`.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut tp = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|t| tp.constant(t.clone())).collect();
            let o = f(&mut tp, &vs);
            tp.value(o).data[0]
        };
        let h = 1e-6;
        for (i, inp) in inputs.iter().enumerate() {
            let g = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(inp.rows, inp.cols));
            for j in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[i].data[j] += h;
                let mut minus = inputs.clone();
                minus[i].data[j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = g.data[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-4);
                assert!(err < 1e-5, "input {i} elem {j}: analytic {ana} numeric {num}");
            }
        }
    }

    fn rnd(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Reduce any tensor to a scalar via a fixed random projection.
    fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = tape.value(x).shape();
        let w = rnd(c, 1, seed);
        let w = tape.constant(w);
        let y = tape.matmul(x, w);
        let ones = tape.constant(Tensor::filled(1, r, 1.0));
        tape.matmul(ones, y)
    }

    #[test]
    fn matmul_add_row_grad() {
        check(vec![rnd(3, 4, 1), rnd(4, 2, 2), rnd(1, 2, 3)], |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            project(t, y, 9)
        });
    }

    #[test]
    fn layer_norm_gelu_grad() {
        check(vec![rnd(3, 5, 4), rnd(1, 5, 5), rnd(1, 5, 6)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let y = t.gelu(y);
            project(t, y, 10)
        });
    }

    #[test]
    fn attention_grad() {
        check(vec![rnd(5, 12, 7)], |t, v| {
            let y = t.attention(v[0], 2);
            project(t, y, 11)
        });
    }

    #[test]
    fn structural_ops_grad() {
        check(vec![rnd(2, 3, 12), rnd(2, 3, 13), rnd(1, 3, 14)], |t, v| {
            let p = t.pos_embed(v[0], v[1], v[2], 2);
            let s = t.slice_rows(p, 1, 3);
            let c = t.concat_rows(s, v[2]);
            let c = t.scale(c, 0.7);
            project(t, c, 15)
        });
    }

    #[test]
    fn flow_loss_grad() {
        let target = {
            let mut t = rnd(2, 6, 16);
            for (i, v) in t.data.iter_mut().enumerate() {
                if i % 3 == 2 {
                    *v = if *v > 0.0 { 1.0 } else { 0.0 };
                }
            }
            t
        };
        check(vec![rnd(2, 6, 17)], move |t, v| t.flow_loss(v[0], target.clone()));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::new();
        let x = tape.constant(rnd(7, 24, 20));
        let a = tape.attention(x, 4);
        for p in tape.attention_probs(a).unwrap() {
            for r in 0..p.rows {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constants_do_not_propagate() {
        let mut tape = Tape::new();
        let a = tape.constant(rnd(2, 2, 1));
        let b = tape.leaf(rnd(2, 2, 2));
        let c = tape.matmul(a, b);
        let d = project(&mut tape, c, 3);
        assert!(tape.requires_grad(d));
        let g = tape.backward(d);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}
