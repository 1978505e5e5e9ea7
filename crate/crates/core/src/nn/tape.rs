//! Reverse-mode autodiff over matrix-valued nodes.
//!
//! The tape records coarse ops (affine layers, elementwise nonlinearities,
//! reductions) rather than scalar ops, which keeps graphs small: one training
//! update records a few hundred nodes. Backward walks the node list in
//! reverse; parameter gradients accumulate into the [`ParamStore`], optionally
//! restricted to a set of [`ParamGroup`]s so that e.g. a policy loss can flow
//! through latent states without moving encoder or model weights.

use crate::nn::matrix::{axpy, dot, Matrix};
use crate::nn::params::{ParamGroup, ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Mish,
    Exp,
    Ln,
    Neg,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Min,
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf with no backward (constants, detached values).
    Const,
    /// `x @ w + b` with `w: (in, out)`, `b: (1, out)` broadcast over rows.
    Linear { w: ParamId, b: ParamId, x: NodeId },
    Unary { kind: UnaryKind, x: NodeId },
    Binary { kind: BinKind, a: NodeId, b: NodeId },
    MulConst { x: NodeId, c: f64 },
    /// The constant itself is applied at record time and has zero gradient.
    AddConst { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize },
    SumAll { x: NodeId },
    /// Softmax within contiguous groups of `group` columns per row.
    GroupSoftmax { x: NodeId, group: usize },
    /// Each row scaled to unit L2 norm.
    L2NormRows { x: NodeId, eps: f64 },
    /// Elementwise binary cross-entropy on logits against constant targets.
    BceWithLogits { logits: NodeId, targets: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// One recorded computation graph. Build a fresh tape per loss evaluation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows, v.cols), (1, 1), "scalar() on non-scalar node");
        v.data[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Const)
    }

    /// Copy of `x`'s value with gradient flow cut.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn linear(&mut self, store: &ParamStore, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let wv = store.value(w);
        let bv = store.value(b);
        let xv = self.value(x);
        assert_eq!(xv.cols, wv.rows, "linear: input width vs weight rows");
        assert_eq!(bv.cols, wv.cols, "linear: bias width vs weight cols");
        let out = xv.matmul(wv).add_row_broadcast(&bv.data);
        self.push(out, Op::Linear { w, b, x })
    }

    pub fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| apply_unary(kind, v));
        self.push(out, Op::Unary { kind, x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn mish(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Mish, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Square, x)
    }

    pub fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "binary: shape mismatch");
        let mut out = Matrix::zeros(av.rows, av.cols);
        for i in 0..out.data.len() {
            out.data[i] = match kind {
                BinKind::Add => av.data[i] + bv.data[i],
                BinKind::Sub => av.data[i] - bv.data[i],
                BinKind::Mul => av.data[i] * bv.data[i],
                BinKind::Min => av.data[i].min(bv.data[i]),
            };
        }
        self.push(out, Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Min, a, b)
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulConst { x, c })
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst { x })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).concat_cols(self.value(b));
        self.push(out, Op::ConcatCols { a, b })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let out = self.value(x).slice_cols(start, width);
        self.push(out, Op::SliceCols { x, start })
    }

    /// Sum of every element, as a 1x1 node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Matrix::row_vec(vec![s]), Op::SumAll { x })
    }

    /// Mean of every element, as a 1x1 node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).data.len().max(1);
        let s = self.sum_all(x);
        self.mul_const(s, 1.0 / n as f64)
    }

    /// Softmax over contiguous groups of `group` columns in each row
    /// (a simplicial-normalization layer when applied to a latent state).
    pub fn group_softmax(&mut self, x: NodeId, group: usize) -> NodeId {
        let xv = self.value(x);
        assert!(group > 0 && xv.cols % group == 0, "group_softmax: cols must divide into groups");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for chunk in row.chunks_mut(group) {
                let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in chunk.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in chunk.iter_mut() {
                    *v /= z;
                }
            }
        }
        self.push(out, Op::GroupSoftmax { x, group })
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let eps = 1e-12;
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = dot(row, row).sqrt();
            let inv = 1.0 / (n + eps);
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, Op::L2NormRows { x, eps })
    }

    /// Numerically stable elementwise BCE on raw logits:
    /// `max(z, 0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Matrix) -> NodeId {
        let lv = self.value(logits);
        assert_eq!((lv.rows, lv.cols), (targets.rows, targets.cols), "bce: shape mismatch");
        let mut out = Matrix::zeros(lv.rows, lv.cols);
        for i in 0..out.data.len() {
            let z = lv.data[i];
            let t = targets.data[i];
            out.data[i] = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        self.push(out, Op::BceWithLogits { logits, targets })
    }

    /// Backpropagate from a scalar loss node, accumulating into every
    /// parameter's gradient buffer.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) {
        self.backward_filtered(loss, store, None);
    }

    /// Backpropagate, accumulating only into parameters whose group appears
    /// in `groups` (all groups when `None`). Gradients still flow *through*
    /// excluded parameters' activations.
    pub fn backward_filtered(&self, loss: NodeId, store: &mut ParamStore, groups: Option<&[ParamGroup]>) {
        {
            let lv = self.value(loss);
            assert_eq!((lv.rows, lv.cols), (1, 1), "backward from non-scalar loss");
        }
        let mut adjoints: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Matrix::row_vec(vec![1.0]));

        let accumulate = |adj: &mut Vec<Option<Matrix>>, id: NodeId, delta: Matrix| {
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        for idx in (0..self.nodes.len()).rev() {
            let g = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Linear { w, b, x } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = store.value(*w);
                    // dL/dx = g @ w^T
                    let dx = g.matmul_nt(wv);
                    accumulate(&mut adjoints, *x, dx);
                    let pass = |group| groups.map_or(true, |gs: &[ParamGroup]| gs.contains(&group));
                    if pass(store.get(*w).group) {
                        let dw = xv.matmul_tn(&g);
                        store.get_mut(*w).grad.add_assign(&dw);
                    }
                    if pass(store.get(*b).group) {
                        let db = g.col_sums();
                        axpy(1.0, &db, &mut store.get_mut(*b).grad.data);
                    }
                }
                Op::Unary { kind, x } => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for i in 0..dx.data.len() {
                        dx.data[i] = g.data[i] * unary_grad(*kind, xv.data[i], yv.data[i]);
                    }
                    accumulate(&mut adjoints, *x, dx);
                }
                Op::Binary { kind, a, b } => {
                    let (mut da, mut db) = (Matrix::zeros(g.rows, g.cols), Matrix::zeros(g.rows, g.cols));
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    for i in 0..g.data.len() {
                        match kind {
                            BinKind::Add => {
                                da.data[i] = g.data[i];
                                db.data[i] = g.data[i];
                            }
                            BinKind::Sub => {
                                da.data[i] = g.data[i];
                                db.data[i] = -g.data[i];
                            }
                            BinKind::Mul => {
                                da.data[i] = g.data[i] * bv.data[i];
                                db.data[i] = g.data[i] * av.data[i];
                            }
                            BinKind::Min => {
                                // Ties route to the first operand.
                                if av.data[i] <= bv.data[i] {
                                    da.data[i] = g.data[i];
                                } else {
                                    db.data[i] = g.data[i];
                                }
                            }
                        }
                    }
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::MulConst { x, c } => {
                    let mut dx = g;
                    dx.scale_in_place(*c);
                    accumulate(&mut adjoints, *x, dx);
                }
                Op::AddConst { x } => {
                    accumulate(&mut adjoints, *x, g);
                }
                Op::ConcatCols { a, b } => {
                    let aw = self.nodes[a.0].value.cols;
                    let bw = self.nodes[b.0].value.cols;
                    accumulate(&mut adjoints, *a, g.slice_cols(0, aw));
                    accumulate(&mut adjoints, *b, g.slice_cols(aw, bw));
                }
                Op::SliceCols { x, start } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adjoints, *x, dx);
                }
                Op::SumAll { x } => {
                    let xv = &self.nodes[x.0].value;
                    let s = g.data[0];
                    let dx = Matrix {
                        rows: xv.rows,
                        cols: xv.cols,
                        data: vec![s; xv.rows * xv.cols],
                    };
                    accumulate(&mut adjoints, *x, dx);
                }
                Op::GroupSoftmax { x, group } => {
                    let yv = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let yrow = yv.row(r);
                        let grow = g.row(r);
                        let drow = dx.row_mut(r);
                        for c0 in (0..yrow.len()).step_by(*group) {
                            let y = &yrow[c0..c0 + group];
                            let gg = &grow[c0..c0 + group];
                            let inner = dot(y, gg);
                            for j in 0..*group {
                                drow[c0 + j] = y[j] * (gg[j] - inner);
                            }
                        }
                    }
                    accumulate(&mut adjoints, *x, dx);
                }
                Op::L2NormRows { x, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let n = dot(xr, xr).sqrt();
                        let denom = n + eps;
                        let gx = dot(gr, xr);
                        let coef = gx / (n.max(*eps) * denom * denom);
                        for j in 0..xr.len() {
                            dx.row_mut(r)[j] = gr[j] / denom - coef * xr[j];
                        }
                    }
                    accumulate(&mut adjoints, *x, dx);
                }
                Op::BceWithLogits { logits, targets } => {
                    let lv = &self.nodes[logits.0].value;
                    let mut dl = Matrix::zeros(g.rows, g.cols);
                    for i in 0..dl.data.len() {
                        let sig = 1.0 / (1.0 + (-lv.data[i]).exp());
                        dl.data[i] = g.data[i] * (sig - targets.data[i]);
                    }
                    accumulate(&mut adjoints, *logits, dl);
                }
            }
        }
    }
}

fn apply_unary(kind: UnaryKind, v: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => v.tanh(),
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        UnaryKind::Mish => v * softplus(v).tanh(),
        UnaryKind::Exp => v.exp(),
        UnaryKind::Ln => v.ln(),
        UnaryKind::Neg => -v,
        UnaryKind::Square => v * v,
    }
}

/// d(out)/d(in) given the input `x` and the already-computed output `y`.
fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Mish => {
            let t = softplus(x).tanh();
            let sig = 1.0 / (1.0 + (-x).exp());
            t + x * sig * (1.0 - t * t)
        }
        UnaryKind::Exp => y,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::Neg => -1.0,
        UnaryKind::Square => 2.0 * x,
    }
}

/// Overflow-safe `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;

    /// Central finite difference of a scalar-valued function of one stored
    /// parameter entry.
    fn fd_param<F>(store: &mut ParamStore, id: ParamId, idx: usize, h: f64, mut f: F) -> f64
    where
        F: FnMut(&ParamStore) -> f64,
    {
        let orig = store.value(id).data[idx];
        store.get_mut(id).value.data[idx] = orig + h;
        let hi = f(store);
        store.get_mut(id).value.data[idx] = orig - h;
        let lo = f(store);
        store.get_mut(id).value.data[idx] = orig;
        (hi - lo) / (2.0 * h)
    }

    fn build_store() -> (ParamStore, ParamId, ParamId) {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            ParamGroup::Model,
            Matrix::from_vec(3, 2, vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.25]).unwrap(),
        );
        let b = store.add("b", ParamGroup::Model, Matrix::row_vec(vec![0.05, -0.1]));
        (store, w, b)
    }

    fn input() -> Matrix {
        Matrix::from_vec(2, 3, vec![0.9, -0.3, 0.4, -0.7, 0.2, 0.6]).unwrap()
    }

    /// A small composite touching most ops: mish(linear) -> group softmax ->
    /// square-error against a constant -> mean.
    fn loss(store: &ParamStore, w: ParamId, b: ParamId) -> (Tape, NodeId) {
        let mut tape = Tape::new();
        let x = tape.constant(input());
        let lin = tape.linear(store, w, b, x);
        let act = tape.mish(lin);
        let sm = tape.group_softmax(act, 2);
        let target = tape.constant(Matrix::from_vec(2, 2, vec![0.7, 0.3, 0.2, 0.8]).unwrap());
        let diff = tape.sub(sm, target);
        let sq = tape.square(diff);
        let l = tape.mean_all(sq);
        (tape, l)
    }

    #[test]
    fn linear_mish_softmax_gradients_match_finite_differences() {
        let (mut store, w, b) = build_store();
        let (tape, l) = loss(&store, w, b);
        tape.backward(l, &mut store);

        for id in [w, b] {
            let n = store.value(id).data.len();
            for idx in 0..n {
                let fd = fd_param(&mut store, id, idx, 1e-6, |s| {
                    let (t, node) = loss(s, w, b);
                    t.scalar(node)
                });
                let an = store.grad(id).data[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "param {:?} idx {idx}: fd {fd} vs analytic {an}",
                    id
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        // A 1x4 weight applied to a scalar input acts as a trainable leaf
        // vector, letting one chain exercise tanh/sigmoid/exp/min/mul/ln.
        let mut store = ParamStore::new();
        let p = store.add(
            "p",
            ParamGroup::Policy,
            Matrix::row_vec(vec![0.4, -0.9, 1.3, 0.05]),
        );
        store.add("pb", ParamGroup::Policy, Matrix::row_vec(vec![0.0; 4]));
        let build = |s: &ParamStore| {
            let mut t = Tape::new();
            let x = t.constant(Matrix::row_vec(vec![1.0]));
            let lin = t.linear(s, ParamId(0), ParamId(1), x);
            let a = t.tanh(lin);
            let b2 = t.sigmoid(lin);
            let c = t.exp(lin);
            let d = t.min(a, b2);
            let e = t.mul(d, c);
            let f = t.add_const(e, 2.0);
            let g = t.ln(f);
            let h = t.mul_const(g, 0.5);
            let l = t.sum_all(h);
            (t, l)
        };
        let (tape, l) = build(&store);
        tape.backward(l, &mut store);
        for idx in 0..4 {
            let fd = fd_param(&mut store, p, idx, 1e-6, |s| {
                let (t, node) = build(s);
                t.scalar(node)
            });
            let an = store.grad(p).data[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-6, "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn bce_with_logits_gradient_is_sigmoid_minus_target() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Discriminator, Matrix::row_vec(vec![0.7, -1.2]));
        let b = store.add("b", ParamGroup::Discriminator, Matrix::row_vec(vec![0.1, 0.1]));
        let targets = Matrix::row_vec(vec![1.0, 0.0]);
        let build = |s: &ParamStore| {
            let mut t = Tape::new();
            let x = t.constant(Matrix::row_vec(vec![1.0]));
            let logits = t.linear(s, ParamId(0), ParamId(1), x);
            let bce = t.bce_with_logits(logits, targets.clone());
            let l = t.sum_all(bce);
            (t, l)
        };
        let (tape, l) = build(&store);
        tape.backward(l, &mut store);
        for idx in 0..2 {
            let fd = fd_param(&mut store, w, idx, 1e-6, |s| {
                let (t, node) = build(s);
                t.scalar(node)
            });
            let an = store.grad(w).data[idx];
            assert!((fd - an).abs() < 1e-7, "idx {idx}: fd {fd} vs {an}");
        }
        let _ = b;
    }

    #[test]
    fn l2_normalize_rows_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Encoder, Matrix::row_vec(vec![0.8, -0.5, 0.3]));
        let b = store.add("b", ParamGroup::Encoder, Matrix::row_vec(vec![0.0; 3]));
        let build = |s: &ParamStore| {
            let mut t = Tape::new();
            let x = t.constant(Matrix::row_vec(vec![1.0]));
            let lin = t.linear(s, ParamId(0), ParamId(1), x);
            let nrm = t.l2_normalize_rows(lin);
            let tgt = t.constant(Matrix::row_vec(vec![0.2, 0.5, -0.3]));
            let d = t.sub(nrm, tgt);
            let sq = t.square(d);
            let l = t.sum_all(sq);
            (t, l)
        };
        let (tape, l) = build(&store);
        tape.backward(l, &mut store);
        for idx in 0..3 {
            let fd = fd_param(&mut store, w, idx, 1e-6, |s| {
                let (t, node) = build(s);
                t.scalar(node)
            });
            let an = store.grad(w).data[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-5, "idx {idx}: fd {fd} vs {an}");
        }
        let _ = b;
    }

    #[test]
    fn detach_blocks_gradient() {
        let (mut store, w, b) = build_store();
        let mut tape = Tape::new();
        let x = tape.constant(input());
        let lin = tape.linear(&store, w, b, x);
        let stopped = tape.detach(lin);
        let sq = tape.square(stopped);
        let l = tape.sum_all(sq);
        tape.backward(l, &mut store);
        assert!(store.grad(w).data.iter().all(|&g| g == 0.0));
        assert!(store.grad(b).data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn group_filter_blocks_excluded_accumulation_but_not_flow() {
        // encoder -> policy chain; filtering to Policy must still move
        // gradient through the policy layer's input, while leaving encoder
        // grads untouched.
        let mut store = ParamStore::new();
        let we = store.add("we", ParamGroup::Encoder, Matrix::from_vec(2, 2, vec![0.5, -0.3, 0.2, 0.8]).unwrap());
        let be = store.add("be", ParamGroup::Encoder, Matrix::row_vec(vec![0.1, -0.1]));
        let wp = store.add("wp", ParamGroup::Policy, Matrix::from_vec(2, 1, vec![0.7, -0.6]).unwrap());
        let bp = store.add("bp", ParamGroup::Policy, Matrix::row_vec(vec![0.05]));

        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vec(vec![0.9, -0.4]));
        let h = tape.linear(&store, we, be, x);
        let ha = tape.tanh(h);
        let out = tape.linear(&store, wp, bp, ha);
        let l = tape.sum_all(out);
        tape.backward_filtered(l, &mut store, Some(&[ParamGroup::Policy]));

        assert!(store.grad(we).data.iter().all(|&g| g == 0.0));
        assert!(store.grad(be).data.iter().all(|&g| g == 0.0));
        assert!(store.grad(wp).data.iter().any(|&g| g != 0.0));
        assert!(store.grad(bp).data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn concat_slice_sum_route_gradients_to_the_right_columns() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Model, Matrix::row_vec(vec![1.0, 2.0, 3.0]));
        let b = store.add("b", ParamGroup::Model, Matrix::row_vec(vec![0.0; 3]));
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vec(vec![1.0]));
        let lin = tape.linear(&store, w, b, x); // 1x3: [1 2 3]
        let extra = tape.constant(Matrix::row_vec(vec![10.0]));
        let cat = tape.concat_cols(lin, extra); // 1x4
        // Take only column 1 (value 2.0) and scale by 5.
        let sl = tape.slice_cols(cat, 1, 1);
        let scaled = tape.mul_const(sl, 5.0);
        let l = tape.sum_all(scaled);
        assert!((tape.scalar(l) - 10.0).abs() < 1e-12);
        tape.backward(l, &mut store);
        assert_eq!(store.grad(w).data, vec![0.0, 5.0, 0.0]);
        assert_eq!(store.grad(b).data, vec![0.0, 5.0, 0.0]);
    }
}
