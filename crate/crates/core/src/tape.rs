//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! Every value is a [`Mat`]; images and sequences are stored channels-last
//! with one row per pixel/sample so convolutions reduce to `im2col` + GEMM.
//! Nodes whose inputs need no gradient are recorded as constants, so
//! inference and frozen sub-networks never pay for backward bookkeeping.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::tensor::{gemm, gemm_block, Block, Mat, Real};

/// Shape bookkeeping for a same-padded, stride-1 convolution lowered to `im2col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn pad(&self) -> (isize, isize) {
        (((self.kh - 1) / 2) as isize, ((self.kw - 1) / 2) as isize)
    }
}

type Idx = Rc<Vec<usize>>;

enum Op<S: Real> {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Relu(usize),
    LeakyRelu(usize, S),
    Gelu(usize),
    Norm { x: usize, gamma: usize, beta: usize, group_rows: usize, groups: usize, xhat: Mat<S>, rstd: Vec<S> },
    Im2Col { x: usize, geom: ConvGeom },
    MeanRows { x: usize, group: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, idx: Idx },
    ScatterAddRows { x: usize, idx: Idx },
    SegmentSoftmax { x: usize, seg: Idx, n_seg: usize },
    MulCol(usize, usize),
    Attention(Box<AttnSaved<S>>),
    SelectRows { a: usize, b: usize, mask: Rc<Vec<bool>>, broadcast: bool },
    SegmentMax { x: usize, argmax: Vec<usize> },
    Dropout { x: usize, mask: Mat<S> },
    WeightedSqErr { pred: usize, target: Rc<Mat<S>>, weights: Rc<Vec<S>> },
    WeightedBce { logits: usize, target: Rc<Mat<S>>, weights: Rc<Vec<S>>, eps: S },
    WeightedCe { logits: usize, labels: Rc<Vec<usize>>, weights: Rc<Vec<S>> },
    SumAll(usize),
}

struct AttnSaved<S: Real> {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    q_off: Idx,
    kv_off: Idx,
    /// Softmax probabilities per (segment, head), before dropout.
    probs: Vec<Mat<S>>,
    /// Scaled keep-masks per (segment, head) when attention dropout is active.
    keep: Vec<Option<Mat<S>>>,
}

struct Node<S: Real> {
    value: Rc<Mat<S>>,
    op: Op<S>,
    grad: bool,
}

/// Records operations for a single forward pass.
pub struct Tape<S: Real> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, S: Real> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Real> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S: Real> Copy for Var<'_, S> {}

/// Gradients produced by [`Tape::backward`], retained for leaves only.
pub struct Grads<S: Real> {
    grads: Vec<Option<Mat<S>>>,
}

impl<S: Real> Grads<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Mat<S>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, S>) -> Option<Mat<S>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient (a parameter or a probed input).
    pub fn param(&self, value: Mat<S>) -> Var<'_, S> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Mat<S>) -> Var<'_, S> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, S> {
        self.constant(Mat::filled(1, 1, S::of(v)))
    }

    fn push_raw(&self, value: Mat<S>, op: Op<S>, grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].grad)
    }

    fn push(&self, value: Mat<S>, op: Op<S>, inputs: &[usize]) -> Var<'_, S> {
        if self.needs(inputs) {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    fn val(&self, id: usize) -> Rc<Mat<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Column-wise concatenation.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|p| self.val(p.id)).collect();
        let rows = vals[0].rows();
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut c0 = 0;
            for v in &vals {
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                dst[c0..c0 + v.cols()].copy_from_slice(v.row(r));
                c0 += v.cols();
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(out, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Segmented multi-head scaled dot-product attention on already projected
    /// queries, keys and values. Segment `s` of the queries (rows
    /// `q_off[s]..q_off[s+1]`) attends only to segment `s` of the keys.
    /// Query segments whose key segment is empty produce zero rows.
    #[allow(clippy::too_many_arguments)]
    pub fn attention<'t>(
        &'t self,
        q: Var<'t, S>,
        k: Var<'t, S>,
        v: Var<'t, S>,
        heads: usize,
        q_off: &[usize],
        kv_off: &[usize],
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Var<'t, S> {
        let (qv, kv, vv) = (self.val(q.id), self.val(k.id), self.val(v.id));
        let dim = qv.cols();
        assert_eq!(kv.cols(), dim);
        assert_eq!(vv.shape(), kv.shape());
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        assert_eq!(q_off.len(), kv_off.len());
        assert_eq!(*q_off.last().unwrap(), qv.rows());
        assert_eq!(*kv_off.last().unwrap(), kv.rows());
        let dh = dim / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut out = Mat::zeros(qv.rows(), dim);
        let mut probs = Vec::new();
        let mut keep = Vec::new();
        let mut dropout = dropout;
        for s in 0..q_off.len() - 1 {
            let (q0, nq) = (q_off[s], q_off[s + 1] - q_off[s]);
            let (k0, nk) = (kv_off[s], kv_off[s + 1] - kv_off[s]);
            for h in 0..heads {
                if nq == 0 || nk == 0 {
                    probs.push(Mat::zeros(nq, nk));
                    keep.push(None);
                    continue;
                }
                let mut p = Mat::zeros(nq, nk);
                gemm_block(
                    Block::of(&qv, q0, nq, h * dh, dh),
                    Block::of(&kv, k0, nk, h * dh, dh).t(),
                    &mut p,
                    0,
                    0,
                    S::zero(),
                );
                for r in 0..nq {
                    softmax_in_place(p.row_mut(r), scale);
                }
                let mask = dropout.as_mut().map(|(rate, rng)| keep_mask::<S>(nq, nk, *rate, &mut **rng));
                let applied = match &mask {
                    Some(m) => mul_elem(&p, m),
                    None => p.clone(),
                };
                gemm_block(
                    Block::of(&applied, 0, nq, 0, nk),
                    Block::of(&vv, k0, nk, h * dh, dh),
                    &mut out,
                    q0,
                    h * dh,
                    S::zero(),
                );
                probs.push(p);
                keep.push(mask);
            }
        }
        let saved = AttnSaved {
            q: q.id,
            k: k.id,
            v: v.id,
            heads,
            q_off: Rc::new(q_off.to_vec()),
            kv_off: Rc::new(kv_off.to_vec()),
            probs,
            keep,
        };
        self.push(out, Op::Attention(Box::new(saved)), &[q.id, k.id, v.id])
    }

    /// Backpropagates from a scalar `root` (1x1). Returns gradients of all leaves
    /// that were recorded with [`Tape::param`].
    pub fn backward(&self, root: Var<'_, S>) -> Grads<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Mat<S>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].grad {
            return Grads { grads };
        }
        grads[root.id] = Some(Mat::filled(1, 1, S::one()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.grad {
                continue;
            }
            let mut acc = |input: usize, m: Mat<S>| {
                if !nodes[input].grad {
                    return;
                }
                match &mut grads[input] {
                    Some(existing) => existing.add_assign(&m),
                    slot @ None => *slot = Some(m),
                }
            };
            let val = |i: usize| &*nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].grad {
                        let mut ga = Mat::zeros(val(*a).rows(), val(*a).cols());
                        gemm(&g, false, val(*b), true, &mut ga, S::zero());
                        acc(*a, ga);
                    }
                    if nodes[*b].grad {
                        let mut gb = Mat::zeros(val(*b).rows(), val(*b).cols());
                        gemm(val(*a), true, &g, false, &mut gb, S::zero());
                        acc(*b, gb);
                    }
                }
                Op::AddBias(x, b) => {
                    if nodes[*b].grad {
                        let mut gb = Mat::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(*b, gb);
                    }
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    if nodes[*b].grad {
                        acc(*b, g.clone());
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    if nodes[*b].grad {
                        acc(*b, g.map(|x| -x));
                    }
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].grad {
                        acc(*a, mul_elem(&g, val(*b)));
                    }
                    if nodes[*b].grad {
                        acc(*b, mul_elem(&g, val(*a)));
                    }
                }
                Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
                Op::Relu(x) => {
                    let xv = val(*x);
                    acc(*x, zip_map(&g, xv, |g, x| if x > S::zero() { g } else { S::zero() }));
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = val(*x);
                    acc(*x, zip_map(&g, xv, |g, x| if x > S::zero() { g } else { g * *slope }));
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    acc(*x, zip_map(&g, xv, |g, x| g * gelu_grad(x)));
                }
                Op::Norm { x, gamma, beta, group_rows, groups, xhat, rstd } => {
                    let gm = val(*gamma);
                    let c = g.cols();
                    if nodes[*gamma].grad || nodes[*beta].grad {
                        let mut gg = Mat::zeros(1, c);
                        let mut gb = Mat::zeros(1, c);
                        for r in 0..g.rows() {
                            for j in 0..c {
                                let gv = g.get(r, j);
                                gg.data_mut()[j] += gv * xhat.get(r, j);
                                gb.data_mut()[j] += gv;
                            }
                        }
                        acc(*gamma, gg);
                        acc(*beta, gb);
                    }
                    if nodes[*x].grad {
                        acc(*x, norm_backward(&g, xhat, rstd, gm, *group_rows, *groups));
                    }
                }
                Op::Im2Col { x, geom } => acc(*x, col2im(&g, *geom, val(*x).cols())),
                Op::MeanRows { x, group } => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    let inv = S::one() / S::of(*group as f64);
                    for r in 0..xv.rows() {
                        let src = g.row(r / group);
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(src) {
                            *o = v * inv;
                        }
                    }
                    acc(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = val(p).cols();
                        if nodes[p].grad {
                            let mut gp = Mat::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                            }
                            acc(p, gp);
                        }
                        c0 += pc;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*x, gx);
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*x, gx);
                }
                Op::ScatterAddRows { x, idx } => acc(*x, g.gather_rows(idx)),
                Op::SegmentSoftmax { x, seg, n_seg } => {
                    let y = &*node.value;
                    let mut dot = vec![S::zero(); *n_seg];
                    for (i, &s) in seg.iter().enumerate() {
                        dot[s] += y.data()[i] * g.data()[i];
                    }
                    let gx: Vec<S> =
                        seg.iter().enumerate().map(|(i, &s)| y.data()[i] * (g.data()[i] - dot[s])).collect();
                    acc(*x, Mat::from_vec(y.rows(), 1, gx));
                }
                Op::MulCol(x, s) => {
                    let (xv, sv) = (val(*x), val(*s));
                    if nodes[*x].grad {
                        let mut gx = g.clone();
                        for r in 0..gx.rows() {
                            let f = sv.data()[r];
                            gx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                        }
                        acc(*x, gx);
                    }
                    if nodes[*s].grad {
                        let gs: Vec<S> = (0..g.rows())
                            .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum())
                            .collect();
                        acc(*s, Mat::from_vec(g.rows(), 1, gs));
                    }
                }
                Op::Attention(saved) => {
                    for (input, m) in attention_backward(&g, saved, &nodes) {
                        acc(input, m);
                    }
                }
                Op::SelectRows { a, b, mask, broadcast } => {
                    if nodes[*a].grad {
                        let mut ga = g.clone();
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                ga.row_mut(r).iter_mut().for_each(|v| *v = S::zero());
                            }
                        }
                        acc(*a, ga);
                    }
                    if nodes[*b].grad {
                        let mut gb = Mat::zeros(val(*b).rows(), val(*b).cols());
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                let dst = if *broadcast { 0 } else { r };
                                for (o, &v) in gb.row_mut(dst).iter_mut().zip(g.row(r)) {
                                    *o += v;
                                }
                            }
                        }
                        acc(*b, gb);
                    }
                }
                Op::SegmentMax { x, argmax } => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    for (k, &r) in argmax.iter().enumerate() {
                        let (s, j) = (k / c, k % c);
                        gx.data_mut()[r * c + j] += g.get(s, j);
                    }
                    acc(*x, gx);
                }
                Op::Dropout { x, mask } => acc(*x, mul_elem(&g, mask)),
                Op::WeightedSqErr { pred, target, weights } => {
                    let pv = val(*pred);
                    let g0 = g.data()[0];
                    let mut gp = Mat::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        let w = weights[r] * S::of(2.0) * g0;
                        for ((o, &p), &t) in gp.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                            *o = w * (p - t);
                        }
                    }
                    acc(*pred, gp);
                }
                Op::WeightedBce { logits, target, weights, eps } => {
                    let zv = val(*logits);
                    let g0 = g.data()[0];
                    let mut gz = Mat::zeros(zv.rows(), zv.cols());
                    for r in 0..zv.rows() {
                        for c in 0..zv.cols() {
                            let p = sigmoid(zv.get(r, c));
                            let d = if p < *eps || p > S::one() - *eps { S::zero() } else { p - target.get(r, c) };
                            gz.set(r, c, d * weights[r] * g0);
                        }
                    }
                    acc(*logits, gz);
                }
                Op::WeightedCe { logits, labels, weights } => {
                    let zv = val(*logits);
                    let g0 = g.data()[0];
                    let mut gz = zv.clone();
                    for r in 0..zv.rows() {
                        softmax_in_place(gz.row_mut(r), S::one());
                        let w = weights[r] * g0;
                        let row = gz.row_mut(r);
                        row[labels[r]] -= S::one();
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    acc(*logits, gz);
                }
                Op::SumAll(x) => {
                    let xv = val(*x);
                    acc(*x, Mat::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
            }
        }
        Grads { grads }
    }
}

impl<'t, S: Real> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat<S>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].grad
    }

    /// The scalar value of a 1x1 node.
    pub fn item(&self) -> S {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    /// Same value, cut from gradient flow.
    pub fn detach(self) -> Var<'t, S> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn unary(self, value: Mat<S>, op: Op<S>) -> Var<'t, S> {
        self.tape.push(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t, S>, value: Mat<S>, op: Op<S>) -> Var<'t, S> {
        self.tape.push(value, op, &[self.id, other.id])
    }

    pub fn matmul(self, w: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), w.value());
        let mut out = Mat::zeros(a.rows(), b.cols());
        gemm(&a, false, &b, false, &mut out, S::zero());
        self.binary(w, out, Op::MatMul(self.id, w.id))
    }

    /// Adds a 1xC row to every row.
    pub fn add_bias(self, b: Var<'t, S>) -> Var<'t, S> {
        let (x, bv) = (self.value(), b.value());
        assert_eq!(bv.shape(), (1, x.cols()), "bias shape");
        let mut out = (*x).clone();
        for r in 0..out.rows() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += v;
            }
        }
        self.binary(b, out, Op::AddBias(self.id, b.id))
    }

    pub fn add(self, o: Var<'t, S>) -> Var<'t, S> {
        let out = zip_map(&self.value(), &o.value(), |a, b| a + b);
        self.binary(o, out, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, S>) -> Var<'t, S> {
        let out = zip_map(&self.value(), &o.value(), |a, b| a - b);
        self.binary(o, out, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, S>) -> Var<'t, S> {
        let out = mul_elem(&self.value(), &o.value());
        self.binary(o, out, Op::Mul(self.id, o.id))
    }

    pub fn scale(self, s: f64) -> Var<'t, S> {
        let s = S::of(s);
        let out = self.value().map(|x| x * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    pub fn relu(self) -> Var<'t, S> {
        let out = self.value().map(|x| x.max(S::zero()));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, S> {
        let s = S::of(slope);
        let out = self.value().map(|x| if x > S::zero() { x } else { x * s });
        self.unary(out, Op::LeakyRelu(self.id, s))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t, S> {
        let out = self.value().map(gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    /// Normalization over groups of `group_rows` consecutive rows and
    /// `cols / groups` consecutive channels, followed by a per-channel affine map.
    /// `group_rows = 1, groups = 1` is LayerNorm; `group_rows = H*W` is GroupNorm.
    pub fn norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, group_rows: usize, groups: usize, eps: f64) -> Var<'t, S> {
        let x = self.value();
        let (rows, cols) = x.shape();
        assert!(group_rows > 0 && rows % group_rows == 0, "norm: rows not divisible by group size");
        assert!(cols % groups == 0, "norm: channels not divisible by groups");
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.shape(), (1, cols));
        assert_eq!(bv.shape(), (1, cols));
        let cg = cols / groups;
        let n = S::of((group_rows * cg) as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows / group_rows * groups);
        for s in 0..rows / group_rows {
            for gi in 0..groups {
                let (c0, c1) = (gi * cg, (gi + 1) * cg);
                let mut mean = S::zero();
                for r in s * group_rows..(s + 1) * group_rows {
                    mean += x.row(r)[c0..c1].iter().copied().sum::<S>();
                }
                mean = mean / n;
                let mut var = S::zero();
                for r in s * group_rows..(s + 1) * group_rows {
                    var += x.row(r)[c0..c1].iter().map(|&v| (v - mean) * (v - mean)).sum::<S>();
                }
                let rs = S::one() / (var / n + S::of(eps)).sqrt();
                for r in s * group_rows..(s + 1) * group_rows {
                    for c in c0..c1 {
                        xhat.set(r, c, (x.get(r, c) - mean) * rs);
                    }
                }
                rstd.push(rs);
            }
        }
        let mut out = xhat.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, xhat.get(r, c) * gv.data()[c] + bv.data()[c]);
            }
        }
        self.tape.push(
            out,
            Op::Norm { x: self.id, gamma: gamma.id, beta: beta.id, group_rows, groups, xhat, rstd },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Lowers a channels-last image batch (rows = batch*height*width) to the
    /// patch matrix of a same-padded stride-1 `kh x kw` convolution.
    pub fn im2col(self, geom: ConvGeom) -> Var<'t, S> {
        let x = self.value();
        let c = x.cols();
        assert_eq!(x.rows(), geom.batch * geom.height * geom.width, "im2col: row count");
        let (ph, pw) = geom.pad();
        let mut out = Mat::zeros(x.rows(), geom.kh * geom.kw * c);
        for b in 0..geom.batch {
            for i in 0..geom.height {
                for j in 0..geom.width {
                    let row = (b * geom.height + i) * geom.width + j;
                    let dst = out.row_mut(row);
                    for di in 0..geom.kh {
                        let ii = i as isize + di as isize - ph;
                        if ii < 0 || ii >= geom.height as isize {
                            continue;
                        }
                        for dj in 0..geom.kw {
                            let jj = j as isize + dj as isize - pw;
                            if jj < 0 || jj >= geom.width as isize {
                                continue;
                            }
                            let src = (b * geom.height + ii as usize) * geom.width + jj as usize;
                            let k = (di * geom.kw + dj) * c;
                            dst[k..k + c].copy_from_slice(x.row(src));
                        }
                    }
                }
            }
        }
        self.unary(out, Op::Im2Col { x: self.id, geom })
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_rows(self, group: usize) -> Var<'t, S> {
        let x = self.value();
        assert!(group > 0 && x.rows() % group == 0);
        let n = x.rows() / group;
        let inv = S::one() / S::of(group as f64);
        let mut out = Mat::zeros(n, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.row_mut(r / group).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
        self.unary(out, Op::MeanRows { x: self.id, group })
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t, S> {
        let x = self.value();
        assert!(start <= end && end <= x.cols());
        let mut out = Mat::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.unary(out, Op::SliceCols { x: self.id, start })
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t, S> {
        let x = self.value();
        assert!(start <= end && end <= x.rows());
        let out = Mat::from_vec(end - start, x.cols(), x.data()[start * x.cols()..end * x.cols()].to_vec());
        self.unary(out, Op::SliceRows { x: self.id, start })
    }

    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'t, S> {
        let out = self.value().gather_rows(&idx);
        self.unary(out, Op::GatherRows { x: self.id, idx })
    }

    /// `out[idx[i]] += self[i]` into a zero matrix with `n_out` rows.
    pub fn scatter_add_rows(self, idx: Rc<Vec<usize>>, n_out: usize) -> Var<'t, S> {
        let x = self.value();
        assert_eq!(idx.len(), x.rows());
        let mut out = Mat::zeros(n_out, x.cols());
        for (i, &r) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.unary(out, Op::ScatterAddRows { x: self.id, idx })
    }

    /// Softmax over the entries of a column vector that share a segment id.
    pub fn segment_softmax(self, seg: Rc<Vec<usize>>, n_seg: usize) -> Var<'t, S> {
        let x = self.value();
        assert_eq!(x.cols(), 1);
        assert_eq!(seg.len(), x.rows());
        let mut mx = vec![S::neg_infinity(); n_seg];
        for (i, &s) in seg.iter().enumerate() {
            mx[s] = mx[s].max(x.data()[i]);
        }
        let e: Vec<S> = seg.iter().enumerate().map(|(i, &s)| (x.data()[i] - mx[s]).exp()).collect();
        let mut den = vec![S::zero(); n_seg];
        for (i, &s) in seg.iter().enumerate() {
            den[s] += e[i];
        }
        let y: Vec<S> = seg.iter().enumerate().map(|(i, &s)| e[i] / den[s]).collect();
        self.unary(Mat::from_vec(x.rows(), 1, y), Op::SegmentSoftmax { x: self.id, seg, n_seg })
    }

    /// Scales row `r` by `s[r]` (`s` is a column vector).
    pub fn mul_col(self, s: Var<'t, S>) -> Var<'t, S> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.shape(), (x.rows(), 1));
        let mut out = (*x).clone();
        for r in 0..out.rows() {
            let f = sv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        self.binary(s, out, Op::MulCol(self.id, s.id))
    }

    /// Row `r` comes from `b` where `mask[r]` holds, else from `self`.
    /// A single-row `b` is broadcast.
    pub fn select_rows(self, b: Var<'t, S>, mask: Rc<Vec<bool>>) -> Var<'t, S> {
        let (a, bv) = (self.value(), b.value());
        assert_eq!(mask.len(), a.rows());
        assert_eq!(bv.cols(), a.cols());
        let broadcast = bv.rows() == 1 && a.rows() != 1;
        assert!(broadcast || bv.rows() == a.rows());
        let mut out = (*a).clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(bv.row(if broadcast { 0 } else { r }));
            }
        }
        self.binary(b, out, Op::SelectRows { a: self.id, b: b.id, mask, broadcast })
    }

    /// Per-channel maximum over each row segment `offsets[s]..offsets[s+1]`.
    pub fn segment_max(self, offsets: &[usize]) -> Var<'t, S> {
        let x = self.value();
        let c = x.cols();
        let n_seg = offsets.len() - 1;
        let mut out = Mat::zeros(n_seg, c);
        let mut argmax = vec![0usize; n_seg * c];
        for s in 0..n_seg {
            assert!(offsets[s + 1] > offsets[s], "segment_max: empty segment");
            for j in 0..c {
                let mut best = offsets[s];
                for r in offsets[s] + 1..offsets[s + 1] {
                    if x.get(r, j) > x.get(best, j) {
                        best = r;
                    }
                }
                argmax[s * c + j] = best;
                out.set(s, j, x.get(best, j));
            }
        }
        self.unary(out, Op::SegmentMax { x: self.id, argmax })
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(self, rate: f64, rng: &mut dyn rand::RngCore) -> Var<'t, S> {
        if rate <= 0.0 {
            return self;
        }
        let x = self.value();
        let mask = keep_mask::<S>(x.rows(), x.cols(), rate, rng);
        let out = mul_elem(&x, &mask);
        self.unary(out, Op::Dropout { x: self.id, mask })
    }

    /// `sum_r w_r * sum_c (self[r,c] - target[r,c])^2` as a 1x1 value.
    pub fn weighted_sq_err(self, target: Rc<Mat<S>>, weights: Rc<Vec<S>>) -> Var<'t, S> {
        let p = self.value();
        assert_eq!(p.shape(), target.shape(), "weighted_sq_err shape");
        assert_eq!(weights.len(), p.rows());
        let mut total = S::zero();
        for r in 0..p.rows() {
            if weights[r] == S::zero() {
                continue;
            }
            let s: S = p.row(r).iter().zip(target.row(r)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            total += weights[r] * s;
        }
        self.unary(Mat::filled(1, 1, total), Op::WeightedSqErr { pred: self.id, target, weights })
    }

    /// Weighted binary cross-entropy of `sigmoid(self)` against `target`, with
    /// the probability clamped to `[eps, 1 - eps]`.
    pub fn weighted_bce_logits(self, target: Rc<Mat<S>>, weights: Rc<Vec<S>>, eps: f64) -> Var<'t, S> {
        let z = self.value();
        assert_eq!(z.shape(), target.shape());
        assert_eq!(weights.len(), z.rows());
        let eps = S::of(eps);
        let mut total = S::zero();
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                let p = sigmoid(z.get(r, c)).max(eps).min(S::one() - eps);
                let t = target.get(r, c);
                total += weights[r] * -(t * p.ln() + (S::one() - t) * (S::one() - p).ln());
            }
        }
        self.unary(Mat::filled(1, 1, total), Op::WeightedBce { logits: self.id, target, weights, eps })
    }

    /// Weighted softmax cross-entropy of each row against an integer label.
    pub fn weighted_cross_entropy(self, labels: Rc<Vec<usize>>, weights: Rc<Vec<S>>) -> Var<'t, S> {
        let z = self.value();
        assert_eq!(labels.len(), z.rows());
        assert_eq!(weights.len(), z.rows());
        let mut total = S::zero();
        for r in 0..z.rows() {
            let row = z.row(r);
            assert!(labels[r] < row.len(), "label out of range");
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
            total += weights[r] * (lse - row[labels[r]]);
        }
        self.unary(Mat::filled(1, 1, total), Op::WeightedCe { logits: self.id, labels, weights })
    }

    pub fn sum_all(self) -> Var<'t, S> {
        let s = self.value().sum();
        self.unary(Mat::filled(1, 1, s), Op::SumAll(self.id))
    }
}

pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) fn gelu<S: Real>(x: S) -> S {
    S::of(0.5) * x * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let cdf = S::of(0.5) * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * S::of(0.5)).exp() * S::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn softmax_in_place<S: Real>(row: &mut [S], scale: S) {
    let mx = row.iter().map(|&v| v * scale).fold(S::neg_infinity(), S::max);
    let mut den = S::zero();
    for v in row.iter_mut() {
        *v = (*v * scale - mx).exp();
        den += *v;
    }
    for v in row.iter_mut() {
        *v = *v / den;
    }
}

fn keep_mask<S: Real>(rows: usize, cols: usize, rate: f64, rng: &mut dyn rand::RngCore) -> Mat<S> {
    let keep = S::of(1.0 / (1.0 - rate));
    let data = (0..rows * cols).map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep }).collect();
    Mat::from_vec(rows, cols, data)
}

fn zip_map<S: Real>(a: &Mat<S>, b: &Mat<S>, f: impl Fn(S, S) -> S) -> Mat<S> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Mat::from_vec(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn mul_elem<S: Real>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    zip_map(a, b, |x, y| x * y)
}

fn norm_backward<S: Real>(
    g: &Mat<S>,
    xhat: &Mat<S>,
    rstd: &[S],
    gamma: &Mat<S>,
    group_rows: usize,
    groups: usize,
) -> Mat<S> {
    let (rows, cols) = g.shape();
    let cg = cols / groups;
    let n = S::of((group_rows * cg) as f64);
    let mut gx = Mat::zeros(rows, cols);
    for s in 0..rows / group_rows {
        for gi in 0..groups {
            let rs = rstd[s * groups + gi];
            let (c0, c1) = (gi * cg, (gi + 1) * cg);
            let mut sum_d = S::zero();
            let mut sum_dx = S::zero();
            for r in s * group_rows..(s + 1) * group_rows {
                for c in c0..c1 {
                    let d = g.get(r, c) * gamma.data()[c];
                    sum_d += d;
                    sum_dx += d * xhat.get(r, c);
                }
            }
            for r in s * group_rows..(s + 1) * group_rows {
                for c in c0..c1 {
                    let d = g.get(r, c) * gamma.data()[c];
                    gx.set(r, c, rs / n * (n * d - sum_d - xhat.get(r, c) * sum_dx));
                }
            }
        }
    }
    gx
}

fn col2im<S: Real>(g: &Mat<S>, geom: ConvGeom, c: usize) -> Mat<S> {
    let (ph, pw) = geom.pad();
    let mut gx = Mat::zeros(g.rows(), c);
    for b in 0..geom.batch {
        for i in 0..geom.height {
            for j in 0..geom.width {
                let row = (b * geom.height + i) * geom.width + j;
                for di in 0..geom.kh {
                    let ii = i as isize + di as isize - ph;
                    if ii < 0 || ii >= geom.height as isize {
                        continue;
                    }
                    for dj in 0..geom.kw {
                        let jj = j as isize + dj as isize - pw;
                        if jj < 0 || jj >= geom.width as isize {
                            continue;
                        }
                        let dst = (b * geom.height + ii as usize) * geom.width + jj as usize;
                        let k = (di * geom.kw + dj) * c;
                        let src = &g.row(row)[k..k + c];
                        for (o, &v) in gx.row_mut(dst).iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    gx
}

fn attention_backward<S: Real>(g: &Mat<S>, sv: &AttnSaved<S>, nodes: &[Node<S>]) -> Vec<(usize, Mat<S>)> {
    let (qv, kv, vv) = (&*nodes[sv.q].value, &*nodes[sv.k].value, &*nodes[sv.v].value);
    let dim = qv.cols();
    let dh = dim / sv.heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let (need_q, need_k, need_v) = (nodes[sv.q].grad, nodes[sv.k].grad, nodes[sv.v].grad);
    let mut gq = Mat::zeros(qv.rows(), dim);
    let mut gk = Mat::zeros(kv.rows(), dim);
    let mut gv = Mat::zeros(vv.rows(), dim);
    let mut slot = 0;
    for s in 0..sv.q_off.len() - 1 {
        let (q0, nq) = (sv.q_off[s], sv.q_off[s + 1] - sv.q_off[s]);
        let (k0, nk) = (sv.kv_off[s], sv.kv_off[s + 1] - sv.kv_off[s]);
        for h in 0..sv.heads {
            let p = &sv.probs[slot];
            let keep = &sv.keep[slot];
            slot += 1;
            if nq == 0 || nk == 0 {
                continue;
            }
            let d_out = Block::of(g, q0, nq, h * dh, dh);
            if need_v {
                let applied = match keep {
                    Some(m) => mul_elem(p, m),
                    None => p.clone(),
                };
                gemm_block(Block::of(&applied, 0, nq, 0, nk).t(), d_out, &mut gv, k0, h * dh, S::one());
            }
            if !(need_q || need_k) {
                continue;
            }
            let mut dp = Mat::zeros(nq, nk);
            gemm_block(d_out, Block::of(vv, k0, nk, h * dh, dh).t(), &mut dp, 0, 0, S::zero());
            if let Some(m) = keep {
                dp = mul_elem(&dp, m);
            }
            for r in 0..nq {
                let dot: S = dp.row(r).iter().zip(p.row(r)).map(|(&a, &b)| a * b).sum();
                for c in 0..nk {
                    let v = p.get(r, c) * (dp.get(r, c) - dot) * scale;
                    dp.set(r, c, v);
                }
            }
            if need_q {
                gemm_block(Block::of(&dp, 0, nq, 0, nk), Block::of(kv, k0, nk, h * dh, dh), &mut gq, q0, h * dh, S::one());
            }
            if need_k {
                gemm_block(Block::of(&dp, 0, nq, 0, nk).t(), Block::of(qv, q0, nq, h * dh, dh), &mut gk, k0, h * dh, S::one());
            }
        }
    }
    vec![(sv.q, gq), (sv.k, gk), (sv.v, gv)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(f)/d(inputs) for a scalar-valued graph builder.
    fn check_grad(inputs: Vec<Mat<f64>>, f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>) {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()));
            for i in 0..m.len() {
                let eval = |delta: f64| {
                    let t = Tape::new();
                    let vs: Vec<_> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, mm)| {
                            let mut mm = mm.clone();
                            if j == k {
                                mm.data_mut()[i] += delta;
                            }
                            t.param(mm)
                        })
                        .collect();
                    f(&t, &vs).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} entry {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn sq<'t>(v: Var<'t, f64>) -> Var<'t, f64> {
        v.mul(v).sum_all()
    }

    #[test]
    fn linear_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, w, b) = (rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 1, 2));
        check_grad(vec![a, w, b], |_, v| sq(v[0].matmul(v[1]).add_bias(v[2]).gelu()));
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_mat(&mut rng, 3, 3), rand_mat(&mut rng, 3, 3));
        check_grad(vec![a, b], |_, v| sq(v[0].mul(v[1]).sub(v[0].scale(0.3)).add(v[1]).leaky_relu(0.2)));
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 6, 4);
        let g = rand_mat(&mut rng, 1, 4);
        let b = rand_mat(&mut rng, 1, 4);
        let w = rand_mat(&mut rng, 6, 4);
        check_grad(vec![x.clone(), g.clone(), b.clone(), w.clone()], |_, v| {
            v[0].norm(v[1], v[2], 3, 2, 1e-5).mul(v[3]).sum_all()
        });
        check_grad(vec![x, g, b, w], |_, v| v[0].norm(v[1], v[2], 1, 1, 1e-5).mul(v[3]).sum_all());
    }

    #[test]
    fn conv_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeom { batch: 2, height: 3, width: 3, kh: 3, kw: 3 };
        let x = rand_mat(&mut rng, 18, 2);
        let w = rand_mat(&mut rng, 18, 3);
        check_grad(vec![x, w], |_, v| sq(v[0].im2col(geom).matmul(v[1]).relu().mean_rows(9)));
        let geom1 = ConvGeom { batch: 2, height: 4, width: 1, kh: 3, kw: 1 };
        let x = rand_mat(&mut rng, 8, 2);
        let w = rand_mat(&mut rng, 6, 2);
        check_grad(vec![x, w], |_, v| sq(v[0].im2col(geom1).matmul(v[1]).mean_rows(4)));
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, cin, cout) = (4, 3, 2, 3);
        let x = rand_mat(&mut rng, h * w, cin);
        let k = rand_mat(&mut rng, 9 * cin, cout);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).im2col(ConvGeom { batch: 1, height: h, width: w, kh: 3, kw: 3 });
        let y = y.matmul(tape.constant(k.clone())).value();
        for i in 0..h as isize {
            for j in 0..w as isize {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            let (ii, jj) = (i + di, j + dj);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let kr = (((di + 1) * 3 + dj + 1) as usize) * cin + c;
                                acc += x.get(ii as usize * w + jj as usize, c) * k.get(kr, o);
                            }
                        }
                    }
                    let got = y.get(i as usize * w + j as usize, o);
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indexing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 4, 3);
        let s = rand_mat(&mut rng, 5, 1);
        let tok = rand_mat(&mut rng, 1, 3);
        let idx = Rc::new(vec![0, 2, 2, 3, 1]);
        let seg = Rc::new(vec![0, 1, 1, 2, 0]);
        let mask = Rc::new(vec![true, false, false, true]);
        check_grad(vec![x, s, tok], move |t, v| {
            let g = v[0].gather_rows(idx.clone());
            let a = v[1].segment_softmax(seg.clone(), 3);
            let m = g.mul_col(a).scatter_add_rows(seg.clone(), 3);
            let c = t.concat_cols(&[m, m.slice_cols(1, 3)]).slice_rows(1, 3);
            let r = v[0].select_rows(v[2], mask.clone()).segment_max(&[0, 1, 4]);
            sq(c).add(sq(r))
        });
    }

    #[test]
    fn attention_gradients_and_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_mat(&mut rng, 5, 4);
        let k = rand_mat(&mut rng, 6, 4);
        let v = rand_mat(&mut rng, 6, 4);
        let w = rand_mat(&mut rng, 5, 4);
        check_grad(vec![q, k, v, w], |t, x| {
            t.attention(x[0], x[1], x[2], 2, &[0, 2, 5], &[0, 4, 6], None).mul(x[3]).sum_all()
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = rand_mat(&mut rng, 4, 3);
        let target = Rc::new(rand_mat(&mut rng, 4, 3));
        let bin = Rc::new(Mat::from_f64(4, 1, &[1., 0., 1., 0.]));
        let w = Rc::new(vec![0.5, 0.0, 1.0, 2.0]);
        let labels = Rc::new(vec![0, 2, 1, 1]);
        check_grad(vec![p], move |_, v| {
            let a = v[0].weighted_sq_err(target.clone(), w.clone());
            let b = v[0].slice_cols(0, 1).weighted_bce_logits(bin.clone(), w.clone(), 1e-7);
            let c = v[0].weighted_cross_entropy(labels.clone(), w.clone());
            a.add(b).add(c)
        });
    }

    #[test]
    fn constants_are_pruned() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Mat::filled(2, 2, 1.0));
        let b = a.relu().scale(2.0);
        assert!(!b.requires_grad());
        let p = tape.param(Mat::filled(2, 2, 1.0));
        let c = b.mul(p).sum_all();
        assert!(c.requires_grad());
        let g = tape.backward(c);
        assert_eq!(g.get(p).unwrap().data(), &[2.0; 4]);
        assert!(g.get(a).is_none());
    }

    #[test]
    fn dropout_keeps_expectation_and_backprops_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::<f64>::new();
        let x = tape.param(Mat::filled(100, 100, 1.0));
        let y = x.dropout(0.3, &mut rng);
        let mean = y.value().sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05);
        let g = tape.backward(y.sum_all());
        assert_eq!(g.get(x).unwrap(), &*y.value());
    }
}
