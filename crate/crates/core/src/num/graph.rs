//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] is a single-use tape of eagerly evaluated ops over one
//! [`ParamStore`]. Ops only reference earlier nodes, so one reverse walk of
//! the tape is a full backward pass. Parameter values are read from the store
//! by reference; gradients accumulate per [`ParamId`] and are merged across
//! per-sequence graphs by the training loops.
//!
//! Shape errors are programming bugs and panic with the op name and the
//! offending shapes. Loss-style ops use stable formulations (log-sum-exp,
//! softplus) so finite inputs never produce NaN.

use super::{ParamId, ParamStore, Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// One row of a [`Graph::compose_rows`] input: either a row of the embedding
/// table or a computed `[1, d]` node (the latent-injection mechanism).
#[derive(Debug, Clone, Copy)]
pub enum RowSrc {
    Tok(usize),
    Node(NodeId),
}

pub(crate) const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

enum Op<S: Scalar> {
    Leaf,
    Param(ParamId),
    Matmul { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: S },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ComposeRows { table: NodeId, rows: Vec<RowSrc> },
    RowSoftmax { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, stats: Vec<(S, S)> },
    Gelu { a: NodeId, tanh_u: Tensor<S> },
    Sigmoid { a: NodeId },
    Softplus { a: NodeId },
    CausalMask { a: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<Option<usize>>, probs: Tensor<S> },
    SoftCrossEntropyRows { logits: NodeId, target_probs: Tensor<S>, probs: Tensor<S> },
    BceWithLogits { logits: NodeId, targets: Vec<S>, weights: Vec<S> },
    TokenLogProbSum { logits: NodeId, picks: Vec<(usize, usize)>, probs: Tensor<S> },
    BernoulliLogProbSum { logits: NodeId, outcomes: Vec<bool> },
    SumScalars { terms: Vec<(NodeId, S)> },
}

struct Node<S: Scalar> {
    op: Op<S>,
    /// `None` only for `Param` nodes, whose values live in the store.
    value: Option<Tensor<S>>,
}

pub struct Graph<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<ParamId, NodeId>,
    param_grads: Vec<Option<Tensor<S>>>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            param_grads: vec![None; store.len()],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        match &self.nodes[id.0] {
            Node { value: Some(v), .. } => v,
            Node { op: Op::Param(pid), .. } => self.store.value(*pid),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value: Some(value) });
        id
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Param(pid), value: None });
        self.param_nodes.insert(pid, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(
                va.cols(),
                vb.rows(),
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            );
            let mut out = Tensor::zeros(va.rows(), vb.cols());
            super::tensor::matmul_acc(va, vb, &mut out);
            out
        };
        self.push(Op::Matmul { a, b }, out)
    }

    /// `a[m,k] * b[n,k]^T`, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(
                va.cols(),
                vb.cols(),
                "matmul_nt: {:?} x {:?}^T",
                va.shape(),
                vb.shape()
            );
            let mut out = Tensor::zeros(va.rows(), vb.rows());
            super::tensor::matmul_nt_acc(va, vb, &mut out);
            out
        };
        self.push(Op::MatmulNT { a, b }, out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transposed();
        self.push(Op::Transpose { a }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "add: {:?} + {:?}", va.shape(), vb.shape());
            let mut out = va.clone();
            for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
                *o += v;
            }
            out
        };
        self.push(Op::Add { a, b }, out)
    }

    /// `[m,n] + [1,n]`, broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let out = {
            let (va, vb) = (self.value(a), self.value(bias));
            assert!(
                vb.rows() == 1 && vb.cols() == va.cols(),
                "add_bias: {:?} + {:?}",
                va.shape(),
                vb.shape()
            );
            let mut out = va.clone();
            for r in 0..out.rows() {
                for (o, &v) in out.row_mut(r).iter_mut().zip(vb.data()) {
                    *o += v;
                }
            }
            out
        };
        self.push(Op::AddBias { a, bias }, out)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(Op::Scale { a, c }, out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty parts");
        let out = {
            let cols = self.value(parts[0]).cols();
            let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.cols(), cols, "concat_rows: col mismatch {:?}", v.shape());
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(rows, cols, data)
        };
        self.push(Op::ConcatRows { parts: parts.to_vec() }, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty parts");
        let out = {
            let rows = self.value(parts[0]).rows();
            let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut at = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols: row mismatch {:?}", v.shape());
                for r in 0..rows {
                    out.row_mut(r)[at..at + v.cols()].copy_from_slice(v.row(r));
                }
                at += v.cols();
            }
            out
        };
        self.push(Op::ConcatCols { parts: parts.to_vec() }, out)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = {
            let v = self.value(a);
            assert!(
                start + len <= v.rows(),
                "slice_rows: [{start}, {start}+{len}) out of {:?}",
                v.shape()
            );
            let mut out = Tensor::zeros(len, v.cols());
            for r in 0..len {
                out.row_mut(r).copy_from_slice(v.row(start + r));
            }
            out
        };
        self.push(Op::SliceRows { a, start }, out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = {
            let v = self.value(a);
            assert!(
                start + len <= v.cols(),
                "slice_cols: [{start}, {start}+{len}) out of {:?}",
                v.shape()
            );
            let mut out = Tensor::zeros(v.rows(), len);
            for r in 0..v.rows() {
                out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
            }
            out
        };
        self.push(Op::SliceCols { a, start }, out)
    }

    /// Assemble a `[rows.len(), d]` matrix from embedding-table rows and
    /// computed `[1, d]` vectors. This is both the embedding lookup and the
    /// latent-injection mechanism: a latent step contributes its compressed
    /// vector as a row in place of a token embedding.
    pub fn compose_rows(&mut self, table: NodeId, rows: &[RowSrc]) -> NodeId {
        assert!(!rows.is_empty(), "compose_rows: empty rows");
        let out = {
            let d = self.value(table).cols();
            let n_tok = self.value(table).rows();
            let mut out = Tensor::zeros(rows.len(), d);
            for (r, src) in rows.iter().enumerate() {
                match *src {
                    RowSrc::Tok(ix) => {
                        assert!(ix < n_tok, "compose_rows: token {ix} >= table rows {n_tok}");
                        out.row_mut(r).copy_from_slice(&self.value(table).row(ix));
                    }
                    RowSrc::Node(nid) => {
                        let v = self.value(nid);
                        assert_eq!(
                            v.shape(),
                            (1, d),
                            "compose_rows: injected row must be [1,{d}], got {:?}",
                            v.shape()
                        );
                        out.row_mut(r).copy_from_slice(v.data());
                    }
                }
            }
            out
        };
        self.push(Op::ComposeRows { table, rows: rows.to_vec() }, out)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let out = {
            let v = self.value(a);
            let mut out = v.clone();
            for r in 0..out.rows() {
                softmax_row(out.row_mut(r));
            }
            out
        };
        self.push(Op::RowSoftmax { a }, out)
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (out, stats) = {
            let (v, g, b) = (self.value(a), self.value(gain), self.value(bias));
            assert!(
                g.shape() == (1, v.cols()) && b.shape() == (1, v.cols()),
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                v.shape(),
                g.shape(),
                b.shape()
            );
            let n = S::from_f64(v.cols() as f64);
            let eps = S::from_f64(LN_EPS);
            let mut out = Tensor::zeros(v.rows(), v.cols());
            let mut stats = Vec::with_capacity(v.rows());
            for r in 0..v.rows() {
                let row = v.row(r);
                let mean = row.iter().copied().sum::<S>() / n;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
                let rstd = S::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for (o, (&x, (&gv, &bv))) in out
                    .row_mut(r)
                    .iter_mut()
                    .zip(row.iter().zip(g.data().iter().zip(b.data())))
                {
                    *o = (x - mean) * rstd * gv + bv;
                }
            }
            (out, stats)
        };
        self.push(Op::LayerNorm { a, gain, bias, stats }, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (out, tanh_u) = {
            let va = self.value(a);
            let mut out = va.clone();
            let mut tanh_u = Tensor::zeros(va.rows(), va.cols());
            for (o, t) in out.data_mut().iter_mut().zip(tanh_u.data_mut()) {
                let (y, tu) = gelu_fwd_with_tanh(*o);
                *o = y;
                *t = tu;
            }
            (out, tanh_u)
        };
        self.push(Op::Gelu { a, tanh_u }, out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = {
            let mut out = self.value(a).clone();
            for v in out.data_mut() {
                *v = sigmoid(*v);
            }
            out
        };
        self.push(Op::Sigmoid { a }, out)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let out = {
            let mut out = self.value(a).clone();
            for v in out.data_mut() {
                *v = softplus(*v);
            }
            out
        };
        self.push(Op::Softplus { a }, out)
    }

    /// Additive causal mask: positions with `col > row` get a large negative
    /// offset so a following row-softmax zeroes them.
    pub fn causal_mask(&mut self, a: NodeId) -> NodeId {
        let out = {
            let v = self.value(a);
            assert_eq!(v.rows(), v.cols(), "causal_mask: square required, got {:?}", v.shape());
            let neg = S::from_f64(MASK_NEG);
            let mut out = v.clone();
            for r in 0..out.rows() {
                for c in (r + 1)..out.cols() {
                    let x = out.at(r, c);
                    out.set(r, c, x + neg);
                }
            }
            out
        };
        self.push(Op::CausalMask { a }, out)
    }

    /// Mean of `-log softmax(logits)[target]` over rows that carry a target.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let (out, probs) = {
            let v = self.value(logits);
            assert_eq!(targets.len(), v.rows(), "cross_entropy_rows: {} targets for {} rows", targets.len(), v.rows());
            let n = targets.iter().filter(|t| t.is_some()).count();
            assert!(n > 0, "cross_entropy_rows: no targeted rows");
            let mut probs = v.clone();
            let mut loss = 0.0f64;
            for (r, t) in targets.iter().enumerate() {
                let lse = log_softmax_row(probs.row_mut(r));
                if let Some(t) = t {
                    assert!(*t < v.cols(), "cross_entropy_rows: target {t} >= {}", v.cols());
                    loss -= (v.at(r, *t).as_f64()) - lse;
                }
            }
            // probs rows now hold softmax values
            (Tensor::scalar(S::from_f64(loss / n as f64)), probs)
        };
        self.push(Op::CrossEntropyRows { logits, targets: targets.to_vec(), probs }, out)
    }

    /// Distribution-matching loss: mean over rows of `-sum_v q_v log p_v`,
    /// with `q` a fixed target distribution per row.
    pub fn soft_cross_entropy_rows(&mut self, logits: NodeId, target_probs: Tensor<S>) -> NodeId {
        let (out, probs) = {
            let v = self.value(logits);
            assert_eq!(
                v.shape(),
                target_probs.shape(),
                "soft_cross_entropy_rows: logits {:?} vs targets {:?}",
                v.shape(),
                target_probs.shape()
            );
            for r in 0..target_probs.rows() {
                let s: f64 = target_probs.row(r).iter().map(|q| q.as_f64()).sum();
                assert!(
                    (s - 1.0).abs() < 1e-3,
                    "soft_cross_entropy_rows: target row {r} sums to {s}"
                );
            }
            let mut probs = v.clone();
            let mut loss = 0.0f64;
            for r in 0..v.rows() {
                let lse = log_softmax_row(probs.row_mut(r));
                for (c, q) in target_probs.row(r).iter().enumerate() {
                    loss -= q.as_f64() * (v.at(r, c).as_f64() - lse);
                }
            }
            (Tensor::scalar(S::from_f64(loss / v.rows() as f64)), probs)
        };
        self.push(Op::SoftCrossEntropyRows { logits, target_probs, probs }, out)
    }

    /// Weighted binary cross-entropy on logits, in the overflow-safe form
    /// `max(x,0) - x*y + ln(1+exp(-|x|))`, averaged over elements.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[S], weights: &[S]) -> NodeId {
        let out = {
            let v = self.value(logits);
            assert_eq!(targets.len(), v.len(), "bce_with_logits: {} targets for {} logits", targets.len(), v.len());
            assert_eq!(weights.len(), v.len(), "bce_with_logits: {} weights for {} logits", weights.len(), v.len());
            let mut loss = 0.0f64;
            for ((&x, &y), &w) in v.data().iter().zip(targets).zip(weights) {
                let x = x.as_f64();
                let term = x.max(0.0) - x * y.as_f64() + (-x.abs()).exp().ln_1p();
                loss += w.as_f64() * term;
            }
            Tensor::scalar(S::from_f64(loss / v.len() as f64))
        };
        self.push(
            Op::BceWithLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() },
            out,
        )
    }

    /// Sum of `log softmax(logits)[row, tok]` over the picked positions; the
    /// token-action part of a trajectory log-probability.
    pub fn token_log_prob_sum(&mut self, logits: NodeId, picks: &[(usize, usize)]) -> NodeId {
        let (out, probs) = {
            let v = self.value(logits);
            let mut probs = v.clone();
            let mut lses = Vec::with_capacity(v.rows());
            for r in 0..v.rows() {
                lses.push(log_softmax_row(probs.row_mut(r)));
            }
            let mut total = 0.0f64;
            for &(r, t) in picks {
                assert!(r < v.rows() && t < v.cols(), "token_log_prob_sum: pick ({r},{t}) out of {:?}", v.shape());
                total += v.at(r, t).as_f64() - lses[r];
            }
            (Tensor::scalar(S::from_f64(total)), probs)
        };
        self.push(Op::TokenLogProbSum { logits, picks: picks.to_vec(), probs }, out)
    }

    /// Sum of Bernoulli log-probabilities for gate decisions: `log sigmoid(x)`
    /// for accepted steps, `log (1 - sigmoid(x))` for the rejecting step.
    pub fn bernoulli_log_prob_sum(&mut self, logits: NodeId, outcomes: &[bool]) -> NodeId {
        let out = {
            let v = self.value(logits);
            assert_eq!(v.cols(), 1, "bernoulli_log_prob_sum: logits must be [n,1], got {:?}", v.shape());
            assert_eq!(outcomes.len(), v.rows(), "bernoulli_log_prob_sum: {} outcomes for {} logits", outcomes.len(), v.rows());
            let mut total = 0.0f64;
            for (r, &b) in outcomes.iter().enumerate() {
                let x = v.at(r, 0).as_f64();
                // log sigmoid(x) = -softplus(-x); log(1-sigmoid(x)) = -softplus(x)
                let sp = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
                total -= if b { sp(-x) } else { sp(x) };
            }
            Tensor::scalar(S::from_f64(total))
        };
        self.push(Op::BernoulliLogProbSum { logits, outcomes: outcomes.to_vec() }, out)
    }

    /// Weighted sum of scalar nodes.
    pub fn sum_scalars(&mut self, terms: &[(NodeId, S)]) -> NodeId {
        assert!(!terms.is_empty(), "sum_scalars: empty terms");
        let mut total = S::zero();
        for &(id, c) in terms {
            let v = self.value(id);
            assert_eq!(v.shape(), (1, 1), "sum_scalars: non-scalar term {:?}", v.shape());
            total += v.item() * c;
        }
        let out = Tensor::scalar(total);
        self.push(Op::SumScalars { terms: terms.to_vec() }, out)
    }

    /// Affine map `x*w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Reverse pass from a scalar loss. Parameter gradients accumulate by id
    /// and are readable through [`Graph::param_grad`]; parameters the loss
    /// never touched stay at zero (represented as `None`).
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward: loss must be scalar, got {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        let mut pgrads: Vec<Option<Tensor<S>>> = std::mem::take(&mut self.param_grads);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let shape = self.store.value(*pid).shape();
                    let acc = pgrads[pid.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = {
                        let vb = self.value(b);
                        let mut da = Tensor::zeros(g.rows(), vb.rows());
                        super::tensor::matmul_nt_acc(&g, vb, &mut da);
                        da
                    };
                    let db = {
                        let va = self.value(a);
                        let mut db = Tensor::zeros(va.cols(), g.cols());
                        super::tensor::matmul_tn_acc(va, &g, &mut db);
                        db
                    };
                    acc_grad(&mut grads, a, da);
                    acc_grad(&mut grads, b, db);
                }
                Op::MatmulNT { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = {
                        let vb = self.value(b);
                        let mut da = Tensor::zeros(g.rows(), vb.cols());
                        super::tensor::matmul_acc(&g, vb, &mut da);
                        da
                    };
                    let db = {
                        let va = self.value(a);
                        let mut db = Tensor::zeros(g.cols(), va.cols());
                        super::tensor::matmul_tn_acc(&g, va, &mut db);
                        db
                    };
                    acc_grad(&mut grads, a, da);
                    acc_grad(&mut grads, b, db);
                }
                Op::Transpose { a } => {
                    let a = *a;
                    acc_grad(&mut grads, a, g.transposed());
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    acc_grad(&mut grads, a, g.clone());
                    acc_grad(&mut grads, b, g);
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc_grad(&mut grads, a, g);
                    acc_grad(&mut grads, bias, db);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let mut da = g;
                    for v in da.data_mut() {
                        *v *= c;
                    }
                    acc_grad(&mut grads, a, da);
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let n = self.value(p).rows();
                        let mut dp = Tensor::zeros(n, g.cols());
                        for r in 0..n {
                            dp.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        at += n;
                        acc_grad(&mut grads, p, dp);
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let n = self.value(p).cols();
                        let mut dp = Tensor::zeros(g.rows(), n);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + n]);
                        }
                        at += n;
                        acc_grad(&mut grads, p, dp);
                    }
                }
                Op::SliceRows { a, start } => {
                    let (a, start) = (*a, *start);
                    let va = self.value(a).shape();
                    let mut da = Tensor::zeros(va.0, va.1);
                    for r in 0..g.rows() {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc_grad(&mut grads, a, da);
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    let va = self.value(a).shape();
                    let mut da = Tensor::zeros(va.0, va.1);
                    for r in 0..g.rows() {
                        da.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc_grad(&mut grads, a, da);
                }
                Op::ComposeRows { table, rows } => {
                    let table = *table;
                    let rows = rows.clone();
                    let tshape = self.value(table).shape();
                    let mut dt: Option<Tensor<S>> = None;
                    for (r, src) in rows.iter().enumerate() {
                        match *src {
                            RowSrc::Tok(ix) => {
                                let dt = dt.get_or_insert_with(|| Tensor::zeros(tshape.0, tshape.1));
                                for (d, &v) in dt.row_mut(ix).iter_mut().zip(g.row(r)) {
                                    *d += v;
                                }
                            }
                            RowSrc::Node(nid) => {
                                let dn = Tensor::from_vec(1, g.cols(), g.row(r).to_vec());
                                acc_grad(&mut grads, nid, dn);
                            }
                        }
                    }
                    if let Some(dt) = dt {
                        acc_grad(&mut grads, table, dt);
                    }
                }
                Op::RowSoftmax { a } => {
                    let a = *a;
                    let y = self.nodes[id].value.as_ref().unwrap();
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: S = g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum();
                        for ((d, &gv), &yv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc_grad(&mut grads, a, da);
                }
                Op::LayerNorm { a, gain, bias, stats } => {
                    let (a, gain, bias) = (*a, *gain, *bias);
                    let stats = stats.clone();
                    let (va, vg) = (self.value(a), self.value(gain));
                    let n = S::from_f64(va.cols() as f64);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    let mut dg = Tensor::zeros(1, va.cols());
                    let mut db = Tensor::zeros(1, va.cols());
                    for r in 0..va.rows() {
                        let (mean, rstd) = stats[r];
                        let grow = g.row(r);
                        let xrow = va.row(r);
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..va.cols() {
                            let xhat = (xrow[c] - mean) * rstd;
                            let dyg = grow[c] * vg.data()[c];
                            m1 += dyg;
                            m2 += dyg * xhat;
                            dg.data_mut()[c] += grow[c] * xhat;
                            db.data_mut()[c] += grow[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..va.cols() {
                            let xhat = (xrow[c] - mean) * rstd;
                            let dyg = grow[c] * vg.data()[c];
                            da.row_mut(r)[c] = rstd * (dyg - m1 - xhat * m2);
                        }
                    }
                    acc_grad(&mut grads, a, da);
                    acc_grad(&mut grads, gain, dg);
                    acc_grad(&mut grads, bias, db);
                }
                Op::Gelu { a, tanh_u } => {
                    let a = *a;
                    let va = self.value(a);
                    let mut da = g;
                    for (d, (&x, &t)) in
                        da.data_mut().iter_mut().zip(va.data().iter().zip(tanh_u.data()))
                    {
                        *d *= gelu_bwd(x, t);
                    }
                    acc_grad(&mut grads, a, da);
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let y = self.nodes[id].value.as_ref().unwrap();
                    let mut da = g;
                    for (d, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (S::one() - yv);
                    }
                    acc_grad(&mut grads, a, da);
                }
                Op::Softplus { a } => {
                    let a = *a;
                    let va = self.value(a);
                    let mut da = g;
                    for (d, &x) in da.data_mut().iter_mut().zip(va.data()) {
                        *d *= sigmoid(x);
                    }
                    acc_grad(&mut grads, a, da);
                }
                Op::CausalMask { a } => {
                    let a = *a;
                    acc_grad(&mut grads, a, g);
                }
                Op::CrossEntropyRows { logits, targets, probs } => {
                    let logits = *logits;
                    let gs = g.item();
                    let n = S::from_f64(targets.iter().filter(|t| t.is_some()).count() as f64);
                    let mut da = Tensor::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for (c, (d, &p)) in da.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                                let delta = if c == *t { S::one() } else { S::zero() };
                                *d = gs * (p - delta) / n;
                            }
                        }
                    }
                    acc_grad(&mut grads, logits, da);
                }
                Op::SoftCrossEntropyRows { logits, target_probs, probs } => {
                    let logits = *logits;
                    let gs = g.item();
                    let n = S::from_f64(probs.rows() as f64);
                    let mut da = Tensor::zeros(probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        let qsum: S = target_probs.row(r).iter().copied().sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = gs * (probs.at(r, c) * qsum - target_probs.at(r, c)) / n;
                        }
                    }
                    acc_grad(&mut grads, logits, da);
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    let logits = *logits;
                    let gs = g.item();
                    let v = self.value(logits);
                    let n = S::from_f64(v.len() as f64);
                    let mut da = Tensor::zeros(v.rows(), v.cols());
                    for (i, ((&x, &y), &w)) in
                        v.data().iter().zip(targets).zip(weights).enumerate()
                    {
                        da.data_mut()[i] = gs * w * (sigmoid(x) - y) / n;
                    }
                    acc_grad(&mut grads, logits, da);
                }
                Op::TokenLogProbSum { logits, picks, probs } => {
                    let logits = *logits;
                    let gs = g.item();
                    let mut da = Tensor::zeros(probs.rows(), probs.cols());
                    for &(r, t) in picks {
                        for (c, (d, &p)) in da.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let delta = if c == t { S::one() } else { S::zero() };
                            *d += gs * (delta - p);
                        }
                    }
                    acc_grad(&mut grads, logits, da);
                }
                Op::BernoulliLogProbSum { logits, outcomes } => {
                    let logits = *logits;
                    let gs = g.item();
                    let v = self.value(logits);
                    let mut da = Tensor::zeros(v.rows(), 1);
                    for (r, &b) in outcomes.iter().enumerate() {
                        let s = sigmoid(v.at(r, 0));
                        da.set(r, 0, gs * if b { S::one() - s } else { -s });
                    }
                    acc_grad(&mut grads, logits, da);
                }
                Op::SumScalars { terms } => {
                    let terms = terms.clone();
                    let gs = g.item();
                    for (nid, c) in terms {
                        acc_grad(&mut grads, nid, Tensor::scalar(gs * c));
                    }
                }
            }
        }
        self.param_grads = pgrads;
    }

    /// Gradient for a parameter after [`Graph::backward`]; `None` means the
    /// loss never reached it (an exact zero).
    pub fn param_grad(&self, pid: ParamId) -> Option<&Tensor<S>> {
        self.param_grads[pid.0].as_ref()
    }

    pub fn take_param_grads(&mut self) -> Vec<Option<Tensor<S>>> {
        std::mem::replace(&mut self.param_grads, vec![None; self.store.len()])
    }
}

fn acc_grad<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, contrib: Tensor<S>) {
    match &mut grads[id.0] {
        Some(g) => {
            assert_eq!(g.shape(), contrib.shape(), "gradient shape mismatch");
            for (a, &v) in g.data_mut().iter_mut().zip(contrib.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(contrib),
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

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    // max(x,0) + ln(1+exp(-|x|)): exact and overflow-free at |x| ~ 1e4
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

fn gelu_fwd_with_tanh<S: Scalar>(x: S) -> (S, S) {
    let c = S::from_f64(GELU_C);
    let b = S::from_f64(GELU_B);
    let half = S::from_f64(0.5);
    let u = c * (x + b * x * x * x);
    let t = u.tanh();
    (half * x * (S::one() + t), t)
}

pub(crate) fn gelu_fwd<S: Scalar>(x: S) -> S {
    gelu_fwd_with_tanh(x).0
}

/// Derivative given the cached `tanh(u)` from the forward pass.
fn gelu_bwd<S: Scalar>(x: S, t: S) -> S {
    let c = S::from_f64(GELU_C);
    let b = S::from_f64(GELU_B);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * b * x * x)
}

/// In place: row becomes softmax(row). Subtracts the max first.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In place: row becomes softmax(row); returns `log sum exp(row)` of the
/// original values.
fn log_softmax_row<S: Scalar>(row: &mut [S]) -> f64 {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    sum.as_f64().ln() + max.as_f64()
}
