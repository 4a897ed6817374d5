//! Reverse-mode gradient tape over [`Tensor2`] values.
//!
//! Every forward op appends one node; [`Tape::backward`] walks the nodes in
//! reverse and accumulates parameter gradients into a [`Grads`] buffer. A
//! parameter is materialized at most once per tape, so each parameter receives
//! exactly one accumulated contribution per forward pass.

use std::collections::HashMap;

use super::{Scalar, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// How the optimizer and the tape treat a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Updated by gradient descent.
    Trainable,
    /// Read by the forward pass but never receives gradient (`sg[·]`).
    StopGradient,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor2<T>,
    pub role: ParamRole,
}

/// Owns every named tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2<T>, role: ParamRole) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor2<T> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.params[id.0].role
    }

    pub fn set_role(&mut self, id: ParamId, role: ParamRole) {
        self.params[id.0].role = role;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }
}

/// Gradient buffers shaped like the store they were computed against.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Tensor2<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor2<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2<T> {
        &mut self.grads[id.0]
    }

    /// True when every entry is exactly `+0.0` or `-0.0`.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].data().iter().all(|v| *v == T::zero())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// First parameter index holding a non-finite gradient, if any.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads.iter().position(|g| !g.is_finite()).map(ParamId)
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Gather {
        param: ParamId,
        rows: Vec<usize>,
    },
    RowCombine {
        src: NodeId,
        groups: Vec<Vec<(usize, T)>>,
    },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor2<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Bce {
        logits: NodeId,
        labels: Vec<T>,
    },
    MeanSqNorm(NodeId),
}

struct Node<T> {
    value: Tensor2<T>,
    op: Op<T>,
}

/// Column statistics of one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Tensor2<T> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v.data()[0]
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor2<T>) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Detached copy of an existing node's value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    /// Whole-parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    /// Selects rows of a parameter table (embedding lookup).
    pub fn gather(&mut self, store: &ParamStore<T>, id: ParamId, rows: Vec<usize>) -> NodeId {
        let table = store.value(id);
        let mut out = Tensor2::zeros(rows.len(), table.cols());
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < table.rows(), "gather: row {r} out of {} in {}", table.rows(), store.param(id).name);
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(out, Op::Gather { param: id, rows })
    }

    /// Output row `i` is `Σ w · src[j]` over `groups[i]`; an empty group yields a zero row.
    pub fn row_combine(&mut self, src: NodeId, groups: Vec<Vec<(usize, T)>>) -> NodeId {
        let s = self.value(src);
        let mut out = Tensor2::zeros(groups.len(), s.cols());
        for (i, g) in groups.iter().enumerate() {
            let o = out.row_mut(i);
            for &(j, w) in g {
                for (ov, &sv) in o.iter_mut().zip(s.row(j)) {
                    *ov += w * sv;
                }
            }
        }
        self.push(out, Op::RowCombine { src, groups })
    }

    /// Repeats row `rows[i]` of `src` into output row `i`.
    pub fn select_rows(&mut self, src: NodeId, rows: &[usize]) -> NodeId {
        let groups = rows.iter().map(|&r| vec![(r, T::one())]).collect();
        self.row_combine(src, groups)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), b.cols(), "add_bias width");
        let bias_row = b.row(0).to_vec();
        for r in 0..v.rows() {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let v = Tensor2::from_vec(va.rows(), va.cols(), data).expect("shape checked");
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    /// Column-wise concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Batch normalization using the batch's own column statistics.
    ///
    /// Returns the output node plus the (biased) batch moments so the caller
    /// can fold them into running statistics.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> (NodeId, Moments<T>) {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert!(n >= 2, "batch_norm_train needs at least two rows");
        let nt = T::of_usize(n);
        let mean: Vec<T> = xv.col_sums().into_iter().map(|s| s / nt).collect();
        let mut var = vec![T::zero(); c];
        for r in 0..n {
            for ((v, &x), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        for v in var.iter_mut() {
            *v /= nt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let node = self.normalize(x, gamma, beta, &mean, inv_std, true);
        (node, Moments { mean, var })
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], var: &[T], eps: T) -> NodeId {
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> NodeId {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, c), "gamma shape");
        assert_eq!(b.shape(), (1, c), "beta shape");
        let mut xhat = Tensor2::zeros(n, c);
        let mut out = Tensor2::zeros(n, c);
        for r in 0..n {
            for j in 0..c {
                let h = (xv.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                out.set(r, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Mean binary cross-entropy from logits, in the stable
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})` form. Produces a 1×1 node.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: Vec<T>) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.cols(), 1, "logits must be a column");
        assert_eq!(z.rows(), labels.len(), "logit/label count");
        let loss = super::loss::bce_terms(z.data(), &labels) / T::of_usize(labels.len());
        self.push(Tensor2::filled(1, 1, loss), Op::Bce { logits, labels })
    }

    /// Mean over rows of the squared row norm. Produces a 1×1 node.
    pub fn mean_sq_norm(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.rows().max(1);
        let s = v.frobenius_sq() / T::of_usize(n);
        self.push(Tensor2::filled(1, 1, s), Op::MeanSqNorm(a))
    }

    /// Reverse pass from a 1×1 node. Stop-gradient parameters keep exactly
    /// zero gradient.
    pub fn backward(&self, root: NodeId, store: &ParamStore<T>) -> Grads<T> {
        let mut grads = Grads::zeros_like(store);
        self.backward_into(root, store, &mut grads);
        grads
    }

    pub fn backward_into(&self, root: NodeId, store: &ParamStore<T>, out: &mut Grads<T>) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut g: Vec<Option<Tensor2<T>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[root.0] = Some(Tensor2::filled(1, 1, T::one()));

        for idx in (0..=root.0).rev() {
            let Some(go) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    if store.role(*pid) == ParamRole::Trainable {
                        out.grads[pid.0].add_assign(&go);
                    }
                }
                Op::Gather { param, rows } => {
                    if store.role(*param) == ParamRole::Trainable {
                        let dst = &mut out.grads[param.0];
                        for (i, &r) in rows.iter().enumerate() {
                            for (d, &s) in dst.row_mut(r).iter_mut().zip(go.row(i)) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::RowCombine { src, groups } => {
                    let sv = self.value(*src);
                    let mut ds = Tensor2::zeros(sv.rows(), sv.cols());
                    for (i, grp) in groups.iter().enumerate() {
                        let gi = go.row(i);
                        for &(j, w) in grp {
                            for (d, &s) in ds.row_mut(j).iter_mut().zip(gi) {
                                *d += w * s;
                            }
                        }
                    }
                    accumulate(&mut g, *src, ds);
                }
                Op::MatMul(a, b) => {
                    let da = go.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&go);
                    accumulate(&mut g, *a, da);
                    accumulate(&mut g, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let db = Tensor2::row_vector(&go.col_sums());
                    accumulate(&mut g, *bias, db);
                    accumulate(&mut g, *a, go);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *b, go.clone());
                    accumulate(&mut g, *a, go);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *b, go.scale(-T::one()));
                    accumulate(&mut g, *a, go);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut g, *a, go.scale(*s));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let data = go
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(&mut g, *a, Tensor2::from_vec(go.rows(), go.cols(), data).expect("same shape"));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut part = Tensor2::zeros(go.rows(), w);
                        for r in 0..go.rows() {
                            part.row_mut(r).copy_from_slice(&go.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut g, p, part);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c) = go.shape();
                    let gam = self.value(*gamma);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for r in 0..n {
                        for j in 0..c {
                            dgamma[j] += go.get(r, j) * xhat.get(r, j);
                            dbeta[j] += go.get(r, j);
                        }
                    }
                    let mut dx = Tensor2::zeros(n, c);
                    if *batch_stats {
                        // dx = inv_std/N · (N·dxh − Σdxh − xhat·Σ(dxh·xhat)), dxh = dy·gamma
                        let nt = T::of_usize(n);
                        for j in 0..c {
                            let gj = gam.get(0, j);
                            let sum_dxh = dbeta[j] * gj;
                            let sum_dxh_xhat = dgamma[j] * gj;
                            for r in 0..n {
                                let dxh = go.get(r, j) * gj;
                                dx.set(
                                    r,
                                    j,
                                    inv_std[j] / nt * (nt * dxh - sum_dxh - xhat.get(r, j) * sum_dxh_xhat),
                                );
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx.set(r, j, go.get(r, j) * gam.get(0, j) * inv_std[j]);
                            }
                        }
                    }
                    accumulate(&mut g, *gamma, Tensor2::row_vector(&dgamma));
                    accumulate(&mut g, *beta, Tensor2::row_vector(&dbeta));
                    accumulate(&mut g, *x, dx);
                }
                Op::Bce { logits, labels } => {
                    let z = self.value(*logits);
                    let scale = go.data()[0] / T::of_usize(labels.len());
                    let data = z
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&zi, &y)| (super::loss::sigmoid(zi) - y) * scale)
                        .collect();
                    accumulate(&mut g, *logits, Tensor2::from_vec(z.rows(), 1, data).expect("column"));
                }
                Op::MeanSqNorm(a) => {
                    let av = self.value(*a);
                    let n = av.rows().max(1);
                    let s = go.data()[0] * T::of(2.0) / T::of_usize(n);
                    accumulate(&mut g, *a, av.scale(s));
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(g: &mut [Option<Tensor2<T>>], id: NodeId, delta: Tensor2<T>) {
    match &mut g[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_leaf_is_materialized_once() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor2::from_f64(1, 1, &[3.0]).unwrap(), ParamRole::Trainable);
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        // f(w) = ‖w + w‖² = 4w², df/dw = 8w = 24
        let s = tape.add(a, b);
        let loss = tape.mean_sq_norm(s);
        let grads = tape.backward(loss, &store);
        assert!((grads.get(w).data()[0] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_param_accumulates_bitwise_zero() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor2::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap(), ParamRole::StopGradient);
        let mut tape = Tape::new();
        let rows = tape.gather(&store, w, vec![1, 0, 1]);
        let whole = tape.param(&store, w);
        let x = tape.mean_sq_norm(rows);
        let y = tape.mean_sq_norm(whole);
        let loss = tape.add(x, y);
        let grads = tape.backward(loss, &store);
        assert!(grads.is_zero(w));
        assert!(grads.get(w).data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn gather_scatters_into_addressed_rows_only() {
        let mut store = ParamStore::<f64>::new();
        let t = store.add("t", Tensor2::filled(4, 2, 1.0), ParamRole::Trainable);
        let mut tape = Tape::new();
        let rows = tape.gather(&store, t, vec![2, 2]);
        let loss = tape.mean_sq_norm(rows);
        let grads = tape.backward(loss, &store);
        let g = grads.get(t);
        for r in [0, 1, 3] {
            assert!(g.row(r).iter().all(|&v| v == 0.0));
        }
        // two rows each contributing 2·1/2
        assert_eq!(g.row(2), &[2.0, 2.0]);
    }

    #[test]
    fn bce_node_matches_closed_form() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor2::from_f64(2, 1, &[0.0, 0.0]).unwrap());
        let l = tape.bce_with_logits(z, vec![0.0, 1.0]);
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let _ = tape.backward(l, &store);
    }
}
