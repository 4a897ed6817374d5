//! Token-level u2i aggregates: the in-batch teacher statistic and the
//! per-layer student MLPs used at inference.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{DigError, Result};
use crate::numerics::{Mlp, NodeId, ParamStore, Scalar, Tape, Tensor2};

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket<T> {
    pub sum: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> Bucket<T> {
    pub fn mean(&self) -> Vec<T> {
        let n = T::of_usize(self.count);
        self.sum.iter().map(|&s| s / n).collect()
    }
}

/// Per-layer buckets keyed by code prefix `(s_1..s_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct U2tStats<T> {
    pub dim: usize,
    pub levels: Vec<HashMap<Vec<usize>, Bucket<T>>>,
}

impl<T: Scalar> U2tStats<T> {
    pub fn new(depth: usize, dim: usize) -> Self {
        Self {
            dim,
            levels: vec![HashMap::new(); depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn add(&mut self, codes: &[usize], c: &[T]) {
        for l in 0..self.depth() {
            let b = self.levels[l].entry(codes[..=l].to_vec()).or_insert_with(|| Bucket {
                sum: vec![T::zero(); self.dim],
                count: 0,
            });
            for (s, &v) in b.sum.iter_mut().zip(c) {
                *s += v;
            }
            b.count += 1;
        }
    }

    /// Bucket mean at layer `l` (1-based) for `prefix[..l]`.
    pub fn level_mean(&self, prefix: &[usize], l: usize) -> Option<Vec<T>> {
        self.levels[l - 1].get(&prefix[..l]).map(Bucket::mean)
    }

    /// Mean at layer `l`, or at the deepest populated ancestor.
    pub fn level_mean_backoff(&self, prefix: &[usize], l: usize) -> Option<Vec<T>> {
        (1..=l).rev().find_map(|j| self.level_mean(prefix, j))
    }

    /// Number of populated buckets per layer.
    /// Adds `value` to the level-`l` bucket of `prefix[..l]` only.
    pub fn add_at(&mut self, prefix: &[usize], l: usize, value: &[T]) {
        let b = self.levels[l - 1].entry(prefix[..l].to_vec()).or_insert_with(|| Bucket {
            sum: vec![T::zero(); self.dim],
            count: 0,
        });
        for (s, &v) in b.sum.iter_mut().zip(value) {
            *s += v;
        }
        b.count += 1;
    }

    pub fn active_buckets(&self) -> Vec<usize> {
        self.levels.iter().map(HashMap::len).collect()
    }

    pub fn total_count(&self, l: usize) -> usize {
        self.levels[l - 1].values().map(|b| b.count).sum()
    }
}

/// Teacher statistic over a batch: one row of `c` per entry of `codes`.
pub fn batch_u2t<T: Scalar>(codes: &[&[usize]], c: &Tensor2<T>) -> Result<U2tStats<T>> {
    if codes.len() != c.rows() {
        return Err(DigError::shape("batch_u2t", codes.len(), c.rows()));
    }
    let depth = codes.iter().map(|s| s.len()).min().unwrap_or(0);
    let mut stats = U2tStats::new(depth, c.cols());
    for (r, s) in codes.iter().enumerate() {
        stats.add(s, c.row(r));
    }
    Ok(stats)
}

/// Distinct batch items grouped by code prefix at every layer.
#[derive(Clone, Debug)]
pub struct BucketIndex {
    levels: Vec<HashMap<Vec<usize>, Vec<usize>>>,
}

impl BucketIndex {
    /// `codes[j]` is the SID of batch item `j`.
    pub fn build(codes: &[&[usize]]) -> Self {
        let depth = codes.iter().map(|s| s.len()).min().unwrap_or(0);
        let mut levels = vec![HashMap::<Vec<usize>, Vec<usize>>::new(); depth];
        for (j, s) in codes.iter().enumerate() {
            for (l, level) in levels.iter_mut().enumerate() {
                level.entry(s[..=l].to_vec()).or_default().push(j);
            }
        }
        Self { levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Batch items whose first `l` codes equal `prefix[..l]`.
    pub fn members(&self, prefix: &[usize], l: usize) -> &[usize] {
        self.levels[l - 1].get(&prefix[..l]).map_or(&[], Vec::as_slice)
    }
}

/// Per-level teacher means for one request: level `l` averages `c(j)` over
/// the batch items sharing the first `l` codes of `codes`. An empty level
/// repeats the deepest populated ancestor; with none at all the level is zero.
pub fn request_level_means<T: Scalar>(
    index: &BucketIndex,
    codes: &[usize],
    dim: usize,
    mut c: impl FnMut(usize) -> Vec<T>,
) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = Vec::with_capacity(index.depth());
    let mut last: Option<Vec<T>> = None;
    for l in 1..=index.depth() {
        let members = index.members(codes, l);
        if members.is_empty() {
            out.push(last.clone().unwrap_or_else(|| vec![T::zero(); dim]));
            continue;
        }
        let mut acc = vec![T::zero(); dim];
        for &j in members {
            for (a, v) in acc.iter_mut().zip(c(j)) {
                *a += v;
            }
        }
        let n = T::of_usize(members.len());
        acc.iter_mut().for_each(|a| *a /= n);
        last = Some(acc.clone());
        out.push(acc);
    }
    out
}

/// Running means of per-level vectors: entry `l − 1` is the mean of levels `1..=l`.
pub fn cumulative_means<T: Scalar>(levels: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(levels.len());
    let mut acc: Vec<T> = levels.first().map(|v| vec![T::zero(); v.len()]).unwrap_or_default();
    for (i, v) in levels.iter().enumerate() {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        let n = T::of_usize(i + 1);
        out.push(acc.iter().map(|&a| a / n).collect());
    }
    out
}

/// `u2t^{(1:l)}`: mean over levels `1..=l` of the prefix bucket means, each
/// empty level backing off to its deepest populated ancestor.
pub fn u2t_prefix<T: Scalar>(stats: &U2tStats<T>, codes: &[usize], l: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); stats.dim];
    let mut used = 0usize;
    for i in 1..=l {
        if let Some(m) = stats.level_mean_backoff(codes, i) {
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v;
            }
            used += 1;
        }
    }
    if used == 0 {
        log::warn!("no populated u2t bucket along prefix {:?}", &codes[..l]);
        return acc;
    }
    let n = T::of_usize(l);
    acc.iter().map(|&a| a / n).collect()
}

/// `MLP_u2t^{(l)}([e_u; e_sid^{(1:l)}])` for `l = 1..=L`.
#[derive(Clone, Debug)]
pub struct U2tStudent {
    pub layers: Vec<Mlp>,
    pub user_dim: usize,
    pub item_dim: usize,
    pub out_dim: usize,
}

impl U2tStudent {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        depth: usize,
        user_dim: usize,
        item_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| Mlp::new(store, &format!("u2t.layer{l}"), &[user_dim + item_dim, hidden, out_dim], rng))
            .collect();
        Self {
            layers,
            user_dim,
            item_dim,
            out_dim,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Depth-`l` prediction (1-based) on the tape. Inputs are detached here,
    /// so gradients from the student reach only its own parameters.
    pub fn predict<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        e_u: NodeId,
        prefix_emb: NodeId,
        l: usize,
    ) -> NodeId {
        let u = tape.detach(e_u);
        let p = tape.detach(prefix_emb);
        let x = tape.concat_cols(&[u, p]);
        self.layers[l - 1].forward(tape, store, x)
    }

    /// Value-only prediction for a batch of rows.
    pub fn predict_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        e_u: &Tensor2<T>,
        prefix_emb: &Tensor2<T>,
        l: usize,
    ) -> Result<Tensor2<T>> {
        if e_u.cols() != self.user_dim || prefix_emb.cols() != self.item_dim || e_u.rows() != prefix_emb.rows() {
            return Err(DigError::shape(
                "predict_u2t",
                format!("{}+{}", self.user_dim, self.item_dim),
                format!("{}+{}", e_u.cols(), prefix_emb.cols()),
            ));
        }
        if l == 0 || l > self.depth() {
            return Err(DigError::InvalidInput(format!("u2t depth {l} outside 1..={}", self.depth())));
        }
        let mut tape = Tape::new();
        let u = tape.constant(e_u.clone());
        let p = tape.constant(prefix_emb.clone());
        let y = self.predict(&mut tape, store, u, p, l);
        Ok(tape.value(y).clone())
    }
}

/// `û2t^{(l)}` for a single user and prefix embedding.
pub fn predict_u2t<T: Scalar>(
    student: &U2tStudent,
    store: &ParamStore<T>,
    e_u: &[T],
    prefix_emb: &[T],
    l: usize,
) -> Result<Vec<T>> {
    let y = student.predict_values(store, &Tensor2::row_vector(e_u), &Tensor2::row_vector(prefix_emb), l)?;
    Ok(y.row(0).to_vec())
}

/// `(1/L) Σ_l mean_rows ‖pred_l − sg[target_l]‖²`. Targets enter as
/// constants, so no gradient can flow into them.
pub fn distill_loss<T: Scalar>(tape: &mut Tape<T>, preds: &[NodeId], targets: &[Tensor2<T>]) -> NodeId {
    assert_eq!(preds.len(), targets.len(), "one target per layer");
    let mut acc: Option<NodeId> = None;
    for (&p, t) in preds.iter().zip(targets) {
        let t = tape.constant(t.clone());
        let d = tape.sub(p, t);
        let term = tape.mean_sq_norm(d);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let total = acc.expect("at least one layer");
    tape.scale(total, T::one() / T::of_usize(preds.len()))
}

/// Serving-time replacement for the student: stored per-prefix means of the
/// teacher statistic over training requests, identical for every user.
#[derive(Clone, Debug)]
pub struct StatMeanTable<T> {
    pub stats: U2tStats<T>,
}

impl<T: Scalar> StatMeanTable<T> {
    pub fn new(depth: usize, dim: usize) -> Self {
        Self {
            stats: U2tStats::new(depth, dim),
        }
    }

    pub fn add(&mut self, codes: &[usize], c: &[T]) {
        self.stats.add(codes, c);
    }

    /// Records one request's per-level teacher means under `codes`.
    pub fn add_levels(&mut self, codes: &[usize], levels: &[Vec<T>]) {
        for (l, v) in levels.iter().enumerate() {
            self.stats.add_at(codes, l + 1, v);
        }
    }

    pub fn prefix(&self, codes: &[usize], l: usize) -> Vec<T> {
        u2t_prefix(&self.stats, codes, l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_params, relative_error, ParamRole};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor2<f64> {
        Tensor2::from_f64(v.len(), 1, v).unwrap()
    }

    #[test]
    fn single_sample_buckets() {
        let s = batch_u2t::<f64>(&[&[1, 2]], &col(&[5.0])).unwrap();
        assert_eq!(s.level_mean(&[1, 2], 1), Some(vec![5.0]));
        assert_eq!(s.level_mean(&[1, 2], 2), Some(vec![5.0]));
    }

    #[test]
    fn hand_means() {
        let s = batch_u2t::<f64>(&[&[0, 0], &[0, 1]], &col(&[0.0, 2.0])).unwrap();
        assert_eq!(s.level_mean(&[0], 1), Some(vec![1.0]));
        assert_eq!(s.active_buckets(), vec![1, 2]);
        // level means [1] and [2] for the second sample
        assert_eq!(u2t_prefix(&s, &[0, 1], 2), vec![1.5]);
        let d = batch_u2t::<f64>(&[&[0], &[1]], &col(&[0.0, 2.0])).unwrap();
        assert_eq!(d.active_buckets(), vec![2]);
    }

    #[test]
    fn mean_of_level_means() {
        let mut s = U2tStats::new(2, 1);
        s.add(&[3, 1], &[0.0]);
        s.levels[1].get_mut(&vec![3, 1]).unwrap().sum = vec![2.0];
        assert_eq!(u2t_prefix(&s, &[3, 1], 2), vec![1.0]);
        assert_eq!(u2t_prefix(&s, &[3, 1], 1), vec![0.0]);
    }

    #[test]
    fn empty_deeper_level_backs_off() {
        let s = batch_u2t::<f64>(&[&[0, 0], &[0, 0]], &col(&[1.0, 3.0])).unwrap();
        assert_eq!(u2t_prefix(&s, &[0, 7], 2), vec![2.0]);
        assert_eq!(u2t_prefix(&s, &[9, 7], 2), vec![0.0]);
    }

    #[test]
    fn distill_hand_value_and_layer_averaging() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let p = tape.constant(col(&[0.0]));
        let l = distill_loss(&mut tape, &[p], &[col(&[2.0])]);
        assert_eq!(tape.scalar(l), 4.0);
        let l2 = distill_loss(&mut tape, &[p, p], &[col(&[2.0]), col(&[2.0])]);
        assert_eq!(tape.scalar(l2), 4.0);
        let _ = tape.backward(l2, &store);
    }

    #[test]
    fn zero_output_layer_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let s = U2tStudent::new(&mut store, 2, 3, 2, 8, 4, &mut rng);
        let a = predict_u2t(&s, &store, &[1.0, 2.0, 3.0], &[0.5, -0.5], 2).unwrap();
        let b = predict_u2t(&s, &store, &[1.0, 2.0, 3.0], &[0.5, -0.5], 2).unwrap();
        assert_eq!(a, b);
        s.layers[1].last().zero(&mut store);
        assert_eq!(predict_u2t(&s, &store, &[1.0, 2.0, 3.0], &[0.5, -0.5], 2).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn distill_gradient_matches_finite_differences_and_stays_in_student() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let user = store.add("user", crate::numerics::normal_init(3, 2, 1.0, &mut rng), ParamRole::Trainable);
        let s = U2tStudent::new(&mut store, 1, 2, 2, 6, 2, &mut rng);
        let target: Tensor2<f64> = crate::numerics::normal_init(3, 2, 1.0, &mut rng);
        let prefix: Tensor2<f64> = crate::numerics::normal_init(3, 2, 1.0, &mut rng);
        let f = |st: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let u = tape.param(st, user);
            let p = tape.constant(prefix.clone());
            let y = s.predict(&mut tape, st, u, p, 1);
            let l = distill_loss(&mut tape, &[y], std::slice::from_ref(&target));
            (tape.scalar(l), tape.backward(l, st))
        };
        let (_, g) = f(&store);
        assert!(g.is_zero(user));
        let w = s.layers[0].layers[0].weight;
        let coords: Vec<usize> = (0..store.value(w).data().len()).collect();
        let fd = finite_diff_params(&mut store, w, &coords, 1e-4, |st| f(st).0);
        assert!(relative_error(g.get(w).data(), &fd) < 1e-6);
    }

    #[test]
    fn request_means_agree_with_batch_stats() {
        let codes: Vec<Vec<usize>> = vec![vec![0, 1], vec![0, 2], vec![1, 0], vec![0, 1]];
        let refs: Vec<&[usize]> = codes.iter().map(Vec::as_slice).collect();
        let c: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 5.0], vec![2.0, 4.0]];
        let idx = BucketIndex::build(&refs);
        let stats = batch_u2t(&refs, &Tensor2::from_rows(&c).unwrap()).unwrap();
        for q in &codes {
            let levels = request_level_means(&idx, q, 2, |j| c[j].clone());
            for l in 1..=2 {
                assert_eq!(Some(levels[l - 1].clone()), stats.level_mean(q, l));
                assert_eq!(cumulative_means(&levels)[l - 1], u2t_prefix(&stats, q, l));
            }
        }
        // an unseen level-2 prefix backs off to its level-1 bucket
        let levels = request_level_means(&idx, &[1, 3], 2, |j| c[j].clone());
        assert_eq!(levels, vec![vec![5.0, 5.0], vec![5.0, 5.0]]);
        let levels = request_level_means(&idx, &[2, 0], 2, |j| c[j].clone());
        assert_eq!(levels, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    proptest! {
        #[test]
        fn bucket_counts_partition_the_batch(codes in prop::collection::vec(prop::collection::vec(0usize..3, 3), 1..40)) {
            let refs: Vec<&[usize]> = codes.iter().map(Vec::as_slice).collect();
            let c = Tensor2::<f64>::zeros(codes.len(), 2);
            let s = batch_u2t(&refs, &c).unwrap();
            for l in 1..=3 {
                prop_assert_eq!(s.total_count(l), codes.len());
            }
        }
    }
}
