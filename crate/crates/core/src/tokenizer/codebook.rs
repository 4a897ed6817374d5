use rand::Rng;

use crate::error::{DigError, Result};
use crate::numerics::{normal_init, sq_dist, ParamId, ParamRole, ParamStore, Scalar, Tensor2};

/// L layers of K addressing vectors, maintained by EMA and never by gradient.
///
/// The tensors live in the shared [`ParamStore`] flagged
/// [`ParamRole::StopGradient`], so a tape may read them but backward always
/// leaves them with zero gradient.
///
/// With `null_code` set, index 0 of every layer is pinned to the zero vector.
/// Selecting it leaves the residual unchanged, which makes the per-layer
/// reconstruction error non-increasing under nearest-code assignment.
#[derive(Clone, Debug)]
pub struct Codebook<T> {
    pub layers: Vec<ParamId>,
    pub k: usize,
    pub dim: usize,
    pub alpha: T,
    pub null_code: bool,
    /// Decayed assignment counts, `L × K`.
    pub ema_counts: Vec<Vec<T>>,
    /// Steps since each code was last assigned, `L × K`.
    pub ages: Vec<Vec<u64>>,
    pub dead_threshold: T,
    pub grace: u64,
}

/// Result of quantizing one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationTrace<T> {
    pub codes: Vec<usize>,
    /// `r_0 = e_v, …, r_L`.
    pub residuals: Vec<Vec<T>>,
    /// Selected vector per layer.
    pub quantized: Vec<Vec<T>>,
    /// Running sums of `quantized`.
    pub prefix: Vec<Vec<T>>,
}

impl<T: Scalar> QuantizationTrace<T> {
    pub fn depth(&self) -> usize {
        self.codes.len()
    }

    /// Squared norm of each residual `r_1..r_L`.
    pub fn layer_errors(&self) -> Vec<T> {
        self.residuals[1..].iter().map(|r| crate::numerics::sq_norm(r)).collect()
    }
}

impl<T: Scalar> Codebook<T> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        depth: usize,
        k: usize,
        dim: usize,
        alpha: T,
        null_code: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 || k < 2 || dim == 0 {
            return Err(DigError::InvalidInput(format!("codebook needs L ≥ 1, K ≥ 2, d ≥ 1 (got {depth}, {k}, {dim})")));
        }
        let layers = (0..depth)
            .map(|l| {
                let mut v: Tensor2<T> = normal_init(k, dim, 0.1, rng);
                if null_code {
                    v.row_mut(0).fill(T::zero());
                }
                store.add(format!("codebook.layer{l}"), v, ParamRole::StopGradient)
            })
            .collect();
        Ok(Self {
            layers,
            k,
            dim,
            alpha,
            null_code,
            ema_counts: vec![vec![T::one(); k]; depth],
            ages: vec![vec![0; k]; depth],
            dead_threshold: T::of(1e-3),
            grace: 200,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// First index that carries a movable vector.
    pub fn first_live(&self) -> usize {
        usize::from(self.null_code)
    }

    pub fn vector<'a>(&self, store: &'a ParamStore<T>, layer: usize, code: usize) -> &'a [T] {
        store.value(self.layers[layer]).row(code)
    }

    /// Index of the nearest code; ties go to the lowest index.
    pub fn nearest(&self, store: &ParamStore<T>, layer: usize, r: &[T]) -> usize {
        let table = store.value(self.layers[layer]);
        let mut best = 0;
        let mut best_d = T::infinity();
        for k in 0..self.k {
            let d = sq_dist(r, table.row(k));
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Residual quantization of `e` through all layers.
    pub fn quantize(&self, store: &ParamStore<T>, e: &[T]) -> QuantizationTrace<T> {
        let depth = self.depth();
        let mut codes = Vec::with_capacity(depth);
        let mut residuals = Vec::with_capacity(depth + 1);
        let mut quantized = Vec::with_capacity(depth);
        let mut prefix: Vec<Vec<T>> = Vec::with_capacity(depth);
        residuals.push(e.to_vec());
        for l in 0..depth {
            let r = &residuals[l];
            let s = self.nearest(store, l, r);
            let c = self.vector(store, l, s).to_vec();
            let next: Vec<T> = r.iter().zip(&c).map(|(&a, &b)| a - b).collect();
            let p: Vec<T> = match prefix.last() {
                Some(prev) => prev.iter().zip(&c).map(|(&a, &b)| a + b).collect(),
                None => c.clone(),
            };
            codes.push(s);
            quantized.push(c);
            prefix.push(p);
            residuals.push(next);
        }
        QuantizationTrace {
            codes,
            residuals,
            quantized,
            prefix,
        }
    }

    /// Codes only.
    pub fn assign(&self, store: &ParamStore<T>, e: &[T]) -> Vec<usize> {
        self.quantize(store, e).codes
    }

    /// One EMA step from `(layer, code, residual-in)` assignments:
    /// `c ← α·c + (1 − α)·mean` for assigned codes, counts decayed for all.
    pub fn ema_update<'a, I>(&mut self, store: &mut ParamStore<T>, assignments: I)
    where
        I: IntoIterator<Item = (usize, usize, &'a [T])>,
    {
        let depth = self.depth();
        let mut sums = vec![vec![vec![T::zero(); self.dim]; self.k]; depth];
        let mut counts = vec![vec![0usize; self.k]; depth];
        for (l, k, r) in assignments {
            counts[l][k] += 1;
            for (s, &v) in sums[l][k].iter_mut().zip(r) {
                *s += v;
            }
        }
        let a = self.alpha;
        let first = self.first_live();
        for l in 0..depth {
            let table = store.value_mut(self.layers[l]);
            for k in first..self.k {
                let n = counts[l][k];
                self.ema_counts[l][k] = a * self.ema_counts[l][k] + (T::one() - a) * T::of_usize(n);
                if n == 0 {
                    self.ages[l][k] = self.ages[l][k].saturating_add(1);
                    continue;
                }
                self.ages[l][k] = 0;
                let nt = T::of_usize(n);
                for (c, &s) in table.row_mut(k).iter_mut().zip(&sums[l][k]) {
                    *c = a * *c + (T::one() - a) * (s / nt);
                }
            }
        }
    }

    /// EMA step from whole traces: layer `l` of each trace contributes `r_{l−1}`.
    pub fn ema_update_traces(&mut self, store: &mut ParamStore<T>, traces: &[QuantizationTrace<T>]) {
        let items = traces
            .iter()
            .flat_map(|t| t.codes.iter().enumerate().map(move |(l, &k)| (l, k, t.residuals[l].as_slice())));
        self.ema_update(store, items);
    }

    pub fn is_dead(&self, layer: usize, code: usize) -> bool {
        code >= self.first_live() && self.ages[layer][code] > self.grace && self.ema_counts[layer][code] < self.dead_threshold
    }

    /// Resets every dead code to a random residual drawn from the layer's pool.
    /// Returns the `(layer, code)` pairs that were restarted.
    pub fn restart_dead_codes<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<T>,
        pool: &ResidualPool<T>,
        rng: &mut R,
    ) -> Vec<(usize, usize)> {
        let mut restarted = Vec::new();
        for l in 0..self.depth() {
            let candidates = &pool.layers[l];
            if candidates.is_empty() {
                continue;
            }
            for k in self.first_live()..self.k {
                if !self.is_dead(l, k) {
                    continue;
                }
                let pick = &candidates[rng.random_range(0..candidates.len())];
                store.value_mut(self.layers[l]).row_mut(k).copy_from_slice(pick);
                self.ema_counts[l][k] = T::one();
                self.ages[l][k] = 0;
                log::debug!("restarted dead code {k} at layer {l}");
                restarted.push((l, k));
            }
        }
        restarted
    }

    /// Clears EMA bookkeeping, e.g. after re-initialization.
    pub fn reset_stats(&mut self) {
        for row in &mut self.ema_counts {
            row.fill(T::one());
        }
        for row in &mut self.ages {
            row.fill(0);
        }
    }

    /// Fraction of codes per layer that appear in `sids`.
    pub fn utilization<'a>(&self, sids: impl IntoIterator<Item = &'a [usize]>) -> Vec<f64> {
        let mut used = vec![vec![false; self.k]; self.depth()];
        for sid in sids {
            for (l, &s) in sid.iter().enumerate() {
                used[l][s] = true;
            }
        }
        used.iter()
            .map(|u| u.iter().filter(|&&b| b).count() as f64 / self.k as f64)
            .collect()
    }
}

/// Bounded per-layer reservoir of recent residuals used for dead-code restarts.
#[derive(Clone, Debug)]
pub struct ResidualPool<T> {
    pub layers: Vec<Vec<Vec<T>>>,
    capacity: usize,
    cursor: Vec<usize>,
}

impl<T: Scalar> ResidualPool<T> {
    pub fn new(depth: usize, capacity: usize) -> Self {
        Self {
            layers: vec![Vec::new(); depth],
            capacity: capacity.max(1),
            cursor: vec![0; depth],
        }
    }

    pub fn push(&mut self, layer: usize, r: &[T]) {
        let slot = &mut self.layers[layer];
        if slot.len() < self.capacity {
            slot.push(r.to_vec());
        } else {
            let c = self.cursor[layer];
            slot[c].copy_from_slice(r);
            self.cursor[layer] = (c + 1) % self.capacity;
        }
    }

    pub fn push_trace(&mut self, trace: &QuantizationTrace<T>) {
        for l in 0..trace.depth().min(self.layers.len()) {
            self.push(l, &trace.residuals[l]);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Vec::is_empty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(depth: usize, k: usize, dim: usize, null: bool, seed: u64) -> (ParamStore<f64>, Codebook<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, depth, k, dim, 0.99, null, &mut rng).unwrap();
        (store, cb)
    }

    fn set(store: &mut ParamStore<f64>, cb: &Codebook<f64>, l: usize, rows: &[&[f64]]) {
        let t = store.value_mut(cb.layers[l]);
        for (k, r) in rows.iter().enumerate() {
            t.row_mut(k).copy_from_slice(r);
        }
    }

    #[test]
    fn nearest_by_distance() {
        let (mut store, cb) = book(1, 2, 1, false, 0);
        set(&mut store, &cb, 0, &[&[0.0], &[1.0]]);
        assert_eq!(cb.quantize(&store, &[0.4]).codes, vec![0]);
        assert_eq!(cb.quantize(&store, &[0.6]).codes, vec![1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let (mut store, cb) = book(1, 3, 1, false, 0);
        set(&mut store, &cb, 0, &[&[2.0], &[0.0], &[1.0]]);
        // 0.5 is equidistant from codes 1 and 2
        assert_eq!(cb.quantize(&store, &[0.5]).codes, vec![1]);
    }

    #[test]
    fn exact_hit_drives_deeper_layers_to_zero() {
        let (mut store, cb) = book(3, 4, 2, true, 1);
        let target = cb.vector(&store, 0, 2).to_vec();
        set(&mut store, &cb, 0, &[&[0.0, 0.0], &[5.0, 5.0], &target, &[-3.0, 1.0]]);
        let t = cb.quantize(&store, &target);
        assert_eq!(t.codes, vec![2, 0, 0]);
        assert!(t.residuals.iter().skip(1).all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ema_one_step_arithmetic() {
        let (mut store, mut cb) = book(1, 2, 1, false, 0);
        set(&mut store, &cb, 0, &[&[0.0], &[7.0]]);
        let r = [1.0];
        cb.ema_update(&mut store, [(0, 0, &r[..])]);
        assert!((cb.vector(&store, 0, 0)[0] - 0.01).abs() < 1e-15);
        assert_eq!(cb.vector(&store, 0, 1), &[7.0]);
        assert_eq!(cb.ages[0], vec![0, 1]);
    }

    #[test]
    fn ema_alpha_zero_jumps_to_mean() {
        let (mut store, mut cb) = book(1, 2, 2, false, 0);
        cb.alpha = 0.0;
        let (a, b) = ([1.0, 2.0], [3.0, 6.0]);
        cb.ema_update(&mut store, [(0, 1, &a[..]), (0, 1, &b[..])]);
        assert_eq!(cb.vector(&store, 0, 1), &[2.0, 4.0]);
    }

    #[test]
    fn null_code_is_never_moved() {
        let (mut store, mut cb) = book(1, 3, 2, true, 0);
        let r = [4.0, 4.0];
        cb.ema_update(&mut store, [(0, 0, &r[..])]);
        assert_eq!(cb.vector(&store, 0, 0), &[0.0, 0.0]);
    }

    #[test]
    fn restart_only_after_grace_and_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut store, mut cb) = book(1, 3, 2, false, 0);
        let mut pool = ResidualPool::new(1, 8);
        pool.push(0, &[9.0, -9.0]);
        assert!(cb.restart_dead_codes(&mut store, &pool, &mut rng).is_empty());
        let r = [0.0, 0.0];
        for _ in 0..800 {
            cb.ema_update(&mut store, [(0, 0, &r[..]), (0, 1, &r[..])]);
        }
        let restarted = cb.restart_dead_codes(&mut store, &pool, &mut rng);
        assert_eq!(restarted, vec![(0, 2)]);
        assert_eq!(cb.vector(&store, 0, 2), &[9.0, -9.0]);
        // exact-hit construction: the restarted vector is now selectable
        assert_eq!(cb.quantize(&store, &[9.0, -9.0]).codes, vec![2]);
    }

    proptest! {
        #[test]
        fn residual_and_prefix_identities(seed in 0u64..500, e in prop::collection::vec(-3.0f64..3.0, 4)) {
            let (store, cb) = book(3, 5, 4, true, seed);
            let t = cb.quantize(&store, &e);
            for l in 0..3 {
                for j in 0..4 {
                    prop_assert!((t.residuals[l + 1][j] - (t.residuals[l][j] - t.quantized[l][j])).abs() < 1e-12);
                    prop_assert!((t.prefix[l][j] + t.residuals[l + 1][j] - e[j]).abs() < 1e-10);
                }
            }
            let errs = t.layer_errors();
            let mut prev = crate::numerics::sq_norm(&e);
            for err in errs {
                prop_assert!(err <= prev);
                prev = err;
            }
        }
    }
}
