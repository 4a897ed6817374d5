//! Collision-free codebook initialization by a balanced k-means tree.
//!
//! Layer `l` partitions every parent group (items sharing `s_1..s_{l−1}`)
//! into K clusters whose sizes differ by at most one. Each layer keeps a
//! single shared set of K centroids, since the codebook holds one vector per
//! `(layer, code)`; the balance constraint is applied inside each parent
//! group, which is what makes the leaves distinct when `N ≤ K^L`.

use rand::Rng;

use crate::error::{DigError, Result};
use crate::numerics::{sq_dist, ParamStore, Scalar, Tensor2};

use super::Codebook;

/// Lloyd rounds per layer.
pub const LLOYD_ROUNDS: usize = 10;

/// Capacity-constrained assignment of `points` to `centroids`.
///
/// Cluster sizes end up at `⌊n/K⌋` or `⌈n/K⌉`. Points are placed in order of
/// decreasing margin (second-nearest minus nearest distance), ties by input
/// order, each taking its closest centroid that still has room.
pub fn balanced_assign<T: Scalar>(points: &[&[T]], centroids: &Tensor2<T>) -> Vec<usize> {
    let n = points.len();
    let k = centroids.rows();
    let base = n / k;
    let mut extra = n % k;
    let mut prefs: Vec<(Vec<usize>, T)> = points
        .iter()
        .map(|p| {
            let d: Vec<T> = (0..k).map(|c| sq_dist(p, centroids.row(c))).collect();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("finite distances").then(a.cmp(&b)));
            let margin = if k > 1 { d[order[1]] - d[order[0]] } else { T::zero() };
            (order, margin)
        })
        .collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| prefs[b].1.partial_cmp(&prefs[a].1).expect("finite margins").then(a.cmp(&b)));

    let mut sizes = vec![0usize; k];
    let mut out = vec![usize::MAX; n];
    for i in idx {
        let order = std::mem::take(&mut prefs[i].0);
        for c in order {
            if sizes[c] < base {
                sizes[c] += 1;
                out[i] = c;
                break;
            }
            if sizes[c] == base && extra > 0 {
                sizes[c] += 1;
                extra -= 1;
                out[i] = c;
                break;
            }
        }
        debug_assert!(out[i] != usize::MAX);
    }
    out
}

fn kmeans_pp<T: Scalar, R: Rng + ?Sized>(res: &Tensor2<T>, k: usize, rng: &mut R) -> Vec<Vec<T>> {
    let n = res.rows();
    let mut chosen: Vec<Vec<T>> = Vec::with_capacity(k);
    chosen.push(res.row(rng.random_range(0..n)).to_vec());
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(res.row(i), &chosen[0]).as_f64()).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut p = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    p = i;
                    break;
                }
                u -= b;
            }
            p
        } else {
            rng.random_range(0..n)
        };
        let c = res.row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(res.row(i), &c).as_f64());
        }
        chosen.push(c);
    }
    chosen
}

/// Initializes `cb` from catalog embeddings (one row per item) and returns the
/// SID of each row.
pub fn balanced_kmeans_init<T: Scalar, R: Rng + ?Sized>(
    emb: &Tensor2<T>,
    cb: &mut Codebook<T>,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = emb.rows();
    if n == 0 {
        return Err(DigError::InvalidInput("balanced init needs at least one item".into()));
    }
    if emb.cols() != cb.dim {
        return Err(DigError::shape("balanced_kmeans_init", cb.dim, emb.cols()));
    }
    let depth = cb.depth();
    let capacity = (cb.k as u128).checked_pow(depth as u32).unwrap_or(u128::MAX);
    if n as u128 > capacity {
        return Err(DigError::SidSpaceTooSmall { items: n, capacity });
    }

    let first = cb.first_live();
    let mut res = emb.clone();
    let mut sids: Vec<Vec<usize>> = vec![Vec::with_capacity(depth); n];
    // parent groups as item index lists, in deterministic order
    let mut groups: Vec<Vec<usize>> = vec![(0..n).collect()];

    for l in 0..depth {
        let mut cent = store.value(cb.layers[l]).clone();
        let live = cb.k - first;
        for (j, c) in kmeans_pp(&res, live, rng).into_iter().enumerate() {
            cent.row_mut(first + j).copy_from_slice(&c);
        }
        if first == 1 {
            cent.row_mut(0).fill(T::zero());
        }

        let mut codes = vec![0usize; n];
        for _ in 0..LLOYD_ROUNDS {
            for g in &groups {
                let pts: Vec<&[T]> = g.iter().map(|&i| res.row(i)).collect();
                for (&i, c) in g.iter().zip(balanced_assign(&pts, &cent)) {
                    codes[i] = c;
                }
            }
            let mut sums = Tensor2::<T>::zeros(cb.k, cb.dim);
            let mut counts = vec![0usize; cb.k];
            for (i, &c) in codes.iter().enumerate() {
                counts[c] += 1;
                for (s, &v) in sums.row_mut(c).iter_mut().zip(res.row(i)) {
                    *s += v;
                }
            }
            for c in first..cb.k {
                if counts[c] > 0 {
                    let inv = T::one() / T::of_usize(counts[c]);
                    for (dst, &s) in cent.row_mut(c).iter_mut().zip(sums.row(c)) {
                        *dst = s * inv;
                    }
                }
            }
        }

        for (i, &c) in codes.iter().enumerate() {
            sids[i].push(c);
            let cv = cent.row(c).to_vec();
            for (r, v) in res.row_mut(i).iter_mut().zip(cv) {
                *r -= v;
            }
        }
        *store.value_mut(cb.layers[l]) = cent;

        let mut next = Vec::with_capacity(groups.len() * cb.k);
        for g in &groups {
            let mut split: Vec<Vec<usize>> = vec![Vec::new(); cb.k];
            for &i in g {
                split[codes[i]].push(i);
            }
            next.extend(split.into_iter().filter(|s| !s.is_empty()));
        }
        groups = next;
    }
    cb.reset_stats();
    Ok(sids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normal_init;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn run(n: usize, k: usize, depth: usize, null: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let mut cb = Codebook::new(&mut store, depth, k, 4, 0.99, null, &mut rng)?;
        let emb = normal_init(n, 4, 1.0, &mut rng);
        balanced_kmeans_init(&emb, &mut cb, &mut store, &mut rng)
    }

    fn layer1_sizes(sids: &[Vec<usize>], k: usize) -> Vec<usize> {
        let mut s = vec![0; k];
        for sid in sids {
            s[sid[0]] += 1;
        }
        s
    }

    #[test]
    fn saturated_single_layer() {
        let sids = run(6, 6, 1, false, 0).unwrap();
        assert_eq!(layer1_sizes(&sids, 6), vec![1; 6]);
    }

    #[test]
    fn five_into_two() {
        let sids = run(5, 2, 3, false, 1).unwrap();
        let mut sizes = layer1_sizes(&sids, 2);
        sizes.sort();
        assert_eq!(sizes, vec![2, 3]);
    }

    #[test]
    fn hundred_items_distinct_pairwise() {
        let sids = run(100, 4, 2, false, 2);
        // 100 items cannot fit 4² leaves; four layers give 256
        assert!(matches!(sids, Err(DigError::SidSpaceTooSmall { .. })));
        let sids = run(100, 4, 4, true, 2).unwrap();
        for i in 0..sids.len() {
            for j in i + 1..sids.len() {
                assert_ne!(sids[i], sids[j], "items {i} and {j} collide");
            }
        }
    }

    #[test]
    fn too_many_items_is_error() {
        assert!(matches!(run(9, 2, 3, false, 0), Err(DigError::SidSpaceTooSmall { items: 9, capacity: 8 })));
    }

    #[test]
    fn assignment_respects_margin_priority() {
        // Both points prefer centroid 0; the one with the larger margin gets it.
        let cent = Tensor2::from_f64(2, 1, &[0.0, 10.0]).unwrap();
        let a = [4.0];
        let b = [0.5];
        let out = balanced_assign::<f64>(&[&a, &b], &cent);
        assert_eq!(out, vec![1, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn zero_collisions_and_balanced_first_layer(n in 1usize..=64, k in 2usize..=4, seed in 0u64..1000, null in any::<bool>()) {
            let depth = 3;
            prop_assume!(n <= k.pow(depth as u32));
            let sids = run(n, k, depth, null, seed).unwrap();
            let distinct: HashSet<_> = sids.iter().collect();
            prop_assert_eq!(distinct.len(), n);
            let sizes = layer1_sizes(&sids, k);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
