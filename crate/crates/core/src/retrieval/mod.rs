//! SID-to-item inverted index, layer-wise beam search through the shared
//! Mixer, and candidate re-ranking with true cross features.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::U2iFeatures;
use crate::error::{DigError, Result};
use crate::ids::ItemId;
use crate::mixer::{ScorePath, UserFeatures};
use crate::numerics::{Scalar, Tensor2};
use crate::tokenizer::SidTable;
use crate::trainer::{cross_tensor, DigModel};

/// Full SID → item ids, plus the set of prefixes that lead to any leaf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvertedIndex {
    pub depth: usize,
    pub k: usize,
    /// Per-key lists sorted by item id.
    pub lists: BTreeMap<Vec<usize>, Vec<ItemId>>,
    reachable: Vec<HashSet<Vec<usize>>>,
    n_items: usize,
}

pub fn build_index(table: &SidTable) -> InvertedIndex {
    let mut lists: BTreeMap<Vec<usize>, Vec<ItemId>> = BTreeMap::new();
    for (item, sid) in table.iter() {
        lists.entry(sid.0.clone()).or_default().push(item);
    }
    for v in lists.values_mut() {
        v.sort();
    }
    let mut reachable = vec![HashSet::new(); table.depth];
    for sid in lists.keys() {
        for (l, set) in reachable.iter_mut().enumerate() {
            set.insert(sid[..=l].to_vec());
        }
    }
    InvertedIndex {
        depth: table.depth,
        k: table.k,
        lists,
        reachable,
        n_items: table.len(),
    }
}

impl InvertedIndex {
    pub fn get(&self, sid: &[usize]) -> &[ItemId] {
        self.lists.get(sid).map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// `1 − distinct SIDs / items`.
    pub fn collision_rate(&self) -> f64 {
        if self.n_items == 0 {
            0.0
        } else {
            1.0 - self.lists.len() as f64 / self.n_items as f64
        }
    }

    /// Whether some indexed leaf starts with `prefix`.
    pub fn is_reachable(&self, prefix: &[usize]) -> bool {
        match prefix.len() {
            0 => !self.is_empty(),
            l if l <= self.depth => self.reachable[l - 1].contains(prefix),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub top_n: usize,
    /// Rank prefixes by the running sum of depth logits instead of the
    /// depth-`l` logit alone.
    pub accumulate: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 32,
            top_n: 100,
            accumulate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamEntry {
    pub prefix: Vec<usize>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: ItemId,
    pub beam_score: f64,
    pub sid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub candidates: Vec<Candidate>,
    /// Fewer than `top_n` items were recoverable.
    pub short_supply: bool,
    /// Surviving beam after each depth.
    pub depth_trace: Vec<Vec<BeamEntry>>,
}

/// Descending score, then ascending prefix.
fn beam_order(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

struct Hypothesis<T> {
    prefix: Vec<usize>,
    emb: Vec<T>,
    /// Sum of student predictions at depths `1..=l`.
    u2t_sum: Vec<T>,
    acc: f64,
}

fn collect(index: &InvertedIndex, leaves: &[(Vec<usize>, f64)], top_n: usize) -> (Vec<Candidate>, bool) {
    let mut out = Vec::new();
    'outer: for (sid, score) in leaves {
        for &item_id in index.get(sid) {
            if out.len() == top_n {
                break 'outer;
            }
            out.push(Candidate {
                item_id,
                beam_score: *score,
                sid: sid.clone(),
            });
        }
    }
    let short = out.len() < top_n;
    (out, short)
}

/// Depth-synchronous top-`B` search over code prefixes.
///
/// Layer 1 scores every reachable code; each later layer expands the kept
/// prefixes by all `K` codes and scores them with the depth-`l` SID prefix
/// embedding and `û2t^{(1:l)}`. Surviving leaves are mapped through `index`
/// in beam order, ties by item id, and truncated to `top_n`.
pub fn beam_search<T: Scalar>(
    model: &DigModel<T>,
    user: &UserFeatures,
    index: &InvertedIndex,
    cfg: BeamConfig,
) -> Result<SearchResult> {
    if index.is_empty() {
        return Err(DigError::InvalidInput("empty inverted index".into()));
    }
    if cfg.width == 0 {
        return Err(DigError::InvalidInput("beam width must be at least 1".into()));
    }
    if index.depth != model.depth() || index.k != model.config.k {
        return Err(DigError::shape(
            "beam_search",
            format!("depth {} k {}", model.depth(), model.config.k),
            format!("depth {} k {}", index.depth, index.k),
        ));
    }
    let e_u = model.user_embeddings(&[user]);
    let (k, dim, dc) = (model.config.k, model.config.dim, model.config.cross_dim);
    let mut beam = vec![Hypothesis {
        prefix: Vec::new(),
        emb: vec![T::zero(); dim],
        u2t_sum: vec![T::zero(); dc],
        acc: 0.0,
    }];
    let mut trace = Vec::with_capacity(model.depth());
    for l in 1..=model.depth() {
        let table = model.store.value(model.sid_emb.layers[l - 1]);
        let mut parents = Vec::new();
        let mut prefixes = Vec::new();
        let mut emb = Vec::new();
        for (h, hyp) in beam.iter().enumerate() {
            for code in 0..k {
                let mut p = hyp.prefix.clone();
                p.push(code);
                if !index.is_reachable(&p) {
                    continue;
                }
                emb.push(hyp.emb.iter().zip(table.row(code)).map(|(&a, &b)| a + b).collect::<Vec<T>>());
                parents.push(h);
                prefixes.push(p);
            }
        }
        let n = prefixes.len();
        let users = Tensor2::from_rows(&vec![e_u.row(0); n])?;
        let emb_t = Tensor2::from_rows(&emb)?;
        let inv_l = T::one() / T::of_usize(l);
        let (u2t, sums) = if model.config.no_infer_mlp_u2t {
            let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
            (model.u2t_inference(&users, &refs, l)?, vec![Vec::new(); n])
        } else {
            let pred = model.student.predict_values(&model.store, &users, &emb_t, l)?;
            let sums: Vec<Vec<T>> = (0..n)
                .map(|r| beam[parents[r]].u2t_sum.iter().zip(pred.row(r)).map(|(&a, &b)| a + b).collect())
                .collect();
            let mut u = Tensor2::from_rows(&sums)?;
            u = u.scale(inv_l);
            (u, sums)
        };
        let logits = model.mixer.score_values(&model.store, ScorePath::Recall, &users, &emb_t, &u2t)?;
        let mut scored: Vec<(usize, f64)> = logits
            .iter()
            .enumerate()
            .map(|(r, z)| {
                let z = z.as_f64();
                (r, if cfg.accumulate { beam[parents[r]].acc + z } else { z })
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| prefixes[a.0].cmp(&prefixes[b.0])));
        scored.truncate(cfg.width);
        let mut next = Vec::with_capacity(scored.len());
        let mut kept = Vec::with_capacity(scored.len());
        let mut sums = sums;
        for &(r, s) in &scored {
            kept.push(BeamEntry {
                prefix: prefixes[r].clone(),
                score: s,
            });
            next.push(Hypothesis {
                prefix: prefixes[r].clone(),
                emb: std::mem::take(&mut emb[r]),
                u2t_sum: std::mem::take(&mut sums[r]),
                acc: s,
            });
        }
        trace.push(kept);
        beam = next;
    }
    let leaves: Vec<(Vec<usize>, f64)> = beam.into_iter().map(|h| (h.prefix, h.acc)).collect();
    let (candidates, short_supply) = collect(index, &leaves, cfg.top_n);
    Ok(SearchResult {
        candidates,
        short_supply,
        depth_trace: trace,
    })
}

/// Scores every indexed leaf at full depth and returns the same list layout
/// as [`beam_search`]; the reference for beam widths covering all leaves.
pub fn exhaustive_search<T: Scalar>(
    model: &DigModel<T>,
    user: &UserFeatures,
    index: &InvertedIndex,
    top_n: usize,
) -> Result<Vec<Candidate>> {
    if index.is_empty() {
        return Err(DigError::InvalidInput("empty inverted index".into()));
    }
    let l = model.depth();
    let leaves: Vec<&[usize]> = index.lists.keys().map(Vec::as_slice).collect();
    let e_u = model.user_embeddings(&[user]);
    let users = Tensor2::from_rows(&vec![e_u.row(0); leaves.len()])?;
    let emb = model.sid_emb.prefix_values(&model.store, &leaves, l)?;
    let u2t = model.u2t_inference(&users, &leaves, l)?;
    let z = model.mixer.score_values(&model.store, ScorePath::Recall, &users, &emb, &u2t)?;
    let mut scored: Vec<(Vec<usize>, f64)> = leaves.iter().zip(z).map(|(s, z)| (s.to_vec(), z.as_f64())).collect();
    scored.sort_by(beam_order);
    Ok(collect(index, &scored, top_n).0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: ItemId,
    pub rank_score: f64,
}

/// Scores candidates on the ranking path with their true cross features,
/// sorted by descending score, ties by item id. Unknown items are skipped.
pub fn rank_candidates<T: Scalar>(
    model: &DigModel<T>,
    user: &UserFeatures,
    candidates: &[ItemId],
    cross: impl Fn(usize) -> U2iFeatures,
) -> Result<Vec<RankedItem>> {
    if candidates.is_empty() {
        return Err(DigError::InvalidInput("no candidates to rank".into()));
    }
    let mut known = Vec::with_capacity(candidates.len());
    for &id in candidates {
        match model.item_index(id) {
            Some(i) => known.push((id, i)),
            None => log::warn!("skipping unknown candidate item {}", id.0),
        }
    }
    if known.is_empty() {
        return Ok(Vec::new());
    }
    let n = known.len();
    let e_u = model.user_embeddings(&[user]);
    let users = Tensor2::from_rows(&vec![e_u.row(0); n])?;
    let records: Vec<_> = known.iter().map(|&(_, i)| &model.items[i]).collect();
    let e_v = model.encoder.encode_values(&model.store, &records)?;
    let feats: Vec<U2iFeatures> = known.iter().map(|&(_, i)| cross(i)).collect();
    let c = cross_tensor(&feats);
    let z = model.mixer.score_values(&model.store, ScorePath::Rank, &users, &e_v, &c)?;
    let mut out: Vec<RankedItem> = known
        .iter()
        .zip(z)
        .map(|(&(item_id, _), z)| RankedItem {
            item_id,
            rank_score: z.as_f64(),
        })
        .collect();
    out.sort_by(|a, b| b.rank_score.total_cmp(&a.rank_score).then_with(|| a.item_id.cmp(&b.item_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Sid;

    fn table(entries: &[(u32, &[usize])]) -> SidTable {
        let mut t = SidTable::new(2, 4);
        for (id, s) in entries {
            t.insert(ItemId(*id), Sid(s.to_vec())).unwrap();
        }
        t
    }

    #[test]
    fn zero_collision_lists_are_singletons() {
        let idx = build_index(&table(&[(1, &[0, 1]), (2, &[1, 1]), (3, &[3, 0])]));
        assert!(idx.lists.values().all(|v| v.len() == 1));
        assert_eq!(idx.collision_rate(), 0.0);
    }

    #[test]
    fn shared_sid_lists_sorted_ids() {
        let idx = build_index(&table(&[(9, &[2, 2]), (4, &[2, 2])]));
        assert_eq!(idx.get(&[2, 2]), &[ItemId(4), ItemId(9)]);
        assert_eq!(idx.collision_rate(), 0.5);
        assert!(idx.is_reachable(&[2]));
        assert!(!idx.is_reachable(&[1]));
        assert!(!idx.is_reachable(&[2, 1]));
    }

    #[test]
    fn every_item_found_under_its_sid() {
        let entries: Vec<(u32, Vec<usize>)> = (0..30).map(|i| (i, vec![(i % 4) as usize, (i / 8) as usize])).collect();
        let refs: Vec<(u32, &[usize])> = entries.iter().map(|(i, s)| (*i, s.as_slice())).collect();
        let t = table(&refs);
        let idx = build_index(&t);
        for (item, sid) in t.iter() {
            assert!(idx.get(&sid.0).contains(&item));
        }
        let total: usize = idx.lists.values().map(Vec::len).sum();
        assert_eq!(total, 30);
    }

    use crate::data::{generate_synthetic, SyntheticWorldConfig};
    use crate::trainer::{DigModel, TrainConfig, TrainData};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(depth: usize) -> (TrainData, DigModel<f64>) {
        let w = generate_synthetic(&SyntheticWorldConfig {
            n_users: 40,
            n_items: 4usize.pow(depth as u32),
            ..SyntheticWorldConfig::default()
        })
        .unwrap();
        let data = TrainData::prepare(w.dataset, 1, 0).unwrap();
        let cfg = TrainConfig {
            depth,
            k: 4,
            dim: 8,
            user_dim: 8,
            encoder_hidden: 8,
            mixer_hidden: vec![8],
            u2t_hidden: 8,
            ..TrainConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = DigModel::for_dataset(cfg, &data.dataset, &mut rng).unwrap();
        m.init_tokenizer(&mut rng).unwrap();
        (data, m)
    }

    #[test]
    fn full_width_beam_equals_exhaustive() {
        let (data, m) = world(2);
        let idx = build_index(&m.sid_table().unwrap());
        assert_eq!(idx.lists.len(), 16);
        let cfg = BeamConfig { width: 16, top_n: 16, accumulate: false };
        for s in data.rank_train.iter().take(10) {
            let beam = beam_search(&m, &s.user, &idx, cfg).unwrap();
            let oracle = exhaustive_search(&m, &s.user, &idx, 16).unwrap();
            assert_eq!(beam.candidates, oracle);
            assert!(!beam.short_supply);
        }
    }

    #[test]
    fn single_layer_width_one_is_argmax() {
        let (data, m) = world(1);
        let idx = build_index(&m.sid_table().unwrap());
        let user = &data.rank_train[0].user;
        let r = beam_search(&m, user, &idx, BeamConfig { width: 1, top_n: 10, accumulate: false }).unwrap();
        let all = exhaustive_search(&m, user, &idx, 10).unwrap();
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.candidates[0], all[0]);
        assert!(r.short_supply);
    }

    #[test]
    fn trace_is_bounded_and_sorted() {
        let (data, m) = world(2);
        let idx = build_index(&m.sid_table().unwrap());
        for width in [1, 3, 5] {
            for accumulate in [false, true] {
                let r = beam_search(&m, &data.rank_train[1].user, &idx, BeamConfig { width, top_n: 100, accumulate }).unwrap();
                assert_eq!(r.depth_trace.len(), 2);
                for level in &r.depth_trace {
                    assert!(level.len() <= width);
                    assert!(level.windows(2).all(|w| w[0].score >= w[1].score));
                }
                assert_eq!(r.candidates.len(), width);
            }
        }
    }

    #[test]
    fn rejects_zero_width_and_foreign_index() {
        let (data, m) = world(2);
        let idx = build_index(&m.sid_table().unwrap());
        let u = &data.rank_train[0].user;
        assert!(beam_search(&m, u, &idx, BeamConfig { width: 0, ..BeamConfig::default() }).is_err());
        let other = build_index(&table(&[(1, &[0, 1])]));
        assert!(beam_search(&m, u, &other, BeamConfig::default()).is_ok());
        let mut t3 = SidTable::new(3, 4);
        t3.insert(ItemId(1), Sid(vec![0, 0, 0])).unwrap();
        assert!(beam_search(&m, u, &build_index(&t3), BeamConfig::default()).is_err());
    }
}
