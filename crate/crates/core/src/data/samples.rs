use rand::Rng;

use crate::error::{DigError, Result};
use crate::ids::UserId;
use crate::mixer::UserFeatures;

use super::{Dataset, U2iFeatures, U2iIndex};

/// A labeled exposure for the ranking path.
#[derive(Clone, Debug, PartialEq)]
pub struct RankSample {
    pub user: UserFeatures,
    pub item: usize,
    pub timestamp: u64,
    pub label: bool,
    pub cross: U2iFeatures,
}

/// A positive with uniformly drawn full-corpus negatives for the recall path.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSample {
    pub user: UserFeatures,
    pub timestamp: u64,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Request-time features of `user` at time `t`.
pub fn user_features(ds: &Dataset, index: &U2iIndex, user: UserId, t: u64, context: &[usize]) -> UserFeatures {
    let profile = ds
        .user_idx(user)
        .map(|u| ds.users[u].profile.clone())
        .unwrap_or_default();
    UserFeatures {
        user_id: user,
        profile,
        context: context.to_vec(),
        history: index.history(user, t),
    }
}

/// `count` uniform draws from `0..n_items`, never equal to `positive`.
pub fn sample_negatives<R: Rng + ?Sized>(n_items: usize, positive: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count)
        .map(|_| {
            let r = rng.random_range(0..n_items - 1);
            if r >= positive {
                r + 1
            } else {
                r
            }
        })
        .collect()
}

/// Ranking samples for every listed log entry and retrieval samples for the
/// positives among them.
pub fn build_samples<R: Rng + ?Sized>(
    ds: &Dataset,
    index: &U2iIndex,
    events: &[usize],
    neg_per_pos: usize,
    rng: &mut R,
) -> Result<(Vec<RankSample>, Vec<RetrievalSample>)> {
    if ds.n_items() < neg_per_pos + 1 {
        return Err(DigError::Data(format!(
            "catalog of {} items cannot supply {neg_per_pos} negatives per positive",
            ds.n_items()
        )));
    }
    let mut rank = Vec::with_capacity(events.len());
    let mut retrieval = Vec::new();
    for &i in events {
        let ev = &ds.log[i];
        let item = ds.item_idx(ev.item_id).expect("validated log");
        let user = user_features(ds, index, ev.user_id, ev.timestamp, &ev.context);
        if ev.label {
            retrieval.push(RetrievalSample {
                user: user.clone(),
                timestamp: ev.timestamp,
                positive: item,
                negatives: sample_negatives(ds.n_items(), item, neg_per_pos, rng),
            });
        }
        rank.push(RankSample {
            cross: index.features(ev.user_id, item, ev.timestamp),
            user,
            item,
            timestamp: ev.timestamp,
            label: ev.label,
        });
    }
    Ok((rank, retrieval))
}

/// Redraws every sample's negatives.
pub fn resample_negatives<R: Rng + ?Sized>(samples: &mut [RetrievalSample], n_items: usize, rng: &mut R) {
    for s in samples {
        let k = s.negatives.len();
        s.negatives = sample_negatives(n_items, s.positive, k, rng);
    }
}
