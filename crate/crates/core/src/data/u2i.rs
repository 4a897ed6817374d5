use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ids::UserId;

use super::Dataset;

/// Width of the cross-feature vector.
pub const U2I_DIM: usize = 6;
/// Beta prior on CTR: `(clicks + a) / (impressions + a + b)`.
pub const CTR_PRIOR_A: f64 = 1.0;
pub const CTR_PRIOR_B: f64 = 10.0;
/// Most recent clicks kept as user history.
pub const HISTORY_LEN: usize = 20;

/// User–item cross statistics from strictly earlier events.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct U2iFeatures {
    pub item_impressions: u32,
    pub item_clicks: u32,
    pub category_impressions: u32,
    pub category_clicks: u32,
}

pub fn smoothed_ctr(clicks: u32, impressions: u32) -> f64 {
    (clicks as f64 + CTR_PRIOR_A) / (impressions as f64 + CTR_PRIOR_A + CTR_PRIOR_B)
}

impl U2iFeatures {
    pub fn item_ctr(&self) -> f64 {
        smoothed_ctr(self.item_clicks, self.item_impressions)
    }

    pub fn category_ctr(&self) -> f64 {
        smoothed_ctr(self.category_clicks, self.category_impressions)
    }

    /// Model input `c_{u,v}`: log-scaled counts and smoothed CTRs.
    pub fn vector(&self) -> [f64; U2I_DIM] {
        [
            (self.item_impressions as f64).ln_1p(),
            (self.item_clicks as f64).ln_1p(),
            self.item_ctr(),
            (self.category_impressions as f64).ln_1p(),
            (self.category_clicks as f64).ln_1p(),
            self.category_ctr(),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
struct Event {
    timestamp: u64,
    item: usize,
    category: Option<usize>,
    label: bool,
}

/// Per-user event timelines answering point-in-time queries.
///
/// Every query only looks at events with `timestamp < t`, so results cannot
/// depend on anything at or after the query time.
#[derive(Clone, Debug, Default)]
pub struct U2iIndex {
    timelines: HashMap<UserId, Vec<Event>>,
    categories: Vec<Option<usize>>,
}

impl U2iIndex {
    pub fn build(ds: &Dataset) -> Self {
        let categories: Vec<Option<usize>> = (0..ds.n_items()).map(|i| ds.category(i)).collect();
        let mut timelines: HashMap<UserId, Vec<Event>> = HashMap::new();
        for ev in &ds.log {
            let item = ds.item_idx(ev.item_id).expect("validated log");
            timelines.entry(ev.user_id).or_default().push(Event {
                timestamp: ev.timestamp,
                item,
                category: categories[item],
                label: ev.label,
            });
        }
        Self { timelines, categories }
    }

    fn before(&self, user: UserId, t: u64) -> &[Event] {
        match self.timelines.get(&user) {
            Some(tl) => {
                let end = tl.partition_point(|e| e.timestamp < t);
                &tl[..end]
            }
            None => &[],
        }
    }

    /// Cross features of `(user, item)` as of time `t`.
    pub fn features(&self, user: UserId, item: usize, t: u64) -> U2iFeatures {
        let cat = self.categories.get(item).copied().flatten();
        let mut f = U2iFeatures::default();
        for e in self.before(user, t) {
            if e.item == item {
                f.item_impressions += 1;
                f.item_clicks += u32::from(e.label);
            }
            if cat.is_some() && e.category == cat {
                f.category_impressions += 1;
                f.category_clicks += u32::from(e.label);
            }
        }
        f
    }

    /// Aggregated counts of `user` before `t`, for many item lookups.
    pub fn snapshot(&self, user: UserId, t: u64) -> UserSnapshot<'_> {
        let mut items: HashMap<usize, (u32, u32)> = HashMap::new();
        let mut cats: HashMap<usize, (u32, u32)> = HashMap::new();
        for e in self.before(user, t) {
            let s = items.entry(e.item).or_default();
            s.0 += 1;
            s.1 += u32::from(e.label);
            if let Some(c) = e.category {
                let s = cats.entry(c).or_default();
                s.0 += 1;
                s.1 += u32::from(e.label);
            }
        }
        UserSnapshot {
            items,
            cats,
            categories: &self.categories,
        }
    }

    /// Up to [`HISTORY_LEN`] most recent clicked items before `t`, oldest first.
    pub fn history(&self, user: UserId, t: u64) -> Vec<usize> {
        let mut h: Vec<usize> = self
            .before(user, t)
            .iter()
            .rev()
            .filter(|e| e.label)
            .take(HISTORY_LEN)
            .map(|e| e.item)
            .collect();
        h.reverse();
        h
    }
}

/// Point-in-time counts of one user; answers [`U2iIndex::features`] for any item.
#[derive(Clone, Debug)]
pub struct UserSnapshot<'a> {
    items: HashMap<usize, (u32, u32)>,
    cats: HashMap<usize, (u32, u32)>,
    categories: &'a [Option<usize>],
}

impl UserSnapshot<'_> {
    pub fn features(&self, item: usize) -> U2iFeatures {
        let (item_impressions, item_clicks) = self.items.get(&item).copied().unwrap_or_default();
        let (category_impressions, category_clicks) = self
            .categories
            .get(item)
            .copied()
            .flatten()
            .and_then(|c| self.cats.get(&c).copied())
            .unwrap_or_default();
        U2iFeatures {
            item_impressions,
            item_clicks,
            category_impressions,
            category_clicks,
        }
    }
}

/// Cross features for every log entry, aligned with `ds.log`.
pub fn build_u2i(ds: &Dataset, index: &U2iIndex) -> Vec<U2iFeatures> {
    ds.log
        .iter()
        .map(|ev| index.features(ev.user_id, ds.item_idx(ev.item_id).expect("validated log"), ev.timestamp))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, UserProfile};
    use crate::ids::ItemId;
    use crate::tokenizer::ItemRecord;

    fn ds(events: &[(u32, u32, u64, bool)]) -> Dataset {
        let items = (0..3)
            .map(|i| ItemRecord {
                item_id: ItemId(i),
                static_features: vec![(0, (i % 2) as usize)],
            })
            .collect();
        let users = vec![UserProfile {
            user_id: UserId(0),
            profile: vec![],
        }];
        let log = events
            .iter()
            .enumerate()
            .map(|(s, &(u, i, t, y))| Interaction {
                user_id: UserId(u),
                item_id: ItemId(i),
                timestamp: t,
                seq: s as u64,
                label: y,
                context: vec![],
            })
            .collect();
        Dataset::new(items, vec![2], users, vec![], vec![], log).unwrap()
    }

    #[test]
    fn first_exposure_is_prior() {
        let d = ds(&[(0, 1, 5, true)]);
        let f = build_u2i(&d, &U2iIndex::build(&d))[0];
        assert_eq!(f, U2iFeatures::default());
        assert!((f.item_ctr() - 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn one_impression_one_click() {
        let d = ds(&[(0, 1, 5, true), (0, 1, 6, false)]);
        let f = build_u2i(&d, &U2iIndex::build(&d))[1];
        assert_eq!((f.item_impressions, f.item_clicks), (1, 1));
        assert!((f.item_ctr() - 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn same_timestamp_is_not_visible() {
        let d = ds(&[(0, 1, 5, true), (0, 1, 5, true)]);
        let f = build_u2i(&d, &U2iIndex::build(&d));
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1].item_impressions, 0);
    }

    #[test]
    fn future_events_do_not_matter() {
        let base = [(0, 0, 1, true), (0, 2, 2, false), (0, 1, 3, true)];
        let short = ds(&base);
        let mut longer = base.to_vec();
        longer.push((0, 1, 9, true));
        longer.push((0, 0, 3, true));
        let long = ds(&longer);
        let (a, b) = (U2iIndex::build(&short), U2iIndex::build(&long));
        for item in 0..3 {
            assert_eq!(a.features(UserId(0), item, 3), b.features(UserId(0), item, 3));
        }
        assert_eq!(a.history(UserId(0), 3), vec![0]);
        // category 0 holds items 0 and 2
        let f = a.features(UserId(0), 2, 3);
        assert_eq!((f.category_impressions, f.category_clicks), (2, 1));
    }

    #[test]
    fn snapshot_matches_direct_lookup() {
        let d = ds(&[(0, 0, 1, true), (0, 2, 2, false), (0, 1, 3, true), (0, 1, 4, false), (0, 0, 6, true)]);
        let idx = U2iIndex::build(&d);
        for t in 0..8 {
            let snap = idx.snapshot(UserId(0), t);
            for item in 0..3 {
                assert_eq!(snap.features(item), idx.features(UserId(0), item, t));
            }
        }
        assert_eq!(idx.snapshot(UserId(9), 5).features(1), U2iFeatures::default());
    }
}
