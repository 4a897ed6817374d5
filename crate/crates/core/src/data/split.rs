use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};
use crate::ids::UserId;

use super::Dataset;

/// Held-out positives of one evaluated user, as `(timestamp, seq)` keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalUser {
    pub user_id: UserId,
    /// Log index of the second-to-last positive.
    pub val_event: usize,
    /// Log index of the last positive.
    pub test_event: usize,
}

/// Log indices per split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub eval_users: Vec<EvalUser>,
}

/// Per-user last positive → test, second-to-last → val, everything earlier →
/// train. Users with fewer than three positives stay entirely in train.
pub fn temporal_split(ds: &Dataset) -> Result<Split> {
    if ds.log.is_empty() {
        return Err(DigError::Data("empty interaction log".into()));
    }
    let mut positives: HashMap<UserId, Vec<usize>> = HashMap::new();
    for (i, ev) in ds.log.iter().enumerate() {
        if ev.label {
            positives.entry(ev.user_id).or_default().push(i);
        }
    }
    // the log is sorted by (timestamp, seq), so indices order events in time
    let mut cut: HashMap<UserId, (usize, usize)> = HashMap::new();
    for (u, p) in &positives {
        if p.len() >= 3 {
            cut.insert(*u, (p[p.len() - 2], p[p.len() - 1]));
        }
    }
    let mut split = Split::default();
    for (i, ev) in ds.log.iter().enumerate() {
        match cut.get(&ev.user_id) {
            Some(&(_, t)) if i >= t => split.test.push(i),
            Some(&(v, _)) if i >= v => split.val.push(i),
            _ => split.train.push(i),
        }
    }
    let mut eval: Vec<EvalUser> = cut
        .into_iter()
        .map(|(user_id, (val_event, test_event))| EvalUser {
            user_id,
            val_event,
            test_event,
        })
        .collect();
    eval.sort_by_key(|e| e.user_id);
    split.eval_users = eval;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, UserProfile};
    use crate::ids::ItemId;
    use crate::tokenizer::ItemRecord;

    fn ds(events: &[(u32, u64, bool)]) -> Dataset {
        let items = vec![ItemRecord {
            item_id: ItemId(0),
            static_features: vec![],
        }];
        let users = (0..2)
            .map(|u| UserProfile {
                user_id: UserId(u),
                profile: vec![],
            })
            .collect();
        let log = events
            .iter()
            .enumerate()
            .map(|(s, &(u, t, y))| Interaction {
                user_id: UserId(u),
                item_id: ItemId(0),
                timestamp: t,
                seq: s as u64,
                label: y,
                context: vec![],
            })
            .collect();
        Dataset::new(items, vec![], users, vec![], vec![], log).unwrap()
    }

    #[test]
    fn three_clicks() {
        let d = ds(&[(0, 1, true), (0, 2, true), (0, 3, true)]);
        let s = temporal_split(&d).unwrap();
        assert_eq!((s.train.clone(), s.val.clone(), s.test.clone()), (vec![0], vec![1], vec![2]));
        assert_eq!(s.eval_users.len(), 1);
    }

    #[test]
    fn two_clicks_stay_in_train() {
        let d = ds(&[(1, 1, true), (1, 2, false), (1, 3, true)]);
        let s = temporal_split(&d).unwrap();
        assert_eq!(s.train.len(), 3);
        assert!(s.eval_users.is_empty());
    }

    #[test]
    fn negatives_follow_their_window() {
        let d = ds(&[(0, 1, true), (0, 2, false), (0, 3, true), (0, 4, false), (0, 5, true), (0, 6, false)]);
        let s = temporal_split(&d).unwrap();
        assert_eq!(s.train, vec![0, 1]);
        assert_eq!(s.val, vec![2, 3]);
        assert_eq!(s.test, vec![4, 5]);
    }

    #[test]
    fn empty_log_is_error() {
        assert!(temporal_split(&ds(&[])).is_err());
    }
}
