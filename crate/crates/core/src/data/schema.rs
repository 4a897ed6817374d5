use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};
use crate::ids::{ItemId, UserId};
use crate::tokenizer::ItemRecord;

/// One labeled exposure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub timestamp: u64,
    /// Stable tie-breaker among equal timestamps.
    pub seq: u64,
    pub label: bool,
    pub context: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub profile: Vec<usize>,
}

/// Catalog, users and a time-ordered exposure log.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<ItemRecord>,
    pub item_cards: Vec<usize>,
    pub users: Vec<UserProfile>,
    pub profile_cards: Vec<usize>,
    pub context_cards: Vec<usize>,
    /// Sorted by `(timestamp, seq)`.
    pub log: Vec<Interaction>,
    item_index: HashMap<ItemId, usize>,
    user_index: HashMap<UserId, usize>,
}

impl Dataset {
    pub fn new(
        items: Vec<ItemRecord>,
        item_cards: Vec<usize>,
        users: Vec<UserProfile>,
        profile_cards: Vec<usize>,
        context_cards: Vec<usize>,
        mut log: Vec<Interaction>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(DigError::Data("empty catalog".into()));
        }
        let mut item_index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if item_index.insert(it.item_id, i).is_some() {
                return Err(DigError::Data(format!("duplicate item {}", it.item_id)));
            }
        }
        let mut user_index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if user_index.insert(u.user_id, i).is_some() {
                return Err(DigError::Data(format!("duplicate user {}", u.user_id)));
            }
        }
        for ev in &log {
            if !item_index.contains_key(&ev.item_id) {
                return Err(DigError::Data(format!("log references unknown item {}", ev.item_id)));
            }
            if !user_index.contains_key(&ev.user_id) {
                return Err(DigError::Data(format!("log references unknown user {}", ev.user_id)));
            }
        }
        log.sort_by_key(|e| (e.timestamp, e.seq));
        Ok(Self {
            items,
            item_cards,
            users,
            profile_cards,
            context_cards,
            log,
            item_index,
            user_index,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn item_idx(&self, id: ItemId) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    pub fn user_idx(&self, id: UserId) -> Option<usize> {
        self.user_index.get(&id).copied()
    }

    /// Category of an item: the value of static field 0, if present.
    pub fn category(&self, item: usize) -> Option<usize> {
        category_of(&self.items[item])
    }
}

pub fn category_of(rec: &ItemRecord) -> Option<usize> {
    rec.static_features.iter().find(|(f, _)| *f == 0).map(|&(_, v)| v)
}
