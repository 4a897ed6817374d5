use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::UserId;
use crate::numerics::{normal_init, Linear, NodeId, ParamId, ParamRole, ParamStore, Scalar, Tape};

/// Request-time user features shared by both scoring paths.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserFeatures {
    pub user_id: UserId,
    /// One categorical value per profile field.
    pub profile: Vec<usize>,
    /// One categorical value per context field.
    pub context: Vec<usize>,
    /// Dense catalog indices of recently clicked items, oldest first.
    pub history: Vec<usize>,
}

/// `e_u`: mean of profile and context field embeddings plus the mean history
/// item embedding, through one linear layer and a ReLU.
#[derive(Clone, Debug)]
pub struct UserTower {
    pub profile: Vec<ParamId>,
    pub profile_cards: Vec<usize>,
    pub context: Vec<ParamId>,
    pub context_cards: Vec<usize>,
    /// `n_items + 1` rows; the last row absorbs unknown indices.
    pub history: ParamId,
    pub n_items: usize,
    pub proj: Linear,
    pub dim: usize,
}

impl UserTower {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        profile_cards: &[usize],
        context_cards: &[usize],
        n_items: usize,
        emb_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut table = |name: String, rows: usize, store: &mut ParamStore<T>| {
            store.add(name, normal_init(rows, emb_dim, 0.1, rng), ParamRole::Trainable)
        };
        let profile = profile_cards
            .iter()
            .enumerate()
            .map(|(i, &c)| table(format!("user.profile{i}"), c + 1, store))
            .collect();
        let context = context_cards
            .iter()
            .enumerate()
            .map(|(i, &c)| table(format!("user.context{i}"), c + 1, store))
            .collect();
        let history = table("user.history".into(), n_items + 1, store);
        let proj = Linear::new(store, "user.proj", emb_dim, dim, rng);
        Self {
            profile,
            profile_cards: profile_cards.to_vec(),
            context,
            context_cards: context_cards.to_vec(),
            history,
            n_items,
            proj,
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, users: &[&UserFeatures]) -> NodeId {
        let n_fields = self.profile.len() + self.context.len();
        let mut acc: Option<NodeId> = None;
        let fields = self
            .profile
            .iter()
            .zip(&self.profile_cards)
            .enumerate()
            .map(|(f, (&t, &c))| (t, c, f, true))
            .chain(self.context.iter().zip(&self.context_cards).enumerate().map(|(f, (&t, &c))| (t, c, f, false)));
        for (table, card, f, is_profile) in fields {
            let rows = users
                .iter()
                .map(|u| {
                    let v = if is_profile { u.profile.get(f) } else { u.context.get(f) };
                    v.copied().filter(|&v| v < card).unwrap_or(card)
                })
                .collect();
            let g = tape.gather(store, table, rows);
            acc = Some(match acc {
                Some(a) => tape.add(a, g),
                None => g,
            });
        }

        let mut flat = Vec::new();
        let mut groups = Vec::with_capacity(users.len());
        for u in users {
            let w = if u.history.is_empty() { T::zero() } else { T::one() / T::of_usize(u.history.len()) };
            let g = u
                .history
                .iter()
                .map(|&i| {
                    flat.push(if i < self.n_items { i } else { self.n_items });
                    (flat.len() - 1, w)
                })
                .collect();
            groups.push(g);
        }
        let hist_rows = tape.gather(store, self.history, flat);
        let hist = tape.row_combine(hist_rows, groups);

        let pooled = match acc {
            Some(a) => {
                let mean = tape.scale(a, T::one() / T::of_usize(n_fields.max(1)));
                tape.add(mean, hist)
            }
            None => hist,
        };
        let h = self.proj.forward(tape, store, pooled);
        tape.relu(h)
    }
}
