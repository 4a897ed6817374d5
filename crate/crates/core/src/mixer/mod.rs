//! Shared scoring network for the ranking and recall paths.
//!
//! Both paths feed `[BN_u(e_u); BN_item(·); BN_cross(·)]` into one MLP. The
//! user BN is a single instance; the item and cross BNs are path specific.

mod tower;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};
use crate::numerics::{BatchNorm, Mlp, Mode, Moments, NodeId, ParamStore, Scalar, Tape, Tensor2};

pub use tower::{UserFeatures, UserTower};

/// Which item/cross inputs are being scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScorePath {
    /// `e_v` and `c_{u,v}`.
    Rank,
    /// `e_sid^{(1:l)}` and `u2t^{(1:l)}`.
    Recall,
}

/// Identifies one of the five batch-norm layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnSlot {
    User,
    Item,
    U2i,
    Sid,
    U2t,
}

/// Train-mode batch moments waiting to be folded into running statistics.
pub type BnUpdates<T> = Vec<(BnSlot, Moments<T>)>;

#[derive(Clone, Debug)]
pub struct MixerDims {
    pub user: usize,
    pub item: usize,
    pub cross: usize,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Mixer<T> {
    pub dims: MixerDims,
    pub mlp: Mlp,
    pub bn_u: BatchNorm<T>,
    pub bn_v: BatchNorm<T>,
    pub bn_u2i: BatchNorm<T>,
    pub bn_sid: BatchNorm<T>,
    pub bn_u2t: BatchNorm<T>,
}

impl<T: Scalar> Mixer<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: MixerDims, momentum: T, eps: T, rng: &mut R) -> Self {
        let mut widths = vec![dims.user + dims.item + dims.cross];
        widths.extend(&dims.hidden);
        widths.push(1);
        let mlp = Mlp::new(store, "mixer.mlp", &widths, rng);
        let mut bn = |name: &str, dim: usize| BatchNorm::new(store, name, dim, momentum, eps);
        let bn_u = bn("bn_u", dims.user);
        let bn_v = bn("bn_v", dims.item);
        let bn_u2i = bn("bn_u2i", dims.cross);
        let bn_sid = bn("bn_sid", dims.item);
        let bn_u2t = bn("bn_u2t", dims.cross);
        Self {
            dims,
            mlp,
            bn_u,
            bn_v,
            bn_u2i,
            bn_sid,
            bn_u2t,
        }
    }

    pub fn bn(&self, slot: BnSlot) -> &BatchNorm<T> {
        match slot {
            BnSlot::User => &self.bn_u,
            BnSlot::Item => &self.bn_v,
            BnSlot::U2i => &self.bn_u2i,
            BnSlot::Sid => &self.bn_sid,
            BnSlot::U2t => &self.bn_u2t,
        }
    }

    pub fn bn_mut(&mut self, slot: BnSlot) -> &mut BatchNorm<T> {
        match slot {
            BnSlot::User => &mut self.bn_u,
            BnSlot::Item => &mut self.bn_v,
            BnSlot::U2i => &mut self.bn_u2i,
            BnSlot::Sid => &mut self.bn_sid,
            BnSlot::U2t => &mut self.bn_u2t,
        }
    }

    pub fn slots(path: ScorePath) -> [BnSlot; 3] {
        match path {
            ScorePath::Rank => [BnSlot::User, BnSlot::Item, BnSlot::U2i],
            ScorePath::Recall => [BnSlot::User, BnSlot::Sid, BnSlot::U2t],
        }
    }

    /// Logit column for a batch; in train mode the BN moments are returned so
    /// the caller can fold them in after the step.
    pub fn score(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        path: ScorePath,
        user: NodeId,
        item: NodeId,
        cross: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, BnUpdates<T>)> {
        let want = [self.dims.user, self.dims.item, self.dims.cross];
        let inputs = [user, item, cross];
        let rows = tape.value(user).rows();
        for (&n, &w) in inputs.iter().zip(&want) {
            let v = tape.value(n);
            if v.cols() != w || v.rows() != rows {
                return Err(DigError::shape("Mixer::score", format!("{rows}x{w}"), format!("{}x{}", v.rows(), v.cols())));
            }
        }
        if mode == Mode::Train && rows < 2 {
            return Err(DigError::InvalidInput("train-mode scoring needs at least two rows".into()));
        }
        let mut updates = Vec::new();
        let mut normed = [user; 3];
        for (i, (slot, x)) in Self::slots(path).into_iter().zip(inputs).enumerate() {
            let (y, m) = self.bn(slot).forward(tape, store, x, mode);
            if let Some(m) = m {
                updates.push((slot, m));
            }
            normed[i] = y;
        }
        let h = tape.concat_cols(&normed);
        Ok((self.mlp.forward(tape, store, h), updates))
    }

    pub fn absorb(&mut self, updates: &[(BnSlot, Moments<T>)]) {
        for (slot, m) in updates {
            self.bn_mut(*slot).state.absorb(m);
        }
    }

    /// Inference-mode logits for plain value inputs.
    pub fn score_values(
        &self,
        store: &ParamStore<T>,
        path: ScorePath,
        user: &Tensor2<T>,
        item: &Tensor2<T>,
        cross: &Tensor2<T>,
    ) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let u = tape.constant(user.clone());
        let i = tape.constant(item.clone());
        let c = tape.constant(cross.clone());
        let (z, _) = self.score(&mut tape, store, path, u, i, c, Mode::Infer)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// `ŷ_rank` logit for one user/item pair in inference mode.
pub fn rank_score<T: Scalar>(
    mixer: &Mixer<T>,
    store: &ParamStore<T>,
    e_u: &[T],
    e_v: &[T],
    c_uv: &[T],
) -> Result<T> {
    one(mixer, store, ScorePath::Rank, e_u, e_v, c_uv)
}

/// `ŷ_recall^{(l)}` logit for one user/prefix pair in inference mode.
pub fn recall_score<T: Scalar>(
    mixer: &Mixer<T>,
    store: &ParamStore<T>,
    e_u: &[T],
    prefix_emb: &[T],
    u2t: &[T],
) -> Result<T> {
    one(mixer, store, ScorePath::Recall, e_u, prefix_emb, u2t)
}

fn one<T: Scalar>(mixer: &Mixer<T>, store: &ParamStore<T>, path: ScorePath, a: &[T], b: &[T], c: &[T]) -> Result<T> {
    let z = mixer.score_values(store, path, &Tensor2::row_vector(a), &Tensor2::row_vector(b), &Tensor2::row_vector(c))?;
    Ok(z[0])
}
