use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RankSample, U2iFeatures, U2I_DIM};
use crate::error::{DigError, Result};
use crate::ids::ItemId;
use crate::mixer::{Mixer, MixerDims, ScorePath, UserFeatures, UserTower};
use crate::numerics::{Mode, ParamStore, Scalar, Tape, Tensor2};
use crate::tokenizer::{balanced_kmeans_init, Codebook, ItemEncoder, ItemRecord, QuantizationTrace, Sid, SidEmbeddingTable, SidTable};
use crate::u2t::{StatMeanTable, U2tStudent};

use super::TrainConfig;

const CHUNK: usize = 1024;

/// Vocabulary sizes a model is built against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub item_cards: Vec<usize>,
    pub profile_cards: Vec<usize>,
    pub context_cards: Vec<usize>,
    pub n_items: usize,
}

impl ModelShape {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            item_cards: ds.item_cards.clone(),
            profile_cards: ds.profile_cards.clone(),
            context_cards: ds.context_cards.clone(),
            n_items: ds.n_items(),
        }
    }
}

/// Every parameter group plus the current tokenization of the catalog.
#[derive(Clone, Debug)]
pub struct DigModel<T> {
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub store: ParamStore<T>,
    pub encoder: ItemEncoder,
    pub codebook: Codebook<T>,
    pub sid_emb: SidEmbeddingTable,
    pub tower: UserTower,
    pub mixer: Mixer<T>,
    pub student: U2tStudent,
    /// Catalog in dense index order.
    pub items: Vec<ItemRecord>,
    /// Current SID of each catalog item.
    pub sids: Vec<Vec<usize>>,
    pub stat_table: Option<StatMeanTable<T>>,
    positions: HashMap<ItemId, usize>,
}

/// `c_{u,v}` rows for the model.
pub fn cross_tensor<T: Scalar>(feats: &[U2iFeatures]) -> Tensor2<T> {
    let mut out = Tensor2::zeros(feats.len(), U2I_DIM);
    for (r, f) in feats.iter().enumerate() {
        for (o, v) in out.row_mut(r).iter_mut().zip(f.vector()) {
            *o = T::of(v);
        }
    }
    out
}

impl<T: Scalar> DigModel<T> {
    /// Allocates every parameter group in a fixed order from `rng`.
    pub fn new<R: Rng + ?Sized>(config: TrainConfig, shape: ModelShape, items: Vec<ItemRecord>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if items.len() != shape.n_items {
            return Err(DigError::shape("DigModel::new", shape.n_items, items.len()));
        }
        let c = &config;
        let mut store = ParamStore::new();
        let encoder = ItemEncoder::new(&mut store, &shape.item_cards, c.dim, c.encoder_hidden, rng);
        let mut codebook = Codebook::new(&mut store, c.depth, c.k, c.dim, T::of(c.alpha), c.null_code, rng)?;
        codebook.dead_threshold = T::of(c.dead_threshold);
        codebook.grace = c.dead_grace;
        let sid_emb = SidEmbeddingTable::new(&mut store, c.depth, c.k, c.dim, rng);
        let tower = UserTower::new(
            &mut store,
            &shape.profile_cards,
            &shape.context_cards,
            shape.n_items,
            c.user_dim,
            c.user_dim,
            rng,
        );
        let dims = MixerDims {
            user: c.user_dim,
            item: c.dim,
            cross: c.cross_dim,
            hidden: c.mixer_hidden.clone(),
        };
        let mixer = Mixer::new(&mut store, dims, T::of(c.bn_momentum), T::of(c.bn_eps), rng);
        let student = U2tStudent::new(&mut store, c.depth, c.user_dim, c.dim, c.u2t_hidden, c.cross_dim, rng);
        let sids = vec![vec![0; c.depth]; items.len()];
        let positions = items.iter().enumerate().map(|(i, r)| (r.item_id, i)).collect();
        Ok(Self {
            config,
            shape,
            store,
            encoder,
            codebook,
            sid_emb,
            tower,
            mixer,
            student,
            items,
            sids,
            stat_table: None,
            positions,
        })
    }

    pub fn for_dataset<R: Rng + ?Sized>(config: TrainConfig, ds: &Dataset, rng: &mut R) -> Result<Self> {
        if config.cross_dim != U2I_DIM {
            return Err(DigError::InvalidInput(format!(
                "cross_dim must be {U2I_DIM} for dataset cross features, got {}",
                config.cross_dim
            )));
        }
        Self::new(config, ModelShape::of(ds), ds.items.clone(), rng)
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn encode_catalog(&self, store: &ParamStore<T>) -> Result<Tensor2<T>> {
        let refs: Vec<&ItemRecord> = self.items.iter().collect();
        self.encoder.encode_values(store, &refs)
    }

    /// Balanced k-means tree over the current catalog embeddings; sets the
    /// codebook and a collision-free SID per item.
    pub fn init_tokenizer<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let emb = self.encode_catalog(&self.store)?;
        self.sids = balanced_kmeans_init(&emb, &mut self.codebook, &mut self.store, rng)?;
        self.codebook.reset_stats();
        Ok(())
    }

    /// Nearest-code SIDs of the whole catalog under the current snapshot.
    pub fn retokenize(&mut self) -> Result<()> {
        let emb = self.encode_catalog(&self.store)?;
        self.sids = (0..emb.rows()).map(|i| self.codebook.assign(&self.store, emb.row(i))).collect();
        Ok(())
    }

    /// Quantization traces of selected catalog items against `store`.
    pub fn quantize_items(&self, store: &ParamStore<T>, items: &[usize]) -> Result<Vec<QuantizationTrace<T>>> {
        let refs: Vec<&ItemRecord> = items.iter().map(|&i| &self.items[i]).collect();
        let emb = self.encoder.encode_values(store, &refs)?;
        Ok((0..emb.rows()).map(|r| self.codebook.quantize(store, emb.row(r))).collect())
    }

    pub fn sid_table(&self) -> Result<SidTable> {
        let mut t = SidTable::new(self.config.depth, self.config.k);
        for (rec, sid) in self.items.iter().zip(&self.sids) {
            t.insert(rec.item_id, Sid(sid.clone()))?;
        }
        Ok(t)
    }

    /// Replaces the per-item SIDs; every catalog item must be present.
    pub fn set_sid_table(&mut self, table: &SidTable) -> Result<()> {
        if table.depth != self.config.depth || table.k != self.config.k {
            return Err(DigError::shape(
                "set_sid_table",
                format!("depth {} k {}", self.config.depth, self.config.k),
                format!("depth {} k {}", table.depth, table.k),
            ));
        }
        let sids = self
            .items
            .iter()
            .map(|rec| {
                table
                    .get(rec.item_id)
                    .map(|s| s.0.clone())
                    .ok_or_else(|| DigError::Data(format!("SID table lacks item {}", rec.item_id.0)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.sids = sids;
        Ok(())
    }

    pub fn item_index(&self, id: ItemId) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    /// `e_u` rows in inference mode.
    pub fn user_embeddings(&self, users: &[&UserFeatures]) -> Tensor2<T> {
        let mut out = Tensor2::zeros(users.len(), self.tower.dim);
        for (c, chunk) in users.chunks(CHUNK).enumerate() {
            let mut tape = Tape::new();
            let e = self.tower.forward(&mut tape, &self.store, chunk);
            let v = tape.value(e);
            for r in 0..chunk.len() {
                out.row_mut(c * CHUNK + r).copy_from_slice(v.row(r));
            }
        }
        out
    }

    /// `ŷ_rank` logits with true cross features.
    pub fn rank_logits(&self, samples: &[&RankSample]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let users: Vec<&UserFeatures> = chunk.iter().map(|s| &s.user).collect();
            let items: Vec<&ItemRecord> = chunk.iter().map(|s| &self.items[s.item]).collect();
            let cross: Vec<U2iFeatures> = chunk.iter().map(|s| s.cross).collect();
            let mut tape = Tape::new();
            let u = self.tower.forward(&mut tape, &self.store, &users);
            let v = self.encoder.encode(&mut tape, &self.store, &items)?;
            let c = tape.constant(cross_tensor(&cross));
            let (z, _) = self.mixer.score(&mut tape, &self.store, ScorePath::Rank, u, v, c, Mode::Infer)?;
            out.extend_from_slice(tape.value(z).data());
        }
        Ok(out)
    }

    /// Serving-time `û2t^{(1:l)}`: the mean of student predictions over depths
    /// `1..=l`, or the stored per-prefix table when the student is switched off.
    pub fn u2t_inference(&self, e_u: &Tensor2<T>, codes: &[&[usize]], l: usize) -> Result<Tensor2<T>> {
        if self.config.no_infer_mlp_u2t {
            let table = self
                .stat_table
                .as_ref()
                .ok_or_else(|| DigError::InvalidInput("statistical u2t table not built".into()))?;
            let rows: Vec<Vec<T>> = codes.iter().map(|c| table.prefix(c, l)).collect();
            return Tensor2::from_rows(&rows);
        }
        let mut acc = Tensor2::zeros(codes.len(), self.config.cross_dim);
        for i in 1..=l {
            let p = self.sid_emb.prefix_values(&self.store, codes, i)?;
            acc.add_assign(&self.student.predict_values(&self.store, e_u, &p, i)?);
        }
        Ok(acc.scale(T::one() / T::of_usize(l)))
    }

    /// Depth-`l` recall logits for labeled pairs, using each item's current SID.
    pub fn recall_logits(&self, samples: &[&RankSample], l: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let users: Vec<&UserFeatures> = chunk.iter().map(|s| &s.user).collect();
            let codes: Vec<&[usize]> = chunk.iter().map(|s| self.sids[s.item].as_slice()).collect();
            let e_u = self.user_embeddings(&users);
            let sid = self.sid_emb.prefix_values(&self.store, &codes, l)?;
            let u2t = self.u2t_inference(&e_u, &codes, l)?;
            out.extend(self.mixer.score_values(&self.store, ScorePath::Recall, &e_u, &sid, &u2t)?);
        }
        Ok(out)
    }
}
