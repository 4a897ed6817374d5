use serde::{Deserialize, Serialize};

use crate::data::{RankSample, RetrievalSample, U2iFeatures, U2iIndex, UserSnapshot, U2I_DIM};
use crate::error::{DigError, Result};
use crate::mixer::{BnUpdates, ScorePath, UserFeatures};
use crate::numerics::{Mode, NodeId, ParamStore, Scalar, Tape, Tensor2};
use crate::tokenizer::{quantization_losses, ItemRecord, QuantizationTrace};
use crate::u2t::{cumulative_means, distill_loss, request_level_means, BucketIndex};

use super::model::cross_tensor;
use super::DigModel;

/// Where a row's cross features come from at teacher time.
#[derive(Clone, Debug)]
pub enum CrossSource<'a> {
    /// Point-in-time counts of the requesting user.
    Snapshot(UserSnapshot<'a>),
    /// Precomputed `c(u, v')` per batch item, in batch-item order.
    Table(Vec<U2iFeatures>),
}

/// One request (a user at a point in time) of a mixed batch.
#[derive(Clone, Debug)]
pub struct Request<'a> {
    pub user: UserFeatures,
    pub cross: CrossSource<'a>,
}

/// Ranking and retrieval rows of one optimization step.
///
/// Rows reference requests; ranking rows come first, one request each, then
/// one request per retrieval sample shared by its positive and negatives.
#[derive(Clone, Debug)]
pub struct TrainingBatch<'a, T> {
    pub requests: Vec<Request<'a>>,
    /// Distinct catalog indices touched by the batch.
    pub items: Vec<usize>,
    pub rank_items: Vec<usize>,
    pub rank_cross: Tensor2<T>,
    pub rank_labels: Vec<T>,
    /// Request of each retrieval row.
    pub ret_requests: Vec<usize>,
    pub ret_items: Vec<usize>,
    pub ret_labels: Vec<T>,
}

fn position(items: &mut Vec<usize>, seen: &mut std::collections::HashMap<usize, usize>, item: usize) -> usize {
    *seen.entry(item).or_insert_with(|| {
        items.push(item);
        items.len() - 1
    })
}

impl<'a, T: Scalar> TrainingBatch<'a, T> {
    pub fn assemble(rank: &[&RankSample], retrieval: &[&RetrievalSample], index: &'a U2iIndex) -> Self {
        let mut items = Vec::new();
        let mut seen = std::collections::HashMap::new();
        let mut requests = Vec::with_capacity(rank.len() + retrieval.len());
        for s in rank {
            position(&mut items, &mut seen, s.item);
            requests.push(Request {
                user: s.user.clone(),
                cross: CrossSource::Snapshot(index.snapshot(s.user.user_id, s.timestamp)),
            });
        }
        let mut ret_requests = Vec::new();
        let mut ret_items = Vec::new();
        let mut ret_labels = Vec::new();
        for s in retrieval {
            let q = requests.len();
            requests.push(Request {
                user: s.user.clone(),
                cross: CrossSource::Snapshot(index.snapshot(s.user.user_id, s.timestamp)),
            });
            for (j, &item) in std::iter::once(&s.positive).chain(&s.negatives).enumerate() {
                position(&mut items, &mut seen, item);
                ret_requests.push(q);
                ret_items.push(item);
                ret_labels.push(if j == 0 { T::one() } else { T::zero() });
            }
        }
        let cross: Vec<U2iFeatures> = rank.iter().map(|s| s.cross).collect();
        Self {
            requests,
            items,
            rank_items: rank.iter().map(|s| s.item).collect(),
            rank_cross: cross_tensor(&cross),
            rank_labels: rank.iter().map(|s| if s.label { T::one() } else { T::zero() }).collect(),
            ret_requests,
            ret_items,
            ret_labels,
        }
    }

    pub fn rank_rows(&self) -> usize {
        self.rank_items.len()
    }

    pub fn ret_rows(&self) -> usize {
        self.ret_items.len()
    }

    /// Request of every teacher row: ranking rows then retrieval rows.
    fn row_requests(&self) -> Vec<usize> {
        (0..self.rank_rows()).chain(self.ret_requests.iter().copied()).collect()
    }

    fn row_items(&self) -> Vec<usize> {
        self.rank_items.iter().chain(&self.ret_items).copied().collect()
    }

    fn cross_of(&self, request: usize, batch_item: usize) -> Vec<T> {
        let f = match &self.requests[request].cross {
            CrossSource::Snapshot(s) => s.features(self.items[batch_item]),
            CrossSource::Table(t) => t[batch_item],
        };
        f.vector().iter().map(|&v| T::of(v)).collect()
    }
}

/// Per-term loss values of one step, in `f64` for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rank: f64,
    pub recall: f64,
    pub recall_by_depth: Vec<f64>,
    pub commit: f64,
    pub sem: f64,
    pub u2t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `rank + w·recall + λ1·commit + λ2·sem + λ3·u2t` from the stored terms.
    pub fn weighted_total(&self, cfg: &super::TrainConfig) -> f64 {
        self.rank
            + cfg.recall_loss_weight * self.recall
            + cfg.lambda_commit * self.commit
            + cfg.lambda_sem * self.sem
            + cfg.lambda_u2t * self.u2t
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown) {
        self.rank += other.rank;
        self.recall += other.recall;
        if self.recall_by_depth.len() < other.recall_by_depth.len() {
            self.recall_by_depth.resize(other.recall_by_depth.len(), 0.0);
        }
        for (a, b) in self.recall_by_depth.iter_mut().zip(&other.recall_by_depth) {
            *a += b;
        }
        self.commit += other.commit;
        self.sem += other.sem;
        self.u2t += other.u2t;
        self.total += other.total;
    }

    pub(crate) fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            rank: self.rank * s,
            recall: self.recall * s,
            recall_by_depth: self.recall_by_depth.iter().map(|v| v * s).collect(),
            commit: self.commit * s,
            sem: self.sem * s,
            u2t: self.u2t * s,
            total: self.total * s,
        }
    }
}

/// Nodes of the recorded objective plus what the step needs afterwards.
pub struct JointLoss<T> {
    pub total: NodeId,
    pub rank: NodeId,
    pub recall: Option<NodeId>,
    /// `(depth, node)` for every supervised depth.
    pub recall_by_depth: Vec<(usize, NodeId)>,
    pub commit: Option<NodeId>,
    pub sem: Option<NodeId>,
    pub u2t: NodeId,
    pub breakdown: LossBreakdown,
    pub bn_updates: BnUpdates<T>,
    /// Quantization of each distinct batch item (empty with fixed SIDs).
    pub traces: Vec<QuantizationTrace<T>>,
}

/// Teacher view of a batch: codes per distinct item and per-level means per row.
pub struct Teacher<T> {
    pub item_codes: Vec<Vec<usize>>,
    pub traces: Vec<QuantizationTrace<T>>,
    /// Row codes, ranking rows then retrieval rows.
    pub row_codes: Vec<Vec<usize>>,
    /// `levels[r][l − 1]`: level-`l` bucket mean of row `r`.
    pub levels: Vec<Vec<Vec<T>>>,
}

/// Tokenizes the batch items against `store` (or reads the frozen table)
/// and builds the per-request bucket statistics.
pub fn batch_teacher<T: Scalar>(model: &DigModel<T>, store: &ParamStore<T>, batch: &TrainingBatch<'_, T>) -> Result<Teacher<T>> {
    let (item_codes, traces) = if model.config.fixed_sid {
        (batch.items.iter().map(|&i| model.sids[i].clone()).collect(), Vec::new())
    } else {
        let traces = model.quantize_items(store, &batch.items)?;
        (traces.iter().map(|t| t.codes.clone()).collect::<Vec<_>>(), traces)
    };
    let pos: std::collections::HashMap<usize, usize> = batch.items.iter().enumerate().map(|(j, &i)| (i, j)).collect();
    let refs: Vec<&[usize]> = item_codes.iter().map(Vec::as_slice).collect();
    let buckets = BucketIndex::build(&refs);
    let row_codes: Vec<Vec<usize>> = batch.row_items().iter().map(|i| item_codes[pos[i]].clone()).collect();
    let levels = batch
        .row_requests()
        .iter()
        .zip(&row_codes)
        .map(|(&q, codes)| request_level_means(&buckets, codes, U2I_DIM, |j| batch.cross_of(q, j)))
        .collect();
    Ok(Teacher {
        item_codes,
        traces,
        row_codes,
        levels,
    })
}

fn finite<T: Scalar>(tape: &Tape<T>, node: NodeId, name: &str) -> Result<f64> {
    let v = tape.scalar(node).as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DigError::NonFinite(name.to_string()))
    }
}

fn level_tensor<T: Scalar>(rows: impl Iterator<Item = Vec<T>>, dim: usize) -> Result<Tensor2<T>> {
    let rows: Vec<Vec<T>> = rows.collect();
    if rows.is_empty() {
        return Ok(Tensor2::zeros(0, dim));
    }
    Tensor2::from_rows(&rows)
}

/// Records the five-part objective for `batch` on `tape`, reading parameters
/// from `store`. Batch-norm layers run in train mode; their moments come back
/// in [`JointLoss::bn_updates`] and nothing in `model` is mutated.
pub fn joint_loss<T: Scalar>(
    model: &DigModel<T>,
    store: &ParamStore<T>,
    batch: &TrainingBatch<'_, T>,
    tape: &mut Tape<T>,
) -> Result<JointLoss<T>> {
    let cfg = &model.config;
    let (n_rank, n_ret) = (batch.rank_rows(), batch.ret_rows());
    if n_rank < 2 {
        return Err(DigError::InvalidInput("a batch needs at least two ranking rows".into()));
    }
    let teacher = batch_teacher(model, store, batch)?;
    let pos: std::collections::HashMap<usize, usize> = batch.items.iter().enumerate().map(|(j, &i)| (i, j)).collect();

    // user tower over every request, then per-row views
    let users: Vec<&UserFeatures> = batch.requests.iter().map(|q| &q.user).collect();
    let e_req = model.tower.forward(tape, store, &users);
    let rank_rows: Vec<usize> = (0..n_rank).collect();
    let e_u_rank = tape.select_rows(e_req, &rank_rows);
    let all_rows = batch.row_requests();
    let e_u_all = tape.select_rows(e_req, &all_rows);

    // ranking path
    let records: Vec<&ItemRecord> = batch.items.iter().map(|&i| &model.items[i]).collect();
    let e_items = model.encoder.encode(tape, store, &records)?;
    let rank_pos: Vec<usize> = batch.rank_items.iter().map(|i| pos[i]).collect();
    let e_v = tape.select_rows(e_items, &rank_pos);
    let c = tape.constant(batch.rank_cross.clone());
    let (z_rank, mut bn_updates) = model.mixer.score(tape, store, ScorePath::Rank, e_u_rank, e_v, c, Mode::Train)?;
    let rank = tape.bce_with_logits(z_rank, batch.rank_labels.clone());

    // quantization losses over the distinct batch items
    let (commit, sem) = if cfg.fixed_sid {
        (None, None)
    } else {
        let (c, s) = quantization_losses(tape, store, &model.codebook, e_items, &teacher.item_codes);
        (Some(c), Some(s))
    };

    // student: every row, every depth
    let row_refs: Vec<&[usize]> = teacher.row_codes.iter().map(Vec::as_slice).collect();
    let depth = cfg.depth;
    let mut prefix = Vec::with_capacity(depth);
    let mut preds = Vec::with_capacity(depth);
    let mut targets = Vec::with_capacity(depth);
    for l in 1..=depth {
        let p = model.sid_emb.prefix_embedding(tape, store, &row_refs, l)?;
        preds.push(model.student.predict(tape, store, e_u_all, p, l));
        prefix.push(p);
        targets.push(level_tensor(teacher.levels.iter().map(|lv| lv[l - 1].clone()), U2I_DIM)?);
    }
    let u2t = distill_loss(tape, &preds, &targets);

    // recall path
    let mut recall_by_depth = Vec::new();
    let mut recall = None;
    if cfg.recall_loss_weight != 0.0 && n_ret >= 2 {
        let ret_rows: Vec<usize> = (n_rank..n_rank + n_ret).collect();
        let e_u_ret = tape.select_rows(e_u_all, &ret_rows);
        let cumulative: Vec<Vec<Vec<T>>> = teacher.levels[n_rank..].iter().map(|lv| cumulative_means(lv)).collect();
        for l in cfg.recall_depths() {
            let sid = tape.select_rows(prefix[l - 1], &ret_rows);
            let u2t_in = if cfg.no_train_u2i {
                let mut acc = tape.select_rows(preds[0], &ret_rows);
                for p in &preds[1..l] {
                    let s = tape.select_rows(*p, &ret_rows);
                    acc = tape.add(acc, s);
                }
                let mean = tape.scale(acc, T::one() / T::of_usize(l));
                tape.detach(mean)
            } else {
                let t = level_tensor(cumulative.iter().map(|c| c[l - 1].clone()), U2I_DIM)?;
                tape.constant(t)
            };
            let (z, up) = model.mixer.score(tape, store, ScorePath::Recall, e_u_ret, sid, u2t_in, Mode::Train)?;
            bn_updates.extend(up);
            recall_by_depth.push((l, tape.bce_with_logits(z, batch.ret_labels.clone())));
        }
        let mut acc = recall_by_depth[0].1;
        for &(_, n) in &recall_by_depth[1..] {
            acc = tape.add(acc, n);
        }
        recall = Some(tape.scale(acc, T::one() / T::of_usize(recall_by_depth.len())));
    }

    // weighted total
    let mut total = rank;
    let mut add_term = |tape: &mut Tape<T>, node: Option<NodeId>, w: f64| {
        if let Some(n) = node {
            if w != 0.0 {
                let s = tape.scale(n, T::of(w));
                total = tape.add(total, s);
            }
        }
    };
    add_term(tape, recall, cfg.recall_loss_weight);
    add_term(tape, commit, cfg.lambda_commit);
    add_term(tape, sem, cfg.lambda_sem);
    add_term(tape, Some(u2t), cfg.lambda_u2t);

    let breakdown = LossBreakdown {
        rank: finite(tape, rank, "L_rank")?,
        recall: recall.map_or(Ok(0.0), |n| finite(tape, n, "L_recall"))?,
        recall_by_depth: recall_by_depth
            .iter()
            .map(|&(l, n)| finite(tape, n, &format!("L_recall@{l}")))
            .collect::<Result<_>>()?,
        commit: commit.map_or(Ok(0.0), |n| finite(tape, n, "L_commit"))?,
        sem: sem.map_or(Ok(0.0), |n| finite(tape, n, "L_sem"))?,
        u2t: finite(tape, u2t, "L_u2t")?,
        total: finite(tape, total, "total loss")?,
    };
    Ok(JointLoss {
        total,
        rank,
        recall,
        recall_by_depth,
        commit,
        sem,
        u2t,
        breakdown,
        bn_updates,
        traces: teacher.traces,
    })
}
