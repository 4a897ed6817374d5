use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_samples, resample_negatives, temporal_split, user_features, Dataset, RankSample, RetrievalSample, Split, U2iIndex};
use crate::error::{DigError, Result};
use crate::eval::{codebook_report, recall_rank_gap, retrieval_metrics, MetricEvent, RetrievalTarget};
use crate::numerics::{AdamState, Scalar, Tape};
use crate::retrieval::{build_index, BeamConfig};
use crate::tokenizer::ResidualPool;
use crate::u2t::StatMeanTable;

use super::step::{batch_teacher, joint_loss, LossBreakdown, TrainingBatch};
use super::{DigModel, TrainConfig};

/// Cutoffs reported for retrieval.
pub const RECALL_KS: [usize; 3] = [10, 50, 100];

/// Split dataset with the samples every run over it needs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub dataset: Dataset,
    pub index: U2iIndex,
    pub split: Split,
    pub rank_train: Vec<RankSample>,
    pub retrieval_train: Vec<RetrievalSample>,
    pub rank_val: Vec<RankSample>,
    pub rank_test: Vec<RankSample>,
    pub val_targets: Vec<RetrievalTarget>,
    pub test_targets: Vec<RetrievalTarget>,
}

impl TrainData {
    /// Temporal split, point-in-time features and initial negatives drawn
    /// from `seed`.
    pub fn prepare(dataset: Dataset, neg_per_pos: usize, seed: u64) -> Result<Self> {
        let index = U2iIndex::build(&dataset);
        let split = temporal_split(&dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let (rank_train, retrieval_train) = build_samples(&dataset, &index, &split.train, neg_per_pos, &mut rng)?;
        let (rank_val, _) = build_samples(&dataset, &index, &split.val, 0, &mut rng)?;
        let (rank_test, _) = build_samples(&dataset, &index, &split.test, 0, &mut rng)?;
        let target = |i: usize| {
            let ev = &dataset.log[i];
            RetrievalTarget {
                user: user_features(&dataset, &index, ev.user_id, ev.timestamp, &ev.context),
                item: dataset.item_idx(ev.item_id).expect("validated log"),
                timestamp: ev.timestamp,
            }
        };
        let val_targets = split.eval_users.iter().map(|e| target(e.val_event)).collect();
        let test_targets = split.eval_users.iter().map(|e| target(e.test_event)).collect();
        if rank_train.len() < 2 || retrieval_train.is_empty() {
            return Err(DigError::Data("training split too small".into()));
        }
        Ok(Self {
            dataset,
            index,
            split,
            rank_train,
            retrieval_train,
            rank_val,
            rank_test,
            val_targets,
            test_targets,
        })
    }
}

/// Owns the mutable training state for one run.
pub struct Trainer<'d, T> {
    pub model: DigModel<T>,
    data: &'d TrainData,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    pool: ResidualPool<T>,
    retrieval: Vec<RetrievalSample>,
    pub steps: u64,
    pub restarts: usize,
    pub events: Vec<MetricEvent>,
    /// Inference-time switch held back until the statistical table exists.
    stat_inference: bool,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    /// Builds the model from `config.seed` and runs the balanced tokenizer init.
    pub fn new(config: TrainConfig, data: &'d TrainData) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = DigModel::for_dataset(config, &data.dataset, &mut rng)?;
        model.init_tokenizer(&mut rng)?;
        let stat_inference = std::mem::take(&mut model.config.no_infer_mlp_u2t);
        let adam = AdamState::new(model.config.adam, &model.store);
        let pool = ResidualPool::new(model.depth(), model.config.residual_pool);
        Ok(Self {
            model,
            data,
            adam,
            rng,
            pool,
            retrieval: data.retrieval_train.clone(),
            steps: 0,
            restarts: 0,
            events: Vec::new(),
            stat_inference,
        })
    }

    /// One optimization step on a ranking and a retrieval sub-batch.
    pub fn train_step(&mut self, rank: &[&RankSample], retrieval: &[&RetrievalSample]) -> Result<LossBreakdown> {
        let batch = TrainingBatch::<T>::assemble(rank, retrieval, &self.data.index);
        let mut tape = Tape::new();
        let jl = joint_loss(&self.model, &self.model.store, &batch, &mut tape)?;
        let total = jl.breakdown.total;
        if !total.is_finite() || total > self.model.config.divergence_threshold {
            return Err(DigError::Diverged(format!("loss {total} at step {}", self.steps)));
        }
        let grads = tape.backward(jl.total, &self.model.store);
        self.adam.step(&mut self.model.store, &grads)?;
        self.model.mixer.absorb(&jl.bn_updates);
        if !self.model.config.fixed_sid {
            self.model.codebook.ema_update_traces(&mut self.model.store, &jl.traces);
            for t in &jl.traces {
                self.pool.push_trace(t);
            }
            self.restarts += self
                .model
                .codebook
                .restart_dead_codes(&mut self.model.store, &self.pool, &mut self.rng)
                .len();
        }
        self.steps += 1;
        Ok(jl.breakdown)
    }

    /// One pass over the ranking samples, cycling through retrieval samples.
    /// On divergence the model is rolled back to its state at epoch start.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<LossBreakdown> {
        let snapshot = (self.model.clone(), self.adam.clone());
        match self.epoch_inner() {
            Ok(loss) => {
                self.emit_epoch(epoch, &loss)?;
                Ok(loss)
            }
            Err(e @ (DigError::Diverged(_) | DigError::NonFinite(_))) => {
                self.model = snapshot.0;
                self.adam = snapshot.1;
                Err(DigError::Diverged(format!("epoch {epoch}: {e}")))
            }
            Err(e) => Err(e),
        }
    }

    fn epoch_inner(&mut self) -> Result<LossBreakdown> {
        let cfg = self.model.config.clone();
        let data = self.data;
        resample_negatives(&mut self.retrieval, data.dataset.n_items(), &mut self.rng);
        let mut rank_order: Vec<usize> = (0..data.rank_train.len()).collect();
        rank_order.shuffle(&mut self.rng);
        let mut ret_order: Vec<usize> = (0..self.retrieval.len()).collect();
        ret_order.shuffle(&mut self.rng);
        let per_step = (cfg.retrieval_batch_size / (1 + cfg.neg_per_pos)).max(1);
        let retrieval = std::mem::take(&mut self.retrieval);
        let mut cursor = 0usize;
        let mut sum = LossBreakdown::default();
        let mut n = 0usize;
        let mut result = Ok(());
        for chunk in rank_order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let rank: Vec<&RankSample> = chunk.iter().map(|&i| &data.rank_train[i]).collect();
            let ret: Vec<&RetrievalSample> = (0..per_step)
                .map(|j| &retrieval[ret_order[(cursor + j) % ret_order.len()]])
                .collect();
            cursor = (cursor + per_step) % ret_order.len();
            match self.train_step(&rank, &ret) {
                Ok(b) => {
                    sum.accumulate(&b);
                    n += 1;
                }
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        self.retrieval = retrieval;
        result?;
        if !cfg.fixed_sid {
            self.model.retokenize()?;
        }
        Ok(sum.scaled(1.0 / n.max(1) as f64))
    }

    fn emit_epoch(&mut self, epoch: usize, loss: &LossBreakdown) -> Result<()> {
        let mut train = MetricEvent::new("epoch", epoch, "train")
            .with("loss_total", loss.total)
            .with("loss_rank", loss.rank)
            .with("loss_recall", loss.recall)
            .with("loss_commit", loss.commit)
            .with("loss_sem", loss.sem)
            .with("loss_u2t", loss.u2t)
            .with("steps", self.steps as f64)
            .with("restarts", self.restarts as f64);
        for (l, v) in loss.recall_by_depth.iter().enumerate() {
            train = train.with(&format!("loss_recall_l{}", l + 1), *v);
        }
        let table = self.model.sid_table()?;
        train = train.with("collision_rate", table.collision_rate());
        for (l, u) in table.utilization().iter().enumerate() {
            train = train.with(&format!("utilization_l{}", l + 1), *u);
        }
        log::info!("epoch {epoch}: loss {:.4} (rank {:.4}, recall {:.4})", loss.total, loss.rank, loss.recall);
        self.events.push(train);
        let val: Vec<&RankSample> = self.data.rank_val.iter().collect();
        if has_both_classes(&val) {
            let gap = recall_rank_gap(&self.model, &val)?;
            self.events.push(
                MetricEvent::new("epoch", epoch, "val")
                    .with("rank_auc", gap.rank_auc)
                    .with("recall_auc", gap.recall_auc)
                    .with("gap", gap.gap),
            );
        }
        Ok(())
    }

    /// Runs every configured epoch, then builds the statistical u2t table and
    /// appends the final test evaluation.
    pub fn run(&mut self) -> Result<()> {
        for epoch in 1..=self.model.config.epochs {
            self.train_epoch(epoch)?;
        }
        self.model.stat_table = Some(build_stat_table(&self.model, self.data)?);
        self.model.config.no_infer_mlp_u2t = self.stat_inference;
        let final_event = evaluate(&self.model, self.data, self.model.config.epochs)?;
        self.events.push(final_event);
        Ok(())
    }

    pub fn into_parts(self) -> (DigModel<T>, Vec<MetricEvent>) {
        (self.model, self.events)
    }
}

fn has_both_classes(samples: &[&RankSample]) -> bool {
    samples.iter().any(|s| s.label) && samples.iter().any(|s| !s.label)
}

/// Trains a model from scratch and returns it with its metric events.
pub fn train<T: Scalar>(config: TrainConfig, data: &TrainData) -> Result<(DigModel<T>, Vec<MetricEvent>)> {
    let mut t = Trainer::new(config, data)?;
    t.run()?;
    Ok(t.into_parts())
}

/// Per-prefix means of the teacher statistic over every training request,
/// keyed by the model's current SIDs.
pub fn build_stat_table<T: Scalar>(model: &DigModel<T>, data: &TrainData) -> Result<StatMeanTable<T>> {
    let cfg = &model.config;
    let mut table = StatMeanTable::new(cfg.depth, cfg.cross_dim);
    let mut frozen = model.clone();
    // teacher codes must be the stored SIDs
    frozen.config.fixed_sid = true;
    let per_step = (cfg.retrieval_batch_size / (1 + cfg.neg_per_pos)).max(1);
    let rank_chunks = data.rank_train.chunks(cfg.batch_size);
    let n_chunks = rank_chunks.len();
    let ret_chunks: Vec<&[RetrievalSample]> = data.retrieval_train.chunks(per_step).collect();
    for (c, chunk) in rank_chunks.enumerate() {
        let rank: Vec<&RankSample> = chunk.iter().collect();
        // spread retrieval chunks over the ranking chunks
        let lo = c * ret_chunks.len() / n_chunks;
        let hi = ((c + 1) * ret_chunks.len() / n_chunks).max(lo);
        let ret: Vec<&RetrievalSample> = ret_chunks[lo..hi].iter().flat_map(|s| s.iter()).collect();
        let batch = TrainingBatch::<T>::assemble(&rank, &ret, &data.index);
        let teacher = batch_teacher(&frozen, &frozen.store, &batch)?;
        for (codes, levels) in teacher.row_codes.iter().zip(&teacher.levels) {
            table.add_levels(codes, levels);
        }
    }
    Ok(table)
}

/// Test-split metrics: both AUCs and their gap, beam-search retrieval over the
/// first `eval_users` evaluation users, and codebook health.
pub fn evaluate<T: Scalar>(model: &DigModel<T>, data: &TrainData, epoch: usize) -> Result<MetricEvent> {
    let cfg = &model.config;
    let mut ev = MetricEvent::new("final", epoch, "test");
    let test: Vec<&RankSample> = data.rank_test.iter().collect();
    if has_both_classes(&test) {
        let gap = recall_rank_gap(model, &test)?;
        ev = ev.with("rank_auc", gap.rank_auc).with("recall_auc", gap.recall_auc).with("gap", gap.gap);
    }
    let index = build_index(&model.sid_table()?);
    let n = if cfg.eval_users == 0 {
        data.test_targets.len()
    } else {
        cfg.eval_users.min(data.test_targets.len())
    };
    if n > 0 {
        let beam = BeamConfig {
            width: cfg.beam_width,
            top_n: cfg.top_n,
            accumulate: cfg.accumulate_beam_scores,
        };
        let ks: Vec<usize> = RECALL_KS.iter().copied().filter(|&k| k <= cfg.top_n).collect();
        let m: BTreeMap<String, f64> = retrieval_metrics(model, &index, &data.test_targets[..n], beam, &ks)?;
        for (k, v) in m {
            ev = ev.with(&k, v);
        }
    }
    let cb = codebook_report(model)?;
    ev = ev.with("collision_rate", cb.collision_rate);
    for (l, (u, e)) in cb.utilization.iter().zip(&cb.reconstruction_error).enumerate() {
        ev = ev
            .with(&format!("utilization_l{}", l + 1), *u)
            .with(&format!("recon_error_l{}", l + 1), *e);
    }
    Ok(ev)
}
