//! Metrics, checkpoint diagnostics and metric-log rendering.

mod metrics;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::RankSample;
use crate::error::Result;
use crate::mixer::UserFeatures;
use crate::numerics::Scalar;
use crate::retrieval::{beam_search, BeamConfig, InvertedIndex};
use crate::trainer::DigModel;

pub use metrics::{auc, recall_ndcg_at_k};
pub use report::{load_events, read_events, render_csv, render_table, write_events, MetricEvent, MetricReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rank_auc: f64,
    pub recall_auc: f64,
    /// `recall_auc − rank_auc`.
    pub gap: f64,
}

/// Rank-path AUC with true cross features against full-depth recall-path AUC
/// with serving-time u2t, over the same labeled pairs.
pub fn recall_rank_gap<T: Scalar>(model: &DigModel<T>, samples: &[&RankSample]) -> Result<GapReport> {
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let rank: Vec<f64> = model.rank_logits(samples)?.into_iter().map(Scalar::as_f64).collect();
    let recall: Vec<f64> = model
        .recall_logits(samples, model.depth())?
        .into_iter()
        .map(Scalar::as_f64)
        .collect();
    let rank_auc = auc(&rank, &labels)?;
    let recall_auc = auc(&recall, &labels)?;
    Ok(GapReport {
        rank_auc,
        recall_auc,
        gap: recall_auc - rank_auc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    /// Fraction of codes in use per layer.
    pub utilization: Vec<f64>,
    pub collision_rate: f64,
    /// Mean `‖r_l‖²` over the catalog per layer.
    pub reconstruction_error: Vec<f64>,
}

pub fn codebook_report<T: Scalar>(model: &DigModel<T>) -> Result<CodebookReport> {
    let emb = model.encode_catalog(&model.store)?;
    let depth = model.depth();
    let mut err = vec![0.0; depth];
    for r in 0..emb.rows() {
        let trace = model.codebook.quantize(&model.store, emb.row(r));
        for (e, v) in err.iter_mut().zip(trace.layer_errors()) {
            *e += v.as_f64();
        }
    }
    let n = emb.rows().max(1) as f64;
    err.iter_mut().for_each(|e| *e /= n);
    let table = model.sid_table()?;
    Ok(CodebookReport {
        utilization: model.codebook.utilization(model.sids.iter().map(Vec::as_slice)),
        collision_rate: table.collision_rate(),
        reconstruction_error: err,
    })
}

/// A held-out positive to be recovered by retrieval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTarget {
    pub user: UserFeatures,
    pub item: usize,
    pub timestamp: u64,
}

/// Recall@K and NDCG@K of beam-search candidate lists, plus the fraction of
/// searches that came back short.
pub fn retrieval_metrics<T: Scalar>(
    model: &DigModel<T>,
    index: &InvertedIndex,
    targets: &[RetrievalTarget],
    beam: BeamConfig,
    ks: &[usize],
) -> Result<BTreeMap<String, f64>> {
    let mut ranked = Vec::with_capacity(targets.len());
    let mut wanted = Vec::with_capacity(targets.len());
    let mut short = 0usize;
    for t in targets {
        let res = beam_search(model, &t.user, index, beam)?;
        short += usize::from(res.short_supply);
        ranked.push(res.candidates.into_iter().map(|c| c.item_id).collect::<Vec<_>>());
        wanted.push(model.items[t.item].item_id);
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let (r, n) = recall_ndcg_at_k(&ranked, &wanted, k)?;
        out.insert(format!("recall@{k}"), r);
        out.insert(format!("ndcg@{k}"), n);
    }
    out.insert("short_supply_rate".into(), short as f64 / targets.len().max(1) as f64);
    Ok(out)
}
