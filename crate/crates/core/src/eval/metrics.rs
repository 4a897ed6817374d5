use crate::error::{DigError, Result};

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DigError::shape("auc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DigError::NonFinite("auc scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DigError::InvalidInput("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Recall@K and NDCG@K with one held-out target per user.
pub fn recall_ndcg_at_k<I: PartialEq>(ranked: &[Vec<I>], targets: &[I], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(DigError::InvalidInput("K must be positive".into()));
    }
    if ranked.len() != targets.len() {
        return Err(DigError::shape("recall_ndcg_at_k", ranked.len(), targets.len()));
    }
    if ranked.is_empty() {
        return Err(DigError::InvalidInput("no users to evaluate".into()));
    }
    let (mut hits, mut gain) = (0.0, 0.0);
    for (list, target) in ranked.iter().zip(targets) {
        if let Some(p) = list.iter().take(k).position(|x| x == target) {
            hits += 1.0;
            gain += 1.0 / ((p + 2) as f64).log2();
        }
    }
    let n = ranked.len() as f64;
    Ok((hits / n, gain / n))
}
