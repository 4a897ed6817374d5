use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DigError;
use crate::numerics::AdamConfig;

/// Every knob of a training run. Defaults follow the full-scale setup; use
/// [`TrainConfig::desk`] for laptop-sized runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Quantization layers `L`.
    pub depth: usize,
    /// Codes per layer `K`.
    pub k: usize,
    /// Item / codebook / SID embedding width `d`.
    pub dim: usize,
    /// Cross-feature width `d_c`.
    pub cross_dim: usize,
    pub user_dim: usize,
    pub encoder_hidden: usize,
    pub mixer_hidden: Vec<usize>,
    pub u2t_hidden: usize,
    pub alpha: f64,
    pub lambda_commit: f64,
    pub lambda_sem: f64,
    pub lambda_u2t: f64,
    pub recall_loss_weight: f64,
    pub adam: AdamConfig,
    /// Ranking rows per step.
    pub batch_size: usize,
    /// Retrieval rows (positives plus negatives) per step.
    pub retrieval_batch_size: usize,
    pub epochs: usize,
    pub neg_per_pos: usize,
    pub beam_width: usize,
    pub top_n: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Pin code 0 of every layer to the zero vector.
    pub null_code: bool,
    pub dead_threshold: f64,
    pub dead_grace: u64,
    pub residual_pool: usize,
    pub fixed_sid: bool,
    pub no_train_u2i: bool,
    pub no_infer_mlp_u2t: bool,
    pub final_layer_only: bool,
    /// Sum logits across depths during beam search instead of using the
    /// depth-`l` logit alone.
    pub accumulate_beam_scores: bool,
    /// Users evaluated by beam search (0 = all).
    pub eval_users: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            k: 256,
            dim: 64,
            cross_dim: 6,
            user_dim: 64,
            encoder_hidden: 64,
            mixer_hidden: vec![64, 32],
            u2t_hidden: 64,
            alpha: 0.99,
            lambda_commit: 0.25,
            lambda_sem: 0.1,
            lambda_u2t: 0.1,
            recall_loss_weight: 1.0,
            adam: AdamConfig::default(),
            batch_size: 2048,
            retrieval_batch_size: 2048,
            epochs: 5,
            neg_per_pos: 4,
            beam_width: 32,
            top_n: 100,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            null_code: true,
            dead_threshold: 1e-3,
            dead_grace: 200,
            residual_pool: 2048,
            fixed_sid: false,
            no_train_u2i: false,
            no_infer_mlp_u2t: false,
            final_layer_only: false,
            accumulate_beam_scores: false,
            eval_users: 0,
            divergence_threshold: 1e3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small preset for a 10k-user / 2k-item synthetic world on one core.
    ///
    /// The quantization weights are scaled down: at this width the full-size
    /// values pull item embeddings onto the codebook and cost ranking accuracy.
    pub fn desk() -> Self {
        Self {
            depth: 3,
            k: 16,
            dim: 32,
            user_dim: 16,
            encoder_hidden: 64,
            lambda_commit: 0.0025,
            lambda_sem: 0.005,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            batch_size: 256,
            retrieval_batch_size: 256,
            epochs: 4,
            eval_users: 2000,
            ..Self::default()
        }
    }

    /// Layers at which the recall loss is applied (1-based).
    pub fn recall_depths(&self) -> Vec<usize> {
        if self.final_layer_only {
            vec![self.depth]
        } else {
            (1..=self.depth).collect()
        }
    }

    pub fn validate(&self) -> Result<(), DigError> {
        let bad = |m: &str| Err(DigError::InvalidInput(m.to_string()));
        if self.depth == 0 || self.k < 2 || self.dim == 0 || self.cross_dim == 0 || self.user_dim == 0 {
            return bad("depth, k, dim, cross_dim and user_dim must be positive (k ≥ 2)");
        }
        if self.batch_size < 2 || self.retrieval_batch_size < 2 {
            return bad("batch sizes must be at least 2 (batch norm)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.beam_width == 0 || self.top_n == 0 {
            return bad("beam width and top_n must be positive");
        }
        Ok(())
    }
}

/// Named comparison arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    FixedSid,
    NoTrainU2i,
    NoInferMlpU2t,
    NoBoth,
    FinalLayerOnly,
    RankOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::FixedSid,
        Variant::NoTrainU2i,
        Variant::NoInferMlpU2t,
        Variant::NoBoth,
        Variant::FinalLayerOnly,
        Variant::RankOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FixedSid => "fixed_sid",
            Variant::NoTrainU2i => "no_train_u2i",
            Variant::NoInferMlpU2t => "no_infer_mlp_u2t",
            Variant::NoBoth => "no_both",
            Variant::FinalLayerOnly => "final_layer_only",
            Variant::RankOnly => "rank_only",
        }
    }

    /// Copy of `base` with this arm's switches set.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::FixedSid => c.fixed_sid = true,
            Variant::NoTrainU2i => c.no_train_u2i = true,
            Variant::NoInferMlpU2t => c.no_infer_mlp_u2t = true,
            Variant::NoBoth => {
                c.no_train_u2i = true;
                c.no_infer_mlp_u2t = true;
            }
            Variant::FinalLayerOnly => c.final_layer_only = true,
            Variant::RankOnly => c.recall_loss_weight = 0.0,
        }
        c
    }

    /// Arms that differ from another arm only at inference time share its
    /// trained model.
    pub fn training_arm(self) -> Variant {
        match self {
            Variant::NoInferMlpU2t => Variant::Full,
            Variant::NoBoth => Variant::NoTrainU2i,
            v => v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DigError::UnknownVariant(s.to_string()))
    }
}
