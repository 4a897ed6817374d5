use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Scalar;

use super::run::{build_stat_table, evaluate, train, TrainData};
use super::{DigModel, TrainConfig, Variant};

/// Final test metrics of one arm for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

/// Paired comparison of the full model against one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub full: Vec<ArmResult>,
    pub arm: Vec<ArmResult>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn metric_median(arms: &[ArmResult], name: &str) -> f64 {
    let mut v: Vec<f64> = arms.iter().filter_map(|a| a.metrics.get(name).copied()).collect();
    median(&mut v)
}

impl AblationReport {
    pub fn median_full(&self, metric: &str) -> f64 {
        metric_median(&self.full, metric)
    }

    pub fn median_arm(&self, metric: &str) -> f64 {
        metric_median(&self.arm, metric)
    }

    /// Median over seeds of the paired difference `arm − full`.
    pub fn median_delta(&self, metric: &str) -> f64 {
        let mut d: Vec<f64> = self
            .full
            .iter()
            .zip(&self.arm)
            .filter_map(|(f, a)| Some(a.metrics.get(metric)? - f.metrics.get(metric)?))
            .collect();
        median(&mut d)
    }

    /// Plain-text table of medians and paired deltas for every shared metric.
    pub fn render(&self) -> String {
        let names: Vec<&String> = self
            .full
            .first()
            .map(|a| a.metrics.keys().filter(|k| self.arm.iter().all(|r| r.metrics.contains_key(*k))).collect())
            .unwrap_or_default();
        let width = names.iter().map(|n| n.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "ablation {} over seeds {:?}", self.variant, self.seeds);
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>10}", "metric", "full", self.variant.name(), "delta");
        for n in names {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.4}  {:>10.4}  {:>+10.4}",
                n,
                self.median_full(n),
                self.median_arm(n),
                self.median_delta(n)
            );
        }
        out
    }
}

/// A copy of a trained model with the inference-time switches of `variant`.
pub fn inference_view<T: Scalar>(model: &DigModel<T>, variant: Variant) -> DigModel<T> {
    let mut m = model.clone();
    m.config.no_infer_mlp_u2t = variant.apply(&m.config).no_infer_mlp_u2t;
    m
}

/// Trains (or reuses) the model behind `variant` for `seed` and evaluates it.
///
/// `trained` caches models by training arm so inference-only variants share
/// the training run of their parent arm.
pub fn run_arm<T: Scalar>(
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
    data: &TrainData,
    trained: &mut BTreeMap<(Variant, u64), DigModel<T>>,
) -> Result<ArmResult> {
    let parent = variant.training_arm();
    let model = match trained.entry((parent, seed)) {
        Entry::Occupied(e) => e.into_mut(),
        Entry::Vacant(e) => {
            let mut cfg = parent.apply(base);
            cfg.seed = seed;
            let (mut model, _) = train::<T>(cfg, data)?;
            if model.stat_table.is_none() {
                model.stat_table = Some(build_stat_table(&model, data)?);
            }
            e.insert(model)
        }
    };
    let model = inference_view(model, variant);
    let ev = evaluate(&model, data, model.config.epochs)?;
    Ok(ArmResult {
        variant,
        seed,
        metrics: ev.metrics,
    })
}

/// Runs the full model and `variant` on the same data for every seed.
pub fn ablation_run<T: Scalar>(base: &TrainConfig, variant: Variant, data: &TrainData, seeds: &[u64]) -> Result<AblationReport> {
    let mut cache = BTreeMap::new();
    let mut full = Vec::new();
    let mut arm = Vec::new();
    for &seed in seeds {
        full.push(run_arm::<T>(base, Variant::Full, seed, data, &mut cache)?);
        arm.push(run_arm::<T>(base, variant, seed, data, &mut cache)?);
        // keep memory bounded: a seed's models are not reused by later seeds
        cache.retain(|(_, s), _| *s != seed);
    }
    Ok(AblationReport {
        variant,
        seeds: seeds.to_vec(),
        full,
        arm,
    })
}
