//! One training run on the default synthetic world with the desk preset.
//!
//! `cargo run --release --example smoke -- <variant> <seed> ['{"dim": 32}']`
//!
//! With `DIAG` set, also prints the student's distillation error next to the
//! per-prefix mean table and the all-zero predictor on held-out batches.
use dig::data::{generate_synthetic, SyntheticWorldConfig};
use dig::trainer::{train, TrainConfig, TrainData, Variant};
use std::time::Instant;

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(Variant::Full);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let t0 = Instant::now();
    let world = generate_synthetic(&SyntheticWorldConfig { seed, ..Default::default() }).unwrap();
    let data = TrainData::prepare(world.dataset, 4, seed).unwrap();
    eprintln!("data {:?} rank_train {} ret {}", t0.elapsed(), data.rank_train.len(), data.retrieval_train.len());
    let base: TrainConfig = match args.get(3) {
        Some(j) => {
            let mut v = serde_json::to_value(TrainConfig::desk()).unwrap();
            let o: serde_json::Value = serde_json::from_str(j).unwrap();
            for (k, x) in o.as_object().unwrap() {
                assert!(v.get(k).is_some(), "unknown key {k}");
                v[k] = x.clone();
            }
            serde_json::from_value(v).unwrap()
        }
        None => TrainConfig::desk(),
    };
    let mut cfg = variant.apply(&base);
    cfg.seed = seed;
    let (m, ev) = train::<f32>(cfg, &data).unwrap();
    if std::env::var("DIAG").is_ok() {
        let table = dig::trainer::build_stat_table(&m, &data).unwrap();
        let mut frozen = m.clone();
        frozen.config.fixed_sid = true;
        let depth = m.config.depth;
        let (mut se_s, mut se_t, mut se_z, mut n) = (vec![0.0f64; depth], vec![0.0f64; depth], vec![0.0f64; depth], 0usize);
        for chunk in data.rank_test.chunks(256).take(20) {
            let rank: Vec<&dig::data::RankSample> = chunk.iter().collect();
            let batch = dig::trainer::TrainingBatch::<f32>::assemble(&rank, &[], &data.index);
            let teacher = dig::trainer::batch_teacher(&frozen, &frozen.store, &batch).unwrap();
            let users: Vec<_> = rank.iter().map(|s| &s.user).collect();
            let e_u = m.user_embeddings(&users);
            let codes: Vec<&[usize]> = teacher.row_codes.iter().map(Vec::as_slice).collect();
            for l in 1..=depth {
                let p = m.sid_emb.prefix_values(&m.store, &codes, l).unwrap();
                let pred = m.student.predict_values(&m.store, &e_u, &p, l).unwrap();
                for r in 0..codes.len() {
                    let t = &teacher.levels[r][l - 1];
                    let st = table.stats.level_mean_backoff(codes[r], l).unwrap_or_else(|| vec![0.0; t.len()]);
                    for j in 0..t.len() {
                        let d = (pred.get(r, j) - t[j]) as f64;
                        se_s[l - 1] += d * d;
                        let d = (st[j] - t[j]) as f64;
                        se_t[l - 1] += d * d;
                        se_z[l - 1] += (t[j] as f64).powi(2);
                    }
                }
            }
            n += codes.len();
        }
        for l in 0..depth {
            println!("level {} mse student {:.5} stat {:.5} zero {:.5}", l + 1, se_s[l] / n as f64, se_t[l] / n as f64, se_z[l] / n as f64);
        }
    }
    for e in &ev {
        if e.event == "final" {
            let m = &e.metrics;
            let g = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
            println!("{variant} seed {seed}: rank {:.4} recall {:.4} r@10 {:.4} r@100 {:.4} coll {:.3}", g("rank_auc"), g("recall_auc"), g("recall@10"), g("recall@100"), g("collision_rate"));
        }
    }
    eprintln!("total {:?}", t0.elapsed());
}
