use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use dig::data::{generate_synthetic, read_dataset, write_dataset, SyntheticWorldConfig};
use dig::eval::{load_events, render_csv, render_table, MetricReport};
use dig::retrieval::{beam_search, build_index, rank_candidates, BeamConfig};
use dig::trainer::{
    ablation_run, evaluate, load_checkpoint, read_checkpoint_config, save_checkpoint, train, TrainConfig, TrainData, Variant,
    METRICS_FILE, SID_FILE,
};
use dig::{DigError, Model};

const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser, Debug)]
#[command(name = "dig", version, about = "Train and query a jointly tokenized ranking and retrieval model")]
struct Cli {
    /// JSON file with training options; missing keys come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Base hyperparameters before `--config` is applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Desk,
    Large,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Generate {
        #[arg(long, default_value_t = 10_000)]
        users: usize,
        #[arg(long, default_value_t = 2_000)]
        items: usize,
    },
    /// Train a model and write its checkpoint and metrics.jsonl.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Re-tokenize the catalog with a checkpoint's codebook (fixed-SID checkpoints keep their codes).
    Tokenize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Beam search for held-out users; one JSON line per user.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        users: usize,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Compare the full model against a named variant over several seeds.
    Ablate {
        variant: Variant,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Render a metrics.jsonl file as a table.
    Report {
        metrics: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn train_config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let base = match cli.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Large => TrainConfig::default(),
    };
    let mut v = serde_json::to_value(base)?;
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(DigError::MissingArtifact(path.clone()).into());
        }
        let text = fs::read_to_string(path)?;
        let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut v, &over);
    }
    let mut cfg: TrainConfig = serde_json::from_value(v).context("invalid training config")?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, fallback: Option<&Path>) -> anyhow::Result<PathBuf> {
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| fallback.map(Path::to_path_buf))
        .context("--out-dir is required for this command")?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(dir: &Path, command: &str, body: Value) -> anyhow::Result<()> {
    let mut v = json!({ "command": command });
    merge(&mut v, &body);
    write_json(&dir.join(RESOLVED_CONFIG), &v)
}

fn load_data(dir: &Path, cfg: &TrainConfig) -> anyhow::Result<TrainData> {
    let ds = read_dataset(dir)?;
    Ok(TrainData::prepare(ds, cfg.neg_per_pos, cfg.seed)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate { users, items } => {
            let dir = out_dir(&cli, None)?;
            let cfg = SyntheticWorldConfig {
                n_users: *users,
                n_items: *items,
                seed: cli.seed.unwrap_or(0),
                ..SyntheticWorldConfig::default()
            };
            let world = generate_synthetic(&cfg)?;
            write_dataset(&world.dataset, &dir)?;
            write_resolved(&dir, "generate", json!({ "synthetic": cfg }))?;
            log::info!("wrote {} events to {}", world.dataset.log.len(), dir.display());
        }
        Command::Train { data, variant } => {
            let dir = out_dir(&cli, None)?;
            let cfg = variant.apply(&train_config(&cli)?);
            let td = load_data(data, &cfg)?;
            write_resolved(&dir, "train", json!({ "data": data, "variant": variant, "train": cfg }))?;
            let (model, events) = train::<f64>(cfg, &td)?;
            save_checkpoint(&model, &dir, Some(&events))?;
            if let Some(last) = events.last() {
                print!("{}", render_table(std::slice::from_ref(last)));
            }
        }
        Command::Tokenize { checkpoint, data } => {
            let ds = read_dataset(data)?;
            let mut model: Model = load_checkpoint(checkpoint, &ds)?;
            // fixed-SID checkpoints keep the codes assigned at initialisation
            if !model.config.fixed_sid {
                model.retokenize()?;
            }
            let dir = out_dir(&cli, Some(checkpoint))?;
            let table = model.sid_table()?;
            table.save(&dir.join(SID_FILE))?;
            let index = build_index(&table);
            let mut w = std::io::BufWriter::new(fs::File::create(dir.join("inverted_index.tsv"))?);
            writeln!(w, "sid\titems")?;
            for (sid, items) in &index.lists {
                let s: Vec<String> = sid.iter().map(usize::to_string).collect();
                let i: Vec<String> = items.iter().map(|id| id.0.to_string()).collect();
                writeln!(w, "{}\t{}", s.join(","), i.join(","))?;
            }
            w.flush()?;
            write_resolved(&dir, "tokenize", json!({ "checkpoint": checkpoint, "data": data }))?;
            println!(
                "{} items, {} distinct SIDs, collision rate {:.4}",
                table.len(),
                table.distinct(),
                table.collision_rate()
            );
        }
        Command::Eval { checkpoint, data } => {
            let ck = read_checkpoint_config(checkpoint)?;
            let td = load_data(data, &ck.train)?;
            let model: Model = load_checkpoint(checkpoint, &td.dataset)?;
            let mut model = model;
            if model.config.no_infer_mlp_u2t {
                model.stat_table = Some(dig::trainer::build_stat_table(&model, &td)?);
            }
            let ev = evaluate(&model, &td, model.config.epochs)?;
            let report = MetricReport {
                checkpoint: checkpoint.display().to_string(),
                split: "test".into(),
                seed: model.config.seed,
                timestamp: None,
                metrics: ev.metrics.clone(),
            };
            report.validate()?;
            let dir = out_dir(&cli, Some(checkpoint))?;
            write_json(&dir.join("eval.json"), &report)?;
            write_resolved(&dir, "eval", json!({ "checkpoint": checkpoint, "data": data }))?;
            print!("{}", render_table(&[ev]));
        }
        Command::Search {
            checkpoint,
            data,
            users,
            beam_width,
            top_n,
        } => {
            let ck = read_checkpoint_config(checkpoint)?;
            let td = load_data(data, &ck.train)?;
            let mut model: Model = load_checkpoint(checkpoint, &td.dataset)?;
            if model.config.no_infer_mlp_u2t {
                model.stat_table = Some(dig::trainer::build_stat_table(&model, &td)?);
            }
            let beam = BeamConfig {
                width: beam_width.unwrap_or(model.config.beam_width),
                top_n: top_n.unwrap_or(model.config.top_n),
                accumulate: model.config.accumulate_beam_scores,
            };
            let index = build_index(&model.sid_table()?);
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for t in td.test_targets.iter().take(*users) {
                let res = beam_search(&model, &t.user, &index, beam)?;
                let ids: Vec<_> = res.candidates.iter().map(|c| c.item_id).collect();
                let ranked = if ids.is_empty() {
                    Vec::new()
                } else {
                    rank_candidates(&model, &t.user, &ids, |i| td.index.features(t.user.user_id, i, t.timestamp))?
                };
                let rank_of: std::collections::HashMap<_, _> = ranked.iter().map(|r| (r.item_id, r.rank_score)).collect();
                let candidates: Vec<Value> = res
                    .candidates
                    .iter()
                    .map(|c| json!({ "item_id": c.item_id, "beam_score": c.beam_score, "rank_score": rank_of.get(&c.item_id) }))
                    .collect();
                let line = json!({
                    "user_id": t.user.user_id,
                    "candidates": candidates,
                    "beam_width": beam.width,
                    "depth_trace": res.depth_trace,
                });
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
            }
            if let Some(dir) = &cli.out_dir {
                fs::create_dir_all(dir)?;
                write_resolved(dir, "search", json!({ "checkpoint": checkpoint, "data": data, "beam": beam, "users": users }))?;
            }
        }
        Command::Ablate { variant, data, seeds } => {
            if *variant == Variant::Full {
                bail!(DigError::InvalidInput("ablate needs a variant other than full".into()));
            }
            let dir = out_dir(&cli, None)?;
            let cfg = train_config(&cli)?;
            let td = load_data(data, &cfg)?;
            write_resolved(&dir, "ablate", json!({ "data": data, "variant": variant, "seeds": seeds, "train": cfg }))?;
            let report = ablation_run::<f64>(&cfg, *variant, &td, seeds)?;
            write_json(&dir.join("ablation.json"), &report)?;
            let text = report.render();
            fs::write(dir.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Report { metrics, csv } => {
            let path = if metrics.is_dir() { metrics.join(METRICS_FILE) } else { metrics.clone() };
            let events = load_events(&path)?;
            print!("{}", render_table(&events));
            if let Some(p) = csv {
                fs::write(p, render_csv(&events)?)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DigError>() {
        Some(DigError::Diverged(_) | DigError::NonFinite(_)) => 4,
        Some(
            DigError::Data(_)
            | DigError::MissingArtifact(_)
            | DigError::Corrupt { .. }
            | DigError::Io(_)
            | DigError::Json(_),
        ) => 3,
        Some(DigError::UnknownVariant(_) | DigError::InvalidInput(_)) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<serde_json::Error>().is_some() || err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
