//! Plain CSV adapter: `items.csv`, `users.csv`, `log.csv` in one directory.
//!
//! Cardinalities are inferred as `max value + 1` per column. An empty cell in
//! `items.csv` means the item lacks that field.

use std::path::Path;

use crate::error::{DigError, Result};
use crate::ids::{ItemId, UserId};
use crate::tokenizer::ItemRecord;

use super::{Dataset, Interaction, UserProfile};

fn data_err(file: &str, e: impl std::fmt::Display) -> DigError {
    DigError::Data(format!("{file}: {e}"))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(DigError::MissingArtifact(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| data_err(&path.display().to_string(), e))
}

fn parse<V: std::str::FromStr>(file: &str, row: usize, cell: &str) -> Result<V> {
    cell.trim()
        .parse()
        .map_err(|_| data_err(file, format!("row {row}: cannot parse `{cell}`")))
}

fn grow(cards: &mut Vec<usize>, col: usize, v: usize) {
    if cards.len() <= col {
        cards.resize(col + 1, 0);
    }
    cards[col] = cards[col].max(v + 1);
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mut item_cards = Vec::new();
    let mut items = Vec::new();
    let mut r = reader(&dir.join("items.csv"))?;
    let n_fields = r.headers().map_err(|e| data_err("items.csv", e))?.len().saturating_sub(1);
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err("items.csv", e))?;
        let id: u32 = parse("items.csv", row, &rec[0])?;
        let mut feats = Vec::new();
        for f in 0..n_fields {
            let cell = rec.get(f + 1).unwrap_or("");
            if cell.trim().is_empty() {
                continue;
            }
            let v: usize = parse("items.csv", row, cell)?;
            grow(&mut item_cards, f, v);
            feats.push((f, v));
        }
        items.push(ItemRecord {
            item_id: ItemId(id),
            static_features: feats,
        });
    }
    item_cards.resize(n_fields, 1);

    let mut profile_cards = Vec::new();
    let mut users = Vec::new();
    let mut r = reader(&dir.join("users.csv"))?;
    let n_profile = r.headers().map_err(|e| data_err("users.csv", e))?.len().saturating_sub(1);
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err("users.csv", e))?;
        let id: u32 = parse("users.csv", row, &rec[0])?;
        let mut profile = Vec::with_capacity(n_profile);
        for f in 0..n_profile {
            let v: usize = parse("users.csv", row, rec.get(f + 1).unwrap_or(""))?;
            grow(&mut profile_cards, f, v);
            profile.push(v);
        }
        users.push(UserProfile {
            user_id: UserId(id),
            profile,
        });
    }
    profile_cards.resize(n_profile, 1);

    let mut context_cards = Vec::new();
    let mut log = Vec::new();
    let mut r = reader(&dir.join("log.csv"))?;
    let n_ctx = r.headers().map_err(|e| data_err("log.csv", e))?.len().saturating_sub(4);
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err("log.csv", e))?;
        let label: u8 = parse("log.csv", row, &rec[3])?;
        if label > 1 {
            return Err(data_err("log.csv", format!("row {row}: label must be 0 or 1")));
        }
        let mut context = Vec::with_capacity(n_ctx);
        for f in 0..n_ctx {
            let v: usize = parse("log.csv", row, rec.get(f + 4).unwrap_or(""))?;
            grow(&mut context_cards, f, v);
            context.push(v);
        }
        log.push(Interaction {
            user_id: UserId(parse("log.csv", row, &rec[0])?),
            item_id: ItemId(parse("log.csv", row, &rec[1])?),
            timestamp: parse("log.csv", row, &rec[2])?,
            seq: row as u64,
            label: label == 1,
            context,
        });
    }
    context_cards.resize(n_ctx, 1);
    Dataset::new(items, item_cards, users, profile_cards, context_cards, log)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let io = |e: csv::Error| DigError::Io(std::io::Error::other(e));

    let mut w = csv::Writer::from_path(dir.join("items.csv")).map_err(io)?;
    let mut head = vec!["item_id".to_string()];
    head.extend((1..=ds.item_cards.len()).map(|f| format!("field_{f}")));
    w.write_record(&head).map_err(io)?;
    for it in &ds.items {
        let mut row = vec![String::new(); ds.item_cards.len() + 1];
        row[0] = it.item_id.to_string();
        for &(f, v) in &it.static_features {
            row[f + 1] = v.to_string();
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("users.csv")).map_err(io)?;
    let mut head = vec!["user_id".to_string()];
    head.extend((1..=ds.profile_cards.len()).map(|f| format!("profile_{f}")));
    w.write_record(&head).map_err(io)?;
    for u in &ds.users {
        let mut row = vec![u.user_id.to_string()];
        row.extend(u.profile.iter().map(ToString::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("log.csv")).map_err(io)?;
    let mut head: Vec<String> = ["user_id", "item_id", "timestamp", "label"].iter().map(ToString::to_string).collect();
    head.extend((1..=ds.context_cards.len()).map(|f| format!("ctx_{f}")));
    w.write_record(&head).map_err(io)?;
    for ev in &ds.log {
        let mut row = vec![
            ev.user_id.to_string(),
            ev.item_id.to_string(),
            ev.timestamp.to_string(),
            u8::from(ev.label).to_string(),
        ];
        row.extend(ev.context.iter().map(ToString::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticWorldConfig};

    #[test]
    fn round_trip_through_csv() {
        let w = generate_synthetic(&SyntheticWorldConfig {
            n_users: 40,
            n_items: 30,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&w.dataset, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.items, w.dataset.items);
        assert_eq!(back.users, w.dataset.users);
        assert_eq!(back.log.len(), w.dataset.log.len());
        for (a, b) in back.log.iter().zip(&w.dataset.log) {
            assert_eq!((a.user_id, a.item_id, a.timestamp, a.label, &a.context), (b.user_id, b.item_id, b.timestamp, b.label, &b.context));
        }
    }

    #[test]
    fn missing_file_names_the_artifact() {
        let dir = tempfile::tempdir().unwrap();
        match read_dataset(dir.path()) {
            Err(DigError::MissingArtifact(p)) => assert!(p.ends_with("items.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
