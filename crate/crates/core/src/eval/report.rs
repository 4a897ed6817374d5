use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub event: String,
    pub epoch: usize,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricEvent {
    pub fn new(event: &str, epoch: usize, split: &str) -> Self {
        Self {
            event: event.to_string(),
            epoch,
            split: split.to_string(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn write_events(events: &[MetricEvent], mut w: impl Write) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events(r: impl BufRead) -> Result<Vec<MetricEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_events(path: &Path) -> Result<Vec<MetricEvent>> {
    if !path.exists() {
        return Err(DigError::MissingArtifact(path.to_path_buf()));
    }
    read_events(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Named scalar metrics with run metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub checkpoint: String,
    pub split: String,
    pub seed: u64,
    pub timestamp: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Every metric finite; AUC-, recall- and NDCG-named metrics in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.metrics {
            if !v.is_finite() {
                return Err(DigError::NonFinite(format!("metric {k}")));
            }
            let bounded = k.ends_with("auc") || k.starts_with("recall@") || k.starts_with("ndcg@");
            if bounded && !(0.0..=1.0).contains(&v) {
                return Err(DigError::InvalidInput(format!("metric {k} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn fmt_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Aligned plain-text table: one row per event, one column per metric name.
pub fn render_table(events: &[MetricEvent]) -> String {
    let names: Vec<String> = events
        .iter()
        .flat_map(|e| e.metrics.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = vec!["event".to_string(), "epoch".into(), "split".into()];
    header.extend(names.iter().cloned());
    let rows: Vec<Vec<String>> = events
        .iter()
        .map(|e| {
            let mut r = vec![e.event.clone(), e.epoch.to_string(), e.split.clone()];
            r.extend(names.iter().map(|n| e.get(n).map_or("-".into(), fmt_value)));
            r
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// Same content as [`render_table`] in CSV.
pub fn render_csv(events: &[MetricEvent]) -> Result<String> {
    let names: Vec<String> = events
        .iter()
        .flat_map(|e| e.metrics.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["event".to_string(), "epoch".into(), "split".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| DigError::Data(e.to_string()))?;
    for e in events {
        let mut r = vec![e.event.clone(), e.epoch.to_string(), e.split.clone()];
        r.extend(names.iter().map(|n| e.get(n).map_or(String::new(), |v| v.to_string())));
        w.write_record(&r).map_err(|e| DigError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| DigError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| DigError::Data(e.to_string()))
}
