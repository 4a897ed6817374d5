use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{DigError, Result};
use crate::ids::ItemId;
use crate::numerics::{normal_init, NodeId, ParamId, ParamRole, ParamStore, Scalar, Tape, Tensor2};

use super::{Codebook, ItemEncoder, ItemRecord};

const SID_HEADER: &str = "# dig-sid-table v1";

/// Semantic ID: one code per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sid(pub Vec<usize>);

impl Sid {
    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn prefix(&self, l: usize) -> &[usize] {
        &self.0[..l]
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Item → SID assignment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SidTable {
    pub depth: usize,
    pub k: usize,
    map: BTreeMap<ItemId, Sid>,
}

impl SidTable {
    pub fn new(depth: usize, k: usize) -> Self {
        Self {
            depth,
            k,
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, item: ItemId, sid: Sid) -> Result<()> {
        if sid.depth() != self.depth {
            return Err(DigError::shape("SidTable::insert", self.depth, sid.depth()));
        }
        if let Some((layer, &code)) = sid.0.iter().enumerate().find(|(_, &s)| s >= self.k) {
            return Err(DigError::CodeOutOfRange { layer, code, k: self.k });
        }
        self.map.insert(item, sid);
        Ok(())
    }

    pub fn get(&self, item: ItemId) -> Option<&Sid> {
        self.map.get(&item)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Entries in item-id order.
    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &Sid)> {
        self.map.iter().map(|(&i, s)| (i, s))
    }

    pub fn distinct(&self) -> usize {
        self.map.values().collect::<HashSet<_>>().len()
    }

    /// `1 − distinct SIDs / items`.
    pub fn collision_rate(&self) -> f64 {
        if self.map.is_empty() {
            return 0.0;
        }
        1.0 - self.distinct() as f64 / self.map.len() as f64
    }

    /// Fraction of the K codes in use at each layer.
    pub fn utilization(&self) -> Vec<f64> {
        let mut used = vec![vec![false; self.k]; self.depth];
        for sid in self.map.values() {
            for (l, &s) in sid.0.iter().enumerate() {
                used[l][s] = true;
            }
        }
        used.iter()
            .map(|u| u.iter().filter(|&&b| b).count() as f64 / self.k as f64)
            .collect()
    }

    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{SID_HEADER} depth={} k={}", self.depth, self.k)?;
        for (item, sid) in &self.map {
            writeln!(w, "{item}\t{sid}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_tsv(r: impl BufRead, origin: &str) -> Result<Self> {
        let corrupt = |reason: String| DigError::Corrupt {
            path: origin.to_string(),
            reason,
        };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| corrupt("empty file".into()))??;
        let rest = header
            .strip_prefix(SID_HEADER)
            .ok_or_else(|| corrupt(format!("bad header `{header}`")))?;
        let mut depth = None;
        let mut k = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("depth", v)) => depth = v.parse().ok(),
                Some(("k", v)) => k = v.parse().ok(),
                _ => {}
            }
        }
        let (depth, k) = depth.zip(k).ok_or_else(|| corrupt("header lacks depth/k".into()))?;
        let mut table = SidTable::new(depth, k);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (item, codes) = line
                .split_once('\t')
                .ok_or_else(|| corrupt(format!("line {}: missing tab", n + 2)))?;
            let item: u32 = item.parse().map_err(|_| corrupt(format!("line {}: bad item id", n + 2)))?;
            let codes = codes
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| corrupt(format!("line {}: bad code", n + 2)))?;
            table.insert(ItemId(item), Sid(codes))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DigError::MissingArtifact(path.to_path_buf()));
        }
        let f = std::fs::File::open(path)?;
        Self::read_tsv(std::io::BufReader::new(f), &path.display().to_string())
    }
}

/// Tokenizes a catalog against the current encoder and codebook.
pub fn tokenize_catalog<T: Scalar>(
    items: &[ItemRecord],
    enc: &ItemEncoder,
    cb: &Codebook<T>,
    store: &ParamStore<T>,
) -> Result<SidTable> {
    let refs: Vec<&ItemRecord> = items.iter().collect();
    let emb = enc.encode_values(store, &refs)?;
    let mut table = SidTable::new(cb.depth(), cb.k);
    for (i, rec) in items.iter().enumerate() {
        table.insert(rec.item_id, Sid(cb.assign(store, emb.row(i))))?;
    }
    Ok(table)
}

/// Learnable `L × K` token embeddings, summed along a code prefix.
///
/// Separate from [`Codebook`]: these rows are trained by gradient only and
/// play no part in SID assignment.
#[derive(Clone, Debug)]
pub struct SidEmbeddingTable {
    pub layers: Vec<ParamId>,
    pub k: usize,
    pub dim: usize,
}

impl SidEmbeddingTable {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        depth: usize,
        k: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| store.add(format!("sid_emb.layer{l}"), normal_init(k, dim, 0.1, rng), ParamRole::Trainable))
            .collect();
        Self { layers, k, dim }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn check(&self, codes: &[usize], l: usize) -> Result<()> {
        if l == 0 || l > self.depth() || codes.len() < l {
            return Err(DigError::InvalidInput(format!(
                "prefix depth {l} outside 1..={} for {} codes",
                self.depth(),
                codes.len()
            )));
        }
        if let Some((layer, &code)) = codes[..l].iter().enumerate().find(|(_, &s)| s >= self.k) {
            return Err(DigError::CodeOutOfRange { layer, code, k: self.k });
        }
        Ok(())
    }

    /// `Σ_{i≤l} e_sid[i, s_i]` for each row of `codes`, on the tape.
    pub fn prefix_embedding<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        codes: &[&[usize]],
        l: usize,
    ) -> Result<NodeId> {
        for c in codes {
            self.check(c, l)?;
        }
        let mut acc: Option<NodeId> = None;
        for i in 0..l {
            let g = tape.gather(store, self.layers[i], codes.iter().map(|c| c[i]).collect());
            acc = Some(match acc {
                Some(a) => tape.add(a, g),
                None => g,
            });
        }
        Ok(acc.expect("l ≥ 1"))
    }

    /// Gradient-free prefix sum for a single code sequence.
    pub fn prefix_value<T: Scalar>(&self, store: &ParamStore<T>, codes: &[usize], l: usize) -> Result<Vec<T>> {
        self.check(codes, l)?;
        let mut out = vec![T::zero(); self.dim];
        for (i, &s) in codes[..l].iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(store.value(self.layers[i]).row(s)) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Gradient-free prefix sums for a batch, as rows.
    pub fn prefix_values<T: Scalar>(&self, store: &ParamStore<T>, codes: &[&[usize]], l: usize) -> Result<Tensor2<T>> {
        let mut out = Tensor2::zeros(codes.len(), self.dim);
        for (r, c) in codes.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&self.prefix_value(store, c, l)?);
        }
        Ok(out)
    }
}

/// `sid_prefix_embedding` as a free function.
pub fn sid_prefix_embedding<T: Scalar>(codes: &[usize], tbl: &SidEmbeddingTable, store: &ParamStore<T>) -> Result<Vec<T>> {
    tbl.prefix_value(store, codes, codes.len())
}
