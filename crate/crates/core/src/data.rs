//! Interaction logs, k-core filtering, leave-one-out splits, batching and a
//! synthetic generator with a planted second-order transition rule.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item id reserved for left padding.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

/// Raw interactions in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops exact `(user, item, timestamp)` repeats, keeping the first.
    pub fn dedup(&mut self) -> usize {
        let mut seen = HashSet::new();
        let before = self.records.len();
        self.records
            .retain(|r| seen.insert((r.user.clone(), r.item.clone(), r.timestamp)));
        before - self.records.len()
    }
}

/// Column names and tolerance for [`ingest_csv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvFormat {
    pub user_column: String,
    pub item_column: String,
    pub timestamp_column: String,
    /// Ingestion fails when more than this fraction of rows is malformed.
    pub max_malformed_fraction: f64,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self {
            user_column: "user_id".into(),
            item_column: "item_id".into(),
            timestamp_column: "timestamp".into(),
            max_malformed_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ingested {
    pub log: InteractionLog,
    pub malformed: usize,
    pub duplicates: usize,
}

pub fn ingest_csv(path: impl AsRef<Path>, format: &CsvFormat) -> Result<Ingested> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::data(format!("column `{name}` missing from {}", path.display())))
    };
    let (uc, ic, tc) = (
        column(&format.user_column)?,
        column(&format.item_column)?,
        column(&format.timestamp_column)?,
    );

    let mut log = InteractionLog::default();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for row in reader.records() {
        total += 1;
        let parsed = row.ok().and_then(|row| {
            let user = row.get(uc)?.trim();
            let item = row.get(ic)?.trim();
            let timestamp = row.get(tc)?.trim().parse::<u64>().ok()?;
            (!user.is_empty() && !item.is_empty()).then(|| Interaction {
                user: user.to_string(),
                item: item.to_string(),
                timestamp,
            })
        });
        match parsed {
            Some(r) => log.records.push(r),
            None => malformed += 1,
        }
    }
    if total == 0 {
        return Err(Error::data(format!("no records in {}", path.display())));
    }
    if malformed as f64 > format.max_malformed_fraction * total as f64 {
        return Err(Error::data(format!(
            "{malformed} of {total} rows malformed in {} (limit {:.2}%)",
            path.display(),
            format.max_malformed_fraction * 100.0
        )));
    }
    if malformed > 0 {
        warn!("skipped {malformed} malformed rows in {}", path.display());
    }
    if log.is_empty() {
        return Err(Error::data(format!("no records in {}", path.display())));
    }
    let duplicates = log.dedup();
    Ok(Ingested {
        log,
        malformed,
        duplicates,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreMode {
    #[default]
    UsersAndItems,
    UsersOnly,
}

/// The standard 5-core filter over users and items.
pub fn five_core_filter(log: &InteractionLog) -> Result<InteractionLog> {
    core_filter(log, 5, CoreMode::UsersAndItems)
}

/// Alternately drops users with fewer than `min` interactions and (in
/// [`CoreMode::UsersAndItems`]) items with fewer than `min` occurrences,
/// until neither step removes anything.
pub fn core_filter(log: &InteractionLog, min: usize, mode: CoreMode) -> Result<InteractionLog> {
    let mut records = log.records.clone();
    loop {
        let before = records.len();
        let mut users: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(r.user.as_str()).or_default() += 1;
        }
        let keep_users: HashSet<String> = users
            .into_iter()
            .filter(|&(_, c)| c >= min)
            .map(|(u, _)| u.to_string())
            .collect();
        records.retain(|r| keep_users.contains(&r.user));

        if mode == CoreMode::UsersAndItems {
            let mut items: HashMap<&str, usize> = HashMap::new();
            for r in &records {
                *items.entry(r.item.as_str()).or_default() += 1;
            }
            let keep_items: HashSet<String> = items
                .into_iter()
                .filter(|&(_, c)| c >= min)
                .map(|(i, _)| i.to_string())
                .collect();
            records.retain(|r| keep_items.contains(&r.item));
        }
        if records.len() == before {
            break;
        }
    }
    if records.is_empty() {
        return Err(Error::data(format!("{min}-core filtering removed every interaction")));
    }
    Ok(InteractionLog { records })
}

/// Per-user chronological item sequences with contiguous ids.
///
/// Item ids run `1..=num_items()`; `0` is padding. `items[i]` is the raw id
/// of item `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    pub max_len: usize,
}

impl SequenceDataset {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Groups a (filtered) log into per-user sequences sorted by timestamp, ties
/// kept in file order, each trimmed to its most recent `n + 2` items.
pub fn build_sequences(log: &InteractionLog, n: usize) -> Result<SequenceDataset> {
    if n < 2 {
        return Err(Error::config(format!("max sequence length must be >= 2, got {n}")));
    }
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut events: Vec<Vec<(u64, usize)>> = Vec::new();
    for r in &log.records {
        let u = *user_ids.entry(r.user.as_str()).or_insert_with(|| {
            users.push(r.user.clone());
            events.push(Vec::new());
            users.len() - 1
        });
        let i = *item_ids.entry(r.item.as_str()).or_insert_with(|| {
            items.push(r.item.clone());
            items.len()
        });
        events[u].push((r.timestamp, i));
    }
    let sequences = events
        .into_iter()
        .map(|mut ev| {
            ev.sort_by_key(|&(t, _)| t); // stable: ties stay in file order
            let skip = ev.len().saturating_sub(n + 2);
            ev.into_iter().skip(skip).map(|(_, i)| i).collect()
        })
        .collect();
    Ok(SequenceDataset {
        users,
        items,
        sequences,
        max_len: n,
    })
}

/// Leave-one-out split: last item for test, second-last for validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<String>,
    pub num_items: usize,
    pub max_len: usize,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.users.iter().position(|u| u == raw)
    }

    /// Chronological history preceding the held-out target.
    pub fn history(&self, user: usize, target: Target) -> Vec<usize> {
        let mut h = self.train[user].clone();
        if target == Target::Test {
            h.push(self.valid[user]);
        }
        h
    }

    pub fn target(&self, user: usize, target: Target) -> usize {
        match target {
            Target::Valid => self.valid[user],
            Target::Test => self.test[user],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Valid,
    Test,
}

/// Users with fewer than three items cannot be split and are dropped with a
/// warning; their raw ids are returned alongside the split.
pub fn leave_one_out_split(ds: &SequenceDataset) -> (SplitDataset, Vec<String>) {
    let mut split = SplitDataset {
        users: Vec::new(),
        num_items: ds.num_items(),
        max_len: ds.max_len,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let mut dropped = Vec::new();
    for (user, seq) in ds.users.iter().zip(&ds.sequences) {
        if seq.len() < 3 {
            warn!("user {user} has {} interactions; dropped from split", seq.len());
            dropped.push(user.clone());
            continue;
        }
        let m = seq.len();
        split.users.push(user.clone());
        split.train.push(seq[..m - 2].to_vec());
        split.valid.push(seq[m - 2]);
        split.test.push(seq[m - 1]);
    }
    (split, dropped)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub seq_len: usize,
    pub order2_strength: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub log: InteractionLog,
    /// `rule[i]` is the planted successor of item `i` two steps later.
    pub rule: Vec<usize>,
}

/// Sequences where, after the second position, the next item is
/// `rule[item two steps back]` with probability `order2_strength` and
/// uniform otherwise. Users are `u{k}`, items `i{k}`, timestamps positions.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    if !(0.0..=1.0).contains(&spec.order2_strength) {
        return Err(Error::config(format!(
            "order2_strength {} outside [0, 1]",
            spec.order2_strength
        )));
    }
    if spec.num_items < 20 {
        return Err(Error::config(format!(
            "synthetic data needs at least 20 items, got {}",
            spec.num_items
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rule: Vec<usize> = (0..spec.num_items).collect();
    rule.shuffle(&mut rng);

    let mut records = Vec::with_capacity(spec.num_users * spec.seq_len);
    for u in 0..spec.num_users {
        let mut seq: Vec<usize> = Vec::with_capacity(spec.seq_len);
        for t in 0..spec.seq_len {
            let planted = t >= 2 && rng.gen::<f64>() < spec.order2_strength;
            let item = if planted {
                rule[seq[t - 2]]
            } else {
                rng.gen_range(0..spec.num_items)
            };
            seq.push(item);
            records.push(Interaction {
                user: format!("u{u}"),
                item: format!("i{item}"),
                timestamp: t as u64,
            });
        }
    }
    Ok(Synthetic {
        log: InteractionLog { records },
        rule,
    })
}

/// Fraction of positions `t >= 2` whose item equals `rule[item at t - 2]`.
pub fn planted_rule_frequency(log: &InteractionLog, rule: &[usize]) -> f64 {
    let parse = |s: &str| s.strip_prefix('i').and_then(|d| d.parse::<usize>().ok());
    let mut per_user: HashMap<&str, Vec<(u64, usize)>> = HashMap::new();
    for r in &log.records {
        if let Some(i) = parse(&r.item) {
            per_user.entry(&r.user).or_default().push((r.timestamp, i));
        }
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for seq in per_user.values_mut() {
        seq.sort_by_key(|&(t, _)| t);
        for w in seq.windows(3) {
            total += 1;
            if rule.get(w[0].1) == Some(&w[2].1) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

impl DatasetStats {
    pub fn of(ds: &SequenceDataset) -> Self {
        let (users, items, interactions) = (ds.users.len(), ds.num_items(), ds.num_interactions());
        let cells = (users * items).max(1) as f64;
        Self {
            users,
            items,
            interactions,
            density: interactions as f64 / cells,
        }
    }
}

/// One training batch, every array row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub n: usize,
    pub num_negatives: usize,
    /// Split-level user indices.
    pub users: Vec<usize>,
    /// `[size × n]`, left padded with [`PAD`].
    pub inputs: Vec<usize>,
    /// `[size × n]` next-item targets.
    pub positives: Vec<usize>,
    /// `[size × n × num_negatives]`.
    pub negatives: Vec<usize>,
    /// `[size × n]`, true where the position contributes to the loss.
    pub mask: Vec<bool>,
}

/// Left-pads (or trims from the left) `items` to exactly `n` entries.
pub fn left_pad(items: &[usize], n: usize) -> Vec<usize> {
    let take = items.len().min(n);
    let mut out = vec![PAD; n - take];
    out.extend_from_slice(&items[items.len() - take..]);
    out
}

/// Shuffled stream of training batches. Owns its RNG, so a fixed seed gives
/// an identical stream.
pub struct BatchIter<'a> {
    split: &'a SplitDataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    num_negatives: usize,
    rng: ChaCha8Rng,
}

pub fn batch_iter(
    split: &SplitDataset,
    batch_size: usize,
    num_negatives: usize,
    seed: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    if split.num_items < 2 && num_negatives > 0 {
        return Err(Error::config("negative sampling needs at least 2 items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Users with a single training item have no (input, next) pair.
    let mut order: Vec<usize> = (0..split.num_users())
        .filter(|&u| split.train[u].len() >= 2)
        .collect();
    order.shuffle(&mut rng);
    Ok(BatchIter {
        split,
        order,
        pos: 0,
        batch_size,
        num_negatives,
        rng,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let users = self.order[self.pos..end].to_vec();
        self.pos = end;

        let n = self.split.max_len;
        let k = self.num_negatives;
        let v = self.split.num_items;
        let mut batch = Batch {
            size: users.len(),
            n,
            num_negatives: k,
            users: users.clone(),
            inputs: Vec::with_capacity(users.len() * n),
            positives: Vec::with_capacity(users.len() * n),
            negatives: Vec::with_capacity(users.len() * n * k),
            mask: Vec::with_capacity(users.len() * n),
        };
        for &u in &users {
            let seq = &self.split.train[u];
            let inputs = left_pad(&seq[..seq.len() - 1], n);
            let positives = left_pad(&seq[1..], n);
            for &p in &positives {
                batch.mask.push(p != PAD);
                for _ in 0..k {
                    let neg = if p == PAD {
                        PAD
                    } else {
                        loop {
                            let c = self.rng.gen_range(1..=v);
                            if c != p {
                                break c;
                            }
                        }
                    };
                    batch.negatives.push(neg);
                }
            }
            batch.inputs.extend(inputs);
            batch.positives.extend(positives);
        }
        Some(batch)
    }
}
