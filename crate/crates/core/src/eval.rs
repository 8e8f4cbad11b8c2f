//! Leave-one-out ranking evaluation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::config::RankingMode;
use crate::data::{SplitDataset, Target};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Users scored per forward pass.
const EVAL_CHUNK: usize = 256;

/// Anything that can score every item after a history.
pub trait Scorer {
    fn num_items(&self) -> usize;

    /// One row per history, indexed by item id (`0..=num_items`, index 0 is
    /// ignored). Higher is better.
    fn score_batch(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

impl<S: Scalar> Scorer for Model<S> {
    fn num_items(&self) -> usize {
        Model::num_items(self)
    }

    fn score_batch(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let scores = self.score_next(histories)?;
        let w = scores.cols();
        Ok(scores.to_f64_vec().chunks(w).map(<[f64]>::to_vec).collect())
    }
}

/// Scores items by how often they occur in the training sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    counts: Vec<f64>,
}

impl Popularity {
    pub fn fit(split: &SplitDataset) -> Self {
        let mut counts = vec![0.0; split.num_items + 1];
        for seq in &split.train {
            for &i in seq {
                counts[i] += 1.0;
            }
        }
        Self { counts }
    }
}

impl Scorer for Popularity {
    fn num_items(&self) -> usize {
        self.counts.len() - 1
    }

    fn score_batch(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.counts.clone(); histories.len()])
    }
}

/// 1-based rank of `target` among `candidates`: one plus the number of
/// candidates scoring strictly higher, plus any other candidates tied with
/// it (ties count against the target).
pub fn rank_target(candidates: &[usize], scores: &[f64], target: usize) -> Result<usize> {
    if candidates.len() != scores.len() {
        return Err(Error::shape("rank_target", &[candidates.len()], &[scores.len()]));
    }
    let pos = candidates
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::contract(format!("target {target} is not a candidate")))?;
    let t = scores[pos];
    if t.is_nan() {
        return Err(Error::contract(format!("target {target} has a NaN score")));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != pos && s >= t)
        .count();
    Ok(1 + ahead)
}

/// `(recall@N, ndcg@N)` for single-target ranks.
pub fn metrics_at(ranks: &[usize], n: usize) -> Result<(f64, f64)> {
    if n < 1 {
        return Err(Error::config("top-N cutoff must be at least 1"));
    }
    if ranks.is_empty() {
        return Err(Error::contract("no ranks to aggregate"));
    }
    if ranks.contains(&0) {
        return Err(Error::contract("ranks are 1-based"));
    }
    let (mut hits, mut gain) = (0usize, 0.0);
    for &r in ranks {
        if r <= n {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let m = ranks.len() as f64;
    Ok((hits as f64 / m, gain / m))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopN {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: Target,
    pub ranking_mode: RankingMode,
    pub num_users_evaluated: usize,
    pub at: BTreeMap<usize, TopN>,
}

impl MetricsReport {
    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.at.get(&n).map(|m| m.ndcg)
    }

    pub fn recall(&self, n: usize) -> Option<f64> {
        self.at.get(&n).map(|m| m.recall)
    }
}

/// Candidate items for one user: every item not already in `history`
/// (full) or `k` of them drawn uniformly without replacement (sampled),
/// always including `target`.
fn candidates(
    num_items: usize,
    history: &[usize],
    target: usize,
    mode: RankingMode,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let seen: HashSet<usize> = history.iter().copied().collect();
    let mut pool: Vec<usize> = (1..=num_items)
        .filter(|i| *i != target && !seen.contains(i))
        .collect();
    if let RankingMode::Sampled(k) = mode {
        if pool.len() > k {
            let (chosen, _) = pool.partial_shuffle(rng, k);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            pool = chosen;
        }
    }
    pool.push(target);
    pool
}

/// Ranks every user's held-out `target` item and aggregates Recall/NDCG at
/// each cutoff in `ns`. `seed` drives negative sampling in sampled mode.
pub fn evaluate(
    scorer: &dyn Scorer,
    split: &SplitDataset,
    target: Target,
    ns: &[usize],
    mode: RankingMode,
    seed: u64,
) -> Result<MetricsReport> {
    if ns.is_empty() {
        return Err(Error::config("at least one top-N cutoff is required"));
    }
    if scorer.num_items() != split.num_items {
        return Err(Error::contract(format!(
            "scorer knows {} items, dataset has {}",
            scorer.num_items(),
            split.num_items
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users: Vec<usize> = (0..split.num_users()).collect();
    let mut ranks = Vec::with_capacity(users.len());
    for chunk in users.chunks(EVAL_CHUNK) {
        let histories: Vec<Vec<usize>> = chunk.iter().map(|&u| split.history(u, target)).collect();
        let refs: Vec<&[usize]> = histories.iter().map(Vec::as_slice).collect();
        let scores = scorer.score_batch(&refs)?;
        for ((&u, h), row) in chunk.iter().zip(&histories).zip(&scores) {
            let t = split.target(u, target);
            let cands = candidates(split.num_items, h, t, mode, &mut rng);
            let s: Vec<f64> = cands.iter().map(|&c| row[c]).collect();
            ranks.push(rank_target(&cands, &s, t)?);
        }
    }
    let mut at = BTreeMap::new();
    for &n in ns {
        let (recall, ndcg) = metrics_at(&ranks, n)?;
        at.insert(n, TopN { recall, ndcg });
    }
    Ok(MetricsReport {
        target,
        ranking_mode: mode,
        num_users_evaluated: ranks.len(),
        at,
    })
}

/// Fixed-width Recall@N / NDCG@N table, one row per named report.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let ns: Vec<usize> = rows
        .iter()
        .flat_map(|(_, r)| r.at.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:width$}", "model");
    for n in &ns {
        let _ = write!(out, " {:>9}", format!("Re@{n}"));
    }
    for n in &ns {
        let _ = write!(out, " {:>9}", format!("Nd@{n}"));
    }
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{name:width$}");
        for n in &ns {
            match r.recall(*n) {
                Some(v) => write!(out, " {v:>9.4}"),
                None => write!(out, " {:>9}", "-"),
            }
            .unwrap();
        }
        for n in &ns {
            match r.ndcg(*n) {
                Some(v) => write!(out, " {v:>9.4}"),
                None => write!(out, " {:>9}", "-"),
            }
            .unwrap();
        }
        out.push('\n');
    }
    out
}
