//! Nearest-neighbor retrieval over episode-set embeddings, MRR and R@k.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 4] = [1, 2, 5, 10];
pub const CSV_HEADER: &str = "dataset,task,k,value,seed";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("no candidates to rank")]
    EmptyCandidates,
    #[error("embedding dimension {got} differs from query dimension {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no query has a same-author candidate")]
    NoValidQueries,
    #[error("{labels} labels for {rows} embeddings")]
    LabelCount { labels: usize, rows: usize },
    #[error("need at least two classes")]
    TooFewClasses,
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Measure {
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            _ => Err(format!("unknown measure {s:?} (cosine | euclidean)")),
        }
    }
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Euclidean => "euclidean",
        }
    }

    /// Higher is more similar: cosine similarity, or negated distance.
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
            Self::Euclidean => -euclidean(a, b),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One query's candidates, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: usize,
    pub query_author: usize,
    pub ranked: Vec<usize>,
    /// Author of each entry of `ranked`.
    pub ranked_authors: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankingResult {
    /// 1-based rank of the first same-author candidate.
    pub fn first_hit(&self) -> Option<usize> {
        self.ranked_authors.iter().position(|&a| a == self.query_author).map(|p| p + 1)
    }
}

/// Sorts candidate ids by score descending, ties by id ascending.
pub fn rank_by_similarity(query: &[f64], candidates: &[(usize, &[f64])], measure: Measure) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(RetrievalError::EmptyCandidates);
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for &(id, c) in candidates {
        if c.len() != query.len() {
            return Err(RetrievalError::DimensionMismatch {
                want: query.len(),
                got: c.len(),
            });
        }
        scored.push((id, measure.score(query, c)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Ranks every row against all other rows (leave-one-out), in parallel.
pub fn rank_all(embeddings: &Tensor, authors: &[usize], measure: Measure) -> Result<Vec<RankingResult>> {
    let n = embeddings.rows();
    if authors.len() != n {
        return Err(RetrievalError::LabelCount {
            labels: authors.len(),
            rows: n,
        });
    }
    if n < 2 {
        return Err(RetrievalError::EmptyCandidates);
    }
    (0..n)
        .into_par_iter()
        .map(|q| {
            let candidates: Vec<(usize, &[f64])> = (0..n).filter(|&i| i != q).map(|i| (i, embeddings.row(i))).collect();
            let ranked = rank_by_similarity(embeddings.row(q), &candidates, measure)?;
            Ok(RankingResult {
                query_id: q,
                query_author: authors[q],
                ranked_authors: ranked.iter().map(|&(i, _)| authors[i]).collect(),
                scores: ranked.iter().map(|&(_, s)| s).collect(),
                ranked: ranked.into_iter().map(|(i, _)| i).collect(),
            })
        })
        .collect()
}

fn hits(rankings: &[RankingResult]) -> Result<Vec<usize>> {
    let h: Vec<usize> = rankings.iter().filter_map(RankingResult::first_hit).collect();
    if h.is_empty() {
        return Err(RetrievalError::NoValidQueries);
    }
    Ok(h)
}

/// Fraction of queries with a same-author candidate in the top `k`. Queries
/// whose author has no other candidate are excluded.
pub fn recall_at_k(rankings: &[RankingResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let h = hits(rankings)?;
    Ok(h.iter().filter(|&&r| r <= k).count() as f64 / h.len() as f64)
}

pub fn mean_reciprocal_rank(rankings: &[RankingResult]) -> Result<f64> {
    let h = hits(rankings)?;
    Ok(h.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / h.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mrr: f64,
    pub recall: BTreeMap<usize, f64>,
    /// Queries that counted.
    pub queries: usize,
    /// Queries dropped for lacking a same-author candidate.
    pub excluded: usize,
}

impl MetricReport {
    pub fn from_rankings(rankings: &[RankingResult], ks: &[usize]) -> Result<Self> {
        let recall = ks.iter().map(|&k| Ok((k, recall_at_k(rankings, k)?))).collect::<Result<_>>()?;
        let queries = hits(rankings)?.len();
        Ok(Self {
            mrr: mean_reciprocal_rank(rankings)?,
            recall,
            queries,
            excluded: rankings.len() - queries,
        })
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// Rows of [`CSV_HEADER`], MRR first.
    pub fn csv_rows(&self, dataset: &str, task: &str, seed: u64) -> String {
        let mut out = format!("{dataset},{task},MRR,{},{seed}\n", self.mrr);
        for (k, v) in &self.recall {
            let _ = writeln!(out, "{dataset},{task},{k},{v},{seed}");
        }
        out
    }
}

/// MRR and R@k for `DEFAULT_KS` with leave-one-out retrieval.
pub fn evaluate(embeddings: &Tensor, authors: &[usize], measure: Measure) -> Result<MetricReport> {
    MetricReport::from_rankings(&rank_all(embeddings, authors, measure)?, &DEFAULT_KS)
}

/// Per-class means of `embeddings`, rows in ascending label order.
pub fn class_means(embeddings: &Tensor, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    if labels.len() != embeddings.rows() {
        return Err(RetrievalError::LabelCount {
            labels: labels.len(),
            rows: embeddings.rows(),
        });
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let e = sums.entry(y).or_insert_with(|| (vec![0.0; embeddings.cols()], 0));
        e.0.iter_mut().zip(embeddings.row(i)).for_each(|(s, x)| *s += x);
        e.1 += 1;
    }
    Ok(sums
        .into_values()
        .map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect())
        .collect())
}

/// Smallest angle in radians between any two class-mean embeddings.
pub fn min_class_mean_angle(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let means = class_means(embeddings, labels)?;
    if means.len() < 2 {
        return Err(RetrievalError::TooFewClasses);
    }
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let c = Measure::Cosine.score(&means[i], &means[j]).clamp(-1.0, 1.0);
            best = best.min(c.acos());
        }
    }
    Ok(best)
}
