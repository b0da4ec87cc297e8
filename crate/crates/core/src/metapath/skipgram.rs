use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{MetapathError, NodeType, Result, WalkCorpus};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial rate, decayed linearly towards zero over training.
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            window: 3,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipgramModel {
    /// Node embeddings, `|V| × d`.
    pub center: Tensor,
    pub context: Tensor,
    /// Mean negative-sampling loss per positive pair, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Negative sampler over nodes of one type, weighted by `count^0.75`.
struct TypeTable {
    nodes: Vec<usize>,
    dist: WeightedIndex<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn build_tables(corpus: &WalkCorpus) -> BTreeMap<NodeType, TypeTable> {
    let mut counts = vec![0usize; corpus.node_types.len()];
    for w in &corpus.walks {
        for &v in w {
            counts[v] += 1;
        }
    }
    let mut tables = BTreeMap::new();
    for kind in NodeType::ALL {
        let nodes: Vec<usize> = (0..counts.len())
            .filter(|&v| corpus.node_types[v] == kind && counts[v] > 0)
            .collect();
        if nodes.is_empty() {
            continue;
        }
        let weights: Vec<f64> = nodes.iter().map(|&v| (counts[v] as f64).powf(0.75)).collect();
        let dist = WeightedIndex::new(&weights).expect("positive counts");
        tables.insert(kind, TypeTable { nodes, dist });
    }
    tables
}

/// Heterogeneous skip-gram with negative sampling: for every (center,
/// context) pair within `window`, negatives come from the context's type.
pub fn train_skipgram(corpus: &WalkCorpus, cfg: &SkipgramConfig) -> Result<SkipgramModel> {
    if cfg.window == 0 || cfg.dim == 0 || !(cfg.lr > 0.0) {
        return Err(MetapathError::InvalidConfig(format!(
            "window {}, dim {}, lr {}",
            cfg.window, cfg.dim, cfg.lr
        )));
    }
    if corpus.walks.iter().all(|w| w.is_empty()) {
        return Err(MetapathError::EmptyCorpus);
    }
    let n = corpus.node_types.len();
    if let Some(&bad) = corpus.walks.iter().flatten().find(|&&v| v >= n) {
        return Err(MetapathError::UnknownNode(bad.to_string()));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / d as f64;
    let mut center: Vec<f64> = (0..n * d).map(|_| rng.random_range(-bound..bound)).collect();
    let mut context = vec![0.0; n * d];
    let tables = build_tables(corpus);

    let positions: usize = corpus.walks.iter().map(Vec::len).sum();
    let total = (cfg.epochs * positions).max(1) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut acc = vec![0.0; d];
    for _ in 0..cfg.epochs {
        let (mut loss, mut pairs) = (0.0, 0usize);
        for walk in &corpus.walks {
            for (i, &v) in walk.iter().enumerate() {
                let lr = cfg.lr * (1.0 - step as f64 / total).max(1e-4);
                step += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(walk.len() - 1);
                for (j, &c) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let table = &tables[&corpus.node_types[c]];
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let mut targets = Vec::with_capacity(cfg.negatives + 1);
                    targets.push((c, 1.0));
                    for _ in 0..cfg.negatives {
                        let neg = table.nodes[table.dist.sample(&mut rng)];
                        if neg != c {
                            targets.push((neg, 0.0));
                        }
                    }
                    let cv = &mut center[v * d..(v + 1) * d];
                    for (t, label) in targets {
                        let ct = &mut context[t * d..(t + 1) * d];
                        let dot: f64 = cv.iter().zip(ct.iter()).map(|(a, b)| a * b).sum();
                        loss -= if label == 1.0 { log_sigmoid(dot) } else { log_sigmoid(-dot) };
                        let g = lr * (label - sigmoid(dot));
                        for k in 0..d {
                            acc[k] += g * ct[k];
                            ct[k] += g * cv[k];
                        }
                    }
                    cv.iter_mut().zip(&acc).for_each(|(x, a)| *x += a);
                    pairs += 1;
                }
            }
        }
        epoch_losses.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }
    if center.iter().chain(&context).any(|x| !x.is_finite()) {
        return Err(MetapathError::InvalidConfig("training diverged".into()));
    }
    Ok(SkipgramModel {
        center: Tensor::matrix(n, d, center).expect("sized buffer"),
        context: Tensor::matrix(n, d, context).expect("sized buffer"),
        epoch_losses,
    })
}

/// Center embedding of a node index.
pub fn node_embedding(model: &SkipgramModel, node: usize) -> Result<Vec<f64>> {
    if node >= model.center.rows() {
        return Err(MetapathError::UnknownNode(node.to_string()));
    }
    Ok(model.center.row(node).to_vec())
}

/// Reads `id type v1 v2 …` lines written by [`super::write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<BTreeMap<(String, NodeType), Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| MetapathError::Parse { line: n + 1, reason };
        let mut cols = line.split_whitespace();
        let (Some(id), Some(kind)) = (cols.next(), cols.next()) else {
            return Err(err("expected `id type values…`".into()));
        };
        let kind: NodeType = kind.parse().map_err(err)?;
        let values = cols
            .map(|v| v.parse::<f64>().map_err(|e| err(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.insert((id.to_string(), kind), values);
    }
    Ok(out)
}
