//! Metric-learning objectives over a batch of embeddings.
//!
//! Every loss is built on a [`Tape`] so it can be differentiated back into
//! the encoder. The negative block term works on per-class batch means
//! rather than on individual samples: with `C′` the classes present in the
//! batch and `μ̂_c` their mean embeddings,
//!
//! ```text
//! l_neg = (1/|C′|) · log Σ_{a≠b ∈ C′} exp(sim(μ̂_a, μ̂_b) · τ)
//! l     = α · l_sce + (1 − α) · l_neg
//! ```
//!
//! Ordered pairs are counted, so each unordered pair contributes twice.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{embeddings} embeddings but {labels} labels")]
    LabelCount { embeddings: usize, labels: usize },
    #[error("no active classes in batch")]
    NoActiveClasses,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// When class means for the negative term are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSchedule {
    #[default]
    Batch,
    Epoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSimilarityParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for MultiSimilarityParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Multiplies the similarity inside the exponential.
    pub tau: f64,
    /// Weight of the softmax term; `1 − alpha` goes to the negative term.
    pub alpha: f64,
    pub similarity: Similarity,
    pub schedule: NegativeSchedule,
    pub multisim: MultiSimilarityParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::singletask()
    }
}

impl LossConfig {
    pub fn singletask() -> Self {
        Self {
            tau: 0.2,
            alpha: 0.5,
            similarity: Similarity::Cosine,
            schedule: NegativeSchedule::Batch,
            multisim: MultiSimilarityParams::default(),
        }
    }

    pub fn multitask() -> Self {
        Self {
            tau: 0.3,
            ..Self::singletask()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        let ms = &self.multisim;
        if ms.alpha <= 0.0 || ms.beta <= 0.0 {
            return Err(LossError::InvalidConfig("multisimilarity alpha/beta must be positive".into()));
        }
        Ok(())
    }
}

/// Final fully connected layer: one weight row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Tensor,
    /// Logit scale for the normalized (margin) variants.
    pub scale: f64,
    /// Additive cosine margin (CosFace) or angular margin (ArcFace).
    pub margin: f64,
}

impl ClassifierHead {
    pub fn new(weights: Tensor, scale: f64, margin: f64) -> Result<Self> {
        let (c, e) = weights.dims2();
        if weights.shape().len() != 2 || c < 2 || e < 1 {
            return Err(LossError::InvalidConfig(format!(
                "classifier needs at least 2 classes and 1 dimension, got {:?}",
                weights.shape()
            )));
        }
        if !(scale > 0.0) {
            return Err(LossError::InvalidConfig(format!("scale must be positive, got {scale}")));
        }
        if margin < 0.0 {
            return Err(LossError::InvalidConfig(format!("margin must be non-negative, got {margin}")));
        }
        Ok(Self {
            weights,
            scale,
            margin,
        })
    }

    /// Xavier-uniform weights.
    pub fn random<R: Rng>(classes: usize, dim: usize, scale: f64, margin: f64, rng: &mut R) -> Result<Self> {
        Self::new(Tensor::xavier(classes, dim, rng), scale, margin)
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Per-batch class means `μ̂_c` over the active classes `C′`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchClassStats {
    pub mu_hat: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
}

impl BatchClassStats {
    /// Active classes in ascending order.
    pub fn active(&self) -> Vec<usize> {
        self.mu_hat.keys().copied().collect()
    }

    pub fn means_matrix(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.mu_hat.values().cloned().collect();
        if rows.is_empty() {
            return Err(LossError::NoActiveClasses);
        }
        Ok(Tensor::from_rows(&rows)?)
    }
}

fn check_batch(rows: usize, labels: &[usize]) -> Result<()> {
    if labels.is_empty() || rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    if rows != labels.len() {
        return Err(LossError::LabelCount {
            embeddings: rows,
            labels: labels.len(),
        });
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

pub fn class_means(embeddings: &Tensor, labels: &[usize]) -> Result<BatchClassStats> {
    let (b, e) = embeddings.dims2();
    check_batch(b, labels)?;
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let acc = sums.entry(y).or_insert_with(|| vec![0.0; e]);
        for (a, v) in acc.iter_mut().zip(embeddings.row(i)) {
            *a += v;
        }
        *counts.entry(y).or_default() += 1;
    }
    for (c, acc) in sums.iter_mut() {
        let n = counts[c] as f64;
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Ok(BatchClassStats {
        mu_hat: sums,
        counts,
    })
}

/// `−(1/b) Σ log softmax(W·fᵢ)[yᵢ]`.
pub fn softmax_cross_entropy(t: &mut Tape, z: Var, labels: &[usize], weights: Var) -> Result<Var> {
    check_batch(t.value(z).rows(), labels)?;
    check_labels(labels, t.value(weights).rows())?;
    let logits = t.matmul_bt(z, weights)?;
    cross_entropy_from_logits(t, logits, labels)
}

fn cross_entropy_from_logits(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = t.log_softmax_rows(logits)?;
    let picked = t.pick_per_row(ls, labels)?;
    let mean = t.mean(picked)?;
    Ok(t.scale(mean, -1.0)?)
}

/// Differentiable class means: a `|C′| × E` matrix (rows in ascending class
/// order) and the class ids.
pub fn class_mean_block(t: &mut Tape, z: Var, labels: &[usize]) -> Result<(Var, Vec<usize>)> {
    let b = t.value(z).rows();
    check_batch(b, labels)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    let classes: Vec<usize> = counts.keys().copied().collect();
    let row_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let mut avg = vec![0.0; classes.len() * b];
    for (i, &y) in labels.iter().enumerate() {
        avg[row_of[&y] * b + i] = 1.0 / counts[&y] as f64;
    }
    let m = t.constant(Tensor::matrix(classes.len(), b, avg)?);
    Ok((t.matmul(m, z)?, classes))
}

#[derive(Debug, Clone, Copy)]
pub struct NegativeTerm {
    pub loss: Var,
    /// Pairwise similarity evaluations performed: `|C′|²`.
    pub similarity_evaluations: usize,
}

/// Negative block term over a `|C′| × E` matrix of class means.
///
/// A single active class has no pairs; the term is then the constant 0.
pub fn negative_block_term(t: &mut Tape, means: Var, cfg: &LossConfig) -> Result<NegativeTerm> {
    cfg.validate()?;
    let k = t.value(means).rows();
    if k == 0 {
        return Err(LossError::NoActiveClasses);
    }
    if k == 1 {
        return Ok(NegativeTerm {
            loss: t.constant(Tensor::scalar(0.0)),
            similarity_evaluations: 0,
        });
    }
    let sim = match cfg.similarity {
        Similarity::Cosine => t.cosine_similarity(means, means)?,
        Similarity::Dot => t.matmul_bt(means, means)?,
    };
    let evaluations = t.value(sim).len();
    let scaled = t.scale(sim, cfg.tau)?;
    let off_diagonal: Vec<bool> = (0..k * k).map(|i| i / k != i % k).collect();
    let lse = t.masked_logsumexp(scaled, &off_diagonal)?;
    Ok(NegativeTerm {
        loss: t.scale(lse, 1.0 / k as f64)?,
        similarity_evaluations: evaluations,
    })
}

/// Negative block term from precomputed statistics, as a plain number.
pub fn nbc_negative_term(stats: &BatchClassStats, cfg: &LossConfig) -> Result<f64> {
    let mut t = Tape::new();
    let means = t.constant(stats.means_matrix()?);
    let term = negative_block_term(&mut t, means, cfg)?;
    Ok(t.value(term.loss).item())
}

/// `α · l_sce + (1 − α) · l_neg` with batch class means.
pub fn nbc_softmax_combined(t: &mut Tape, z: Var, labels: &[usize], weights: Var, cfg: &LossConfig) -> Result<Var> {
    let sce = softmax_cross_entropy(t, z, labels, weights)?;
    let (means, _) = class_mean_block(t, z, labels)?;
    let neg = negative_block_term(t, means, cfg)?.loss;
    combine(t, sce, neg, cfg.alpha)
}

pub fn combine(t: &mut Tape, sce: Var, neg: Var, alpha: f64) -> Result<Var> {
    let a = t.scale(sce, alpha)?;
    let b = t.scale(neg, 1.0 - alpha)?;
    Ok(t.add(a, b)?)
}

fn normalized_cosines(t: &mut Tape, z: Var, labels: &[usize], weights: Var) -> Result<Var> {
    check_batch(t.value(z).rows(), labels)?;
    check_labels(labels, t.value(weights).rows())?;
    Ok(t.cosine_similarity(z, weights)?)
}

/// Large-margin cosine loss: logits `s·(cos θⱼ − m·1[j = yᵢ])`.
pub fn cosface_loss(t: &mut Tape, z: Var, labels: &[usize], weights: Var, scale: f64, margin: f64) -> Result<Var> {
    if margin < 0.0 {
        return Err(LossError::InvalidConfig(format!("margin must be non-negative, got {margin}")));
    }
    let cos = normalized_cosines(t, z, labels, weights)?;
    let (b, c) = t.value(cos).dims2();
    let mut shift = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        shift[i * c + y] = -margin;
    }
    let shift = t.constant(Tensor::matrix(b, c, shift)?);
    let shifted = t.add(cos, shift)?;
    let logits = t.scale(shifted, scale)?;
    cross_entropy_from_logits(t, logits, labels)
}

/// Additive angular margin loss: target logit `s·cos(θ_y + m)`.
pub fn arcface_loss(t: &mut Tape, z: Var, labels: &[usize], weights: Var, scale: f64, margin: f64) -> Result<Var> {
    if margin < 0.0 {
        return Err(LossError::InvalidConfig(format!("margin must be non-negative, got {margin}")));
    }
    let cos = normalized_cosines(t, z, labels, weights)?;
    let adjusted = t.arc_margin(cos, labels, margin)?;
    let logits = t.scale(adjusted, scale)?;
    cross_entropy_from_logits(t, logits, labels)
}

#[derive(Debug, Clone, Copy)]
pub struct MultiSimilarityOutput {
    pub loss: Var,
    /// Positive plus negative pairs over all anchors.
    pub valid_pairs: usize,
}

/// General pair weighting loss over all in-batch pairs (no mining).
///
/// Per anchor: `(1/α)·log(1 + Σ_pos e^{−α(s−λ)}) + (1/β)·log(1 + Σ_neg e^{β(s−λ)})`,
/// averaged over anchors. A batch without any pair yields 0.
pub fn multisimilarity_loss(
    t: &mut Tape,
    z: Var,
    labels: &[usize],
    params: &MultiSimilarityParams,
) -> Result<MultiSimilarityOutput> {
    let b = t.value(z).rows();
    check_batch(b, labels)?;
    let mut pos = vec![0.0; b * b];
    let mut neg = vec![0.0; b * b];
    let mut pairs = 0;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                pos[i * b + j] = 1.0;
            } else {
                neg[i * b + j] = 1.0;
            }
            pairs += 1;
        }
    }
    if pairs == 0 {
        log::warn!("multisimilarity: batch of {b} has no valid pairs");
        return Ok(MultiSimilarityOutput {
            loss: t.constant(Tensor::scalar(0.0)),
            valid_pairs: 0,
        });
    }
    let sim = t.cosine_similarity(z, z)?;
    let centered = t.add_scalar(sim, -params.lambda)?;
    let pos_mask = t.constant(Tensor::matrix(b, b, pos)?);
    let neg_mask = t.constant(Tensor::matrix(b, b, neg)?);

    let pos_arg = t.scale(centered, -params.alpha)?;
    let pos_exp = t.exp(pos_arg)?;
    let pos_sel = t.mul(pos_exp, pos_mask)?;
    let pos_sum = t.row_sum(pos_sel)?;
    let pos_1p = t.add_scalar(pos_sum, 1.0)?;
    let pos_log = t.log(pos_1p)?;
    let pos_term = t.scale(pos_log, 1.0 / params.alpha)?;

    let neg_arg = t.scale(centered, params.beta)?;
    let neg_exp = t.exp(neg_arg)?;
    let neg_sel = t.mul(neg_exp, neg_mask)?;
    let neg_sum = t.row_sum(neg_sel)?;
    let neg_1p = t.add_scalar(neg_sum, 1.0)?;
    let neg_log = t.log(neg_1p)?;
    let neg_term = t.scale(neg_log, 1.0 / params.beta)?;

    let per_anchor = t.add(pos_term, neg_term)?;
    Ok(MultiSimilarityOutput {
        loss: t.mean(per_anchor)?,
        valid_pairs: pairs,
    })
}

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    Nbc,
    CosFace,
    ArcFace,
    MultiSimilarity,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "softmax" => Self::Softmax,
            "nbc" => Self::Nbc,
            "cosface" => Self::CosFace,
            "arcface" => Self::ArcFace,
            "multisimilarity" => Self::MultiSimilarity,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Nbc => "nbc",
            Self::CosFace => "cosface",
            Self::ArcFace => "arcface",
            Self::MultiSimilarity => "multisimilarity",
        }
    }
}

/// Batch loss for `kind`. `head` supplies the class weights plus scale and
/// margin for the margin losses.
pub fn batch_loss(
    t: &mut Tape,
    kind: LossKind,
    z: Var,
    labels: &[usize],
    weights: Var,
    head: &ClassifierHead,
    cfg: &LossConfig,
) -> Result<Var> {
    match kind {
        LossKind::Softmax => softmax_cross_entropy(t, z, labels, weights),
        LossKind::Nbc => match cfg.schedule {
            NegativeSchedule::Batch => nbc_softmax_combined(t, z, labels, weights, cfg),
            // Epoch schedule: the negative term is applied once per epoch by the trainer.
            NegativeSchedule::Epoch => {
                let sce = softmax_cross_entropy(t, z, labels, weights)?;
                Ok(t.scale(sce, cfg.alpha)?)
            }
        },
        LossKind::CosFace => cosface_loss(t, z, labels, weights, head.scale, head.margin),
        LossKind::ArcFace => arcface_loss(t, z, labels, weights, head.scale, head.margin),
        LossKind::MultiSimilarity => Ok(multisimilarity_loss(t, z, labels, &cfg.multisim)?.loss),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with_tau(tau: f64) -> LossConfig {
        LossConfig {
            tau,
            ..LossConfig::singletask()
        }
    }

    fn stats_from(rows: &[Vec<f64>]) -> BatchClassStats {
        let z = Tensor::from_rows(rows).unwrap();
        let labels: Vec<usize> = (0..rows.len()).collect();
        class_means(&z, &labels).unwrap()
    }

    #[test]
    fn class_means_two_point_mean() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = class_means(&z, &[0, 0, 1]).unwrap();
        assert_eq!(s.mu_hat[&0], vec![0.5, 0.5]);
        assert_eq!(s.mu_hat[&1], vec![1.0, 0.0]);
        assert_eq!(s.active(), vec![0, 1]);
    }

    #[test]
    fn class_means_singleton_and_absent_class() {
        let z = Tensor::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let s = class_means(&z, &[4]).unwrap();
        assert_eq!(s.mu_hat[&4], vec![0.3, -2.0]);

        let z = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = class_means(&z, &[0, 0, 2]).unwrap();
        assert_eq!(s.active(), vec![0, 2]);
        assert_eq!(s.counts[&0], 2);
        assert!(!s.counts.contains_key(&1));
    }

    #[test]
    fn class_means_rejects_empty_batch() {
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(class_means(&z, &[]), Err(LossError::EmptyBatch));
    }

    #[test]
    fn negative_term_closed_forms() {
        // identical directions, sim = 1: ½·log(2e^0.2)
        let s = stats_from(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        let v = nbc_negative_term(&s, &cfg_with_tau(0.2)).unwrap();
        assert!((v - 0.5 * (2.0 * 0.2f64.exp()).ln()).abs() < 1e-12);
        assert!((v - 0.4466).abs() < 1e-4);

        let s = stats_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        for tau in [0.1, 0.2, 3.0] {
            let v = nbc_negative_term(&s, &cfg_with_tau(tau)).unwrap();
            assert!((v - 0.5 * 2f64.ln()).abs() < 1e-12);
        }

        let s = stats_from(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let v = nbc_negative_term(&s, &cfg_with_tau(0.2)).unwrap();
        assert!((v - 6f64.ln() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_active_class_has_zero_negative_term() {
        let s = stats_from(&[vec![1.0, 2.0]]);
        assert_eq!(nbc_negative_term(&s, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn zero_norm_mean_is_an_error_under_cosine() {
        let s = stats_from(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let err = nbc_negative_term(&s, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, LossError::Tensor(TensorError::ZeroNorm { .. })));
        // dot similarity has no such restriction
        let dot = LossConfig {
            similarity: Similarity::Dot,
            ..LossConfig::default()
        };
        assert!(nbc_negative_term(&s, &dot).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(cfg_with_tau(0.0).validate().is_err());
        let bad_alpha = LossConfig {
            alpha: 1.5,
            ..LossConfig::default()
        };
        assert!(bad_alpha.validate().is_err());
        assert_eq!(LossConfig::multitask().tau, 0.3);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[2, 3]));
        let w = t.constant(Tensor::zeros(&[3, 3]));
        let err = softmax_cross_entropy(&mut t, z, &[0, 3], w).unwrap_err();
        assert_eq!(err, LossError::LabelOutOfRange { label: 3, classes: 3 });
    }

    #[test]
    fn head_rejects_negative_margin_and_single_class() {
        assert!(ClassifierHead::new(Tensor::zeros(&[1, 4]), 1.0, 0.0).is_err());
        assert!(ClassifierHead::new(Tensor::zeros(&[3, 4]), 1.0, -0.1).is_err());
    }
}
