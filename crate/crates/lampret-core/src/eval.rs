//! Ranking and classification metrics: MRR, Recall@K (hit rate), and
//! threshold-based micro-averaged precision/recall/F1.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty result list")]
    EmptyResults,
    #[error("rank result invalid: gold_rank {gold_rank}, n_candidates {n_candidates}")]
    InvalidRank { gold_rank: usize, n_candidates: usize },
}

/// Outcome of ranking one instance's candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankResult {
    /// 1-based rank of the gold candidate
    pub gold_rank: usize,
    pub n_candidates: usize,
}

impl RankResult {
    pub fn new(gold_rank: usize, n_candidates: usize) -> Result<RankResult, EvalError> {
        if gold_rank == 0 || gold_rank > n_candidates {
            return Err(EvalError::InvalidRank { gold_rank, n_candidates });
        }
        Ok(RankResult { gold_rank, n_candidates })
    }
}

/// Mean reciprocal rank: mean of 1/gold_rank.
pub fn mrr(results: &[RankResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let sum: f64 = results.iter().map(|r| 1.0 / r.gold_rank as f64).sum();
    Ok(sum / results.len() as f64)
}

/// Hit rate: fraction of instances whose gold ranks within the top K.
pub fn recall_at_k(results: &[RankResult], k: usize) -> f64 {
    assert!(k >= 1);
    if results.is_empty() {
        return 0.0;
    }
    let hits = results.iter().filter(|r| r.gold_rank <= k).count();
    hits as f64 / results.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged P/R/F1 at threshold τ: every candidate with distance < τ is
/// predicted positive; each instance has exactly one gold (at `gold[i]`).
/// With no positive prediction anywhere, precision is defined as 0.
pub fn prf1_at_threshold(distances: &[Vec<f64>], gold: &[usize], tau: f64) -> Prf1 {
    assert_eq!(distances.len(), gold.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (dists, &g) in distances.iter().zip(gold) {
        assert!(g < dists.len(), "gold index out of range");
        for (c, &d) in dists.iter().enumerate() {
            let predicted = d < tau;
            match (predicted, c == g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 { precision, recall, f1 }
}

/// Choose τ on a validation set by maximizing F1. Candidate thresholds are
/// the observed distances plus one value above the maximum; ties prefer the
/// smaller τ, so the choice is deterministic.
pub fn select_tau(distances: &[Vec<f64>], gold: &[usize]) -> f64 {
    let mut candidates: Vec<f64> = distances.iter().flatten().copied().collect();
    if candidates.is_empty() {
        return 0.0;
    }
    let max = candidates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    candidates.push(max + 1.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best_tau = candidates[0];
    let mut best_f1 = -1.0;
    for &tau in &candidates {
        let f1 = prf1_at_threshold(distances, gold, tau).f1;
        if f1 > best_f1 {
            best_f1 = f1;
            best_tau = tau;
        }
    }
    best_tau
}

/// One evaluation run's metric record, serialized into reports.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub aggregator: String,
    pub modality: String,
    pub mrr: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_instances: usize,
    pub tau: f64,
}
