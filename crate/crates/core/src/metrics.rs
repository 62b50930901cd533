//! Ranking metrics: AUC by rank statistics, session-weighted GAUC, logloss.

use std::collections::BTreeMap;

use crate::error::{DeattError, Result};

#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub session_ids: Vec<u64>,
}

impl PredictionSet {
    pub fn push(&mut self, score: f64, label: u8, session_id: u64) {
        self.scores.push(score);
        self.labels.push(label);
        self.session_ids.push(session_id);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from average ranks in O(n log n).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DeattError::Shape("auc: length mismatch".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(DeattError::UndefinedMetric(
            "auc needs both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // average ranks within tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Session-weighted AUC. Sessions with a single class are skipped and the
/// remaining weights renormalized by their log counts.
pub fn gauc(pred: &PredictionSet) -> Result<f64> {
    if pred.scores.len() != pred.labels.len() || pred.scores.len() != pred.session_ids.len() {
        return Err(DeattError::Shape("gauc: parallel arrays differ".into()));
    }
    // BTreeMap keeps session iteration (and float accumulation) deterministic
    let mut sessions: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for i in 0..pred.len() {
        let entry = sessions.entry(pred.session_ids[i]).or_default();
        entry.0.push(pred.scores[i]);
        entry.1.push(pred.labels[i]);
    }
    let mut weighted = 0.0;
    let mut total_logs = 0.0;
    for (scores, labels) in sessions.values() {
        match auc(scores, labels) {
            Ok(a) => {
                let logs = scores.len() as f64;
                weighted += logs * a;
                total_logs += logs;
            }
            Err(DeattError::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if total_logs == 0.0 {
        return Err(DeattError::UndefinedMetric(
            "gauc: no session contains both classes".into(),
        ));
    }
    Ok(weighted / total_logs)
}

/// Mean binary cross-entropy with predictions clipped to [1e-12, 1-1e-12].
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DeattError::Shape("logloss: length mismatch".into()));
    }
    if scores.is_empty() {
        return Err(DeattError::UndefinedMetric("logloss on empty set".into()));
    }
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        let p = s.clamp(1e-12, 1.0 - 1e-12);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// Brute-force reference implementations. These stay independent of the
/// rank-based paths above and exist to verify them.
pub mod oracle {
    use super::*;

    /// O(P*N) pair enumeration with ties counting one half.
    pub fn auc_by_pairs(scores: &[f64], labels: &[u8]) -> Result<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(DeattError::UndefinedMetric("auc needs both classes".into()));
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Ok(total / (pos.len() * neg.len()) as f64)
    }

    /// Per-session pair enumeration with log-count weights.
    pub fn gauc_by_pairs(pred: &PredictionSet) -> Result<f64> {
        let mut sessions: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for i in 0..pred.len() {
            let entry = sessions.entry(pred.session_ids[i]).or_default();
            entry.0.push(pred.scores[i]);
            entry.1.push(pred.labels[i]);
        }
        let mut weighted = 0.0;
        let mut total_logs = 0.0;
        for (scores, labels) in sessions.values() {
            if let Ok(a) = auc_by_pairs(scores, labels) {
                weighted += scores.len() as f64 * a;
                total_logs += scores.len() as f64;
            }
        }
        if total_logs == 0.0 {
            return Err(DeattError::UndefinedMetric("no valid session".into()));
        }
        Ok(weighted / total_logs)
    }
}
