//! Collapse-avoiding attention: raw inner-product scores with diagonal
//! removal and the dynamic threshold that filters low-magnitude pairs.

use serde::{Deserialize, Serialize};

use crate::error::{DeattError, Result};
use crate::matrix::{Matrix, MASK_THRESHOLD, SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Retain the raw score when its magnitude clears the threshold (default).
    Scores,
    /// Literal 0/1 thresholding.
    Binary,
}

/// Running average of batch score magnitudes; frozen during evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub ema_thresh: f64,
    pub ema_decay: f64,
    pub observation_count: u64,
}

impl ThresholdState {
    pub fn new(ema_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(DeattError::InvalidArgument(format!(
                "ema_decay {ema_decay} outside (0,1)"
            )));
        }
        Ok(ThresholdState {
            ema_thresh: 0.0,
            ema_decay,
            observation_count: 0,
        })
    }
}

/// S = Q K^T (optionally scaled by 1/sqrt(d)), diagonal replaced by the mask
/// sentinel.
pub fn raw_scores(q: &Matrix, k: &Matrix, scale: bool) -> Result<Matrix> {
    if !q.same_shape(k) {
        return Err(DeattError::Shape(format!(
            "raw_scores: {}x{} vs {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols()
        )));
    }
    let mut s = q.matmul(&k.transpose())?;
    if scale {
        let inv = 1.0 / (q.cols() as f64).sqrt();
        for v in s.data_mut() {
            *v *= inv;
        }
    }
    for i in 0..s.rows() {
        s.set(i, i, SENTINEL);
    }
    Ok(s)
}

/// Mean absolute off-diagonal score over a batch of score matrices. Updates
/// the EMA and returns the current-batch mean for immediate use. Entries at
/// the sentinel (masked diagonal) are excluded unless `include_diag` is set,
/// in which case diagonal cells count as zero contribution is not meaningful,
/// so the literal reading instead includes every finite cell.
pub fn update_threshold(
    batch_scores: &[Matrix],
    state: &mut ThresholdState,
    include_diag: bool,
) -> Result<f64> {
    if batch_scores.is_empty() {
        return Err(DeattError::InvalidArgument(
            "update_threshold: empty batch".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0u64;
    for s in batch_scores {
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                let v = s.get(i, j);
                let masked = v <= MASK_THRESHOLD;
                if masked && !include_diag {
                    continue;
                }
                sum += if masked { 0.0 } else { v.abs() };
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(DeattError::InvalidArgument(
            "update_threshold: no unmasked entries".into(),
        ));
    }
    let batch_mean = sum / count as f64;
    if state.observation_count == 0 {
        state.ema_thresh = batch_mean;
    } else {
        state.ema_thresh =
            state.ema_decay * state.ema_thresh + (1.0 - state.ema_decay) * batch_mean;
    }
    state.observation_count += 1;
    Ok(batch_mean)
}

/// Threshold the score matrix into A_c. The diagonal sentinel stays excluded
/// in both modes. Gradients are straight-through on retained entries.
pub fn apply_threshold(s: &Matrix, thresh: f64, mode: ThresholdMode) -> Result<Matrix> {
    if thresh < 0.0 {
        return Err(DeattError::InvalidArgument(format!(
            "threshold {thresh} must be >= 0"
        )));
    }
    let mut out = s.clone();
    for v in out.data_mut() {
        if *v <= MASK_THRESHOLD {
            continue;
        }
        *v = match mode {
            ThresholdMode::Scores => {
                if v.abs() >= thresh {
                    *v
                } else {
                    0.0
                }
            }
            ThresholdMode::Binary => {
                if *v >= thresh {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    Ok(out)
}

/// 0/1 retention mask over the flat entries of `s` (diagonal sentinel cells
/// are 0). Used by the training path for straight-through gradients.
pub fn retention_mask(s: &Matrix, thresh: f64, mode: ThresholdMode) -> Vec<f64> {
    s.data()
        .iter()
        .map(|&v| {
            if v <= MASK_THRESHOLD {
                0.0
            } else {
                let keep = match mode {
                    ThresholdMode::Scores => v.abs() >= thresh,
                    ThresholdMode::Binary => v >= thresh,
                };
                if keep {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_give_zero_off_diagonal() {
        let q = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = raw_scores(&q, &q, false).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        assert_eq!(s.get(0, 0), SENTINEL);
    }

    #[test]
    fn unit_rows_give_cosines() {
        let a = (0.6f64, 0.8f64);
        let q = Matrix::from_vec(2, 2, vec![1.0, 0.0, a.0, a.1]).unwrap();
        let s = raw_scores(&q, &q, false).unwrap();
        assert!((s.get(0, 1) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn scores_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = Matrix::zeros(3, 4);
        for v in q.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let s = raw_scores(&q, &q, true).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let direct: f64 = (0..4).map(|t| q.get(i, t) * q.get(j, t)).sum::<f64>() / 2.0;
                assert!((s.get(i, j) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(raw_scores(&Matrix::zeros(2, 3), &Matrix::zeros(3, 3), true).is_err());
    }

    fn constant_scores(n: usize, c: f64) -> Matrix {
        let mut s = Matrix::from_vec_unchecked(n, n, vec![c; n * n]);
        for i in 0..n {
            s.set(i, i, SENTINEL);
        }
        s
    }

    #[test]
    fn constant_batch_sets_threshold_to_constant() {
        let mut state = ThresholdState::new(0.9).unwrap();
        let t = update_threshold(&[constant_scores(3, 2.5)], &mut state, false).unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        assert!((state.ema_thresh - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_zero_threshold() {
        let mut state = ThresholdState::new(0.9).unwrap();
        let t = update_threshold(&[constant_scores(3, 0.0)], &mut state, false).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn batch_mean_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mats = Vec::new();
        let mut direct = Vec::new();
        for _ in 0..2 {
            let mut s = Matrix::zeros(3, 3);
            for v in s.data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            for i in 0..3 {
                s.set(i, i, SENTINEL);
            }
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        direct.push(s.get(i, j).abs());
                    }
                }
            }
            mats.push(s);
        }
        let mut state = ThresholdState::new(0.5).unwrap();
        let t = update_threshold(&mats, &mut state, false).unwrap();
        let expected = direct.iter().sum::<f64>() / direct.len() as f64;
        assert_eq!(direct.len(), 12);
        assert!((t - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut state = ThresholdState::new(0.5).unwrap();
        assert!(update_threshold(&[], &mut state, false).is_err());
    }

    #[test]
    fn ema_converges_geometrically_on_constant_input() {
        let mut state = ThresholdState::new(0.99).unwrap();
        update_threshold(&[constant_scores(3, 5.0)], &mut state, false).unwrap();
        // pull the EMA away, then feed the constant again
        state.ema_thresh = 0.0;
        for _ in 0..2000 {
            update_threshold(&[constant_scores(3, 5.0)], &mut state, false).unwrap();
        }
        assert!((state.ema_thresh - 5.0).abs() < 1e-6);
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let s = constant_scores(3, 1.5);
        let a = apply_threshold(&s, 0.0, ThresholdMode::Scores).unwrap();
        assert_eq!(a, s);
    }

    #[test]
    fn huge_threshold_filters_everything() {
        let s = constant_scores(3, 1.5);
        let a = apply_threshold(&s, 10.0, ThresholdMode::Scores).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(a.get(i, j), 0.0);
                }
            }
        }
        assert_eq!(a.get(0, 0), SENTINEL);
    }

    #[test]
    fn binary_mode_hand_case() {
        let mut s = Matrix::from_vec(2, 2, vec![0.0, 2.0, 0.5, 0.0]).unwrap();
        s.set(0, 0, SENTINEL);
        s.set(1, 1, SENTINEL);
        let a = apply_threshold(&s, 1.0, ThresholdMode::Binary).unwrap();
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.get(0, 0), SENTINEL);
    }

    #[test]
    fn negative_threshold_rejected() {
        assert!(apply_threshold(&constant_scores(2, 1.0), -0.1, ThresholdMode::Scores).is_err());
    }

    #[test]
    fn masked_count_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..8);
            let mut s = Matrix::zeros(n, n);
            for v in s.data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            for i in 0..n {
                s.set(i, i, SENTINEL);
            }
            let thresh = rng.gen_range(0.0..2.0);
            let a = apply_threshold(&s, thresh, ThresholdMode::Scores).unwrap();
            let zeroed = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| i != j && a.get(i, j) == 0.0 && s.get(i, j) != 0.0)
                .count();
            let expected = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| {
                    i != j && s.get(i, j).abs() < thresh && s.get(i, j) != 0.0
                })
                .count();
            assert_eq!(zeroed, expected);
        }
    }

    #[test]
    fn increasing_threshold_never_unmasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = Matrix::zeros(5, 5);
        for v in s.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        for i in 0..5 {
            s.set(i, i, SENTINEL);
        }
        let mut prev = retention_mask(&s, 0.0, ThresholdMode::Scores);
        for step in 1..20 {
            let mask = retention_mask(&s, step as f64 * 0.15, ThresholdMode::Scores);
            for (m, p) in mask.iter().zip(&prev) {
                assert!(m <= p);
            }
            prev = mask;
        }
    }
}
