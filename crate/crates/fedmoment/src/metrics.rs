//! Retrieval metrics and c-validation client scoring.
//!
//! The server scores every client snapshot on the c-validation set with a
//! weighted sum of IoU indicators, then turns the raw scores of a round into
//! aggregation weights with a softmax across clients.

use crate::error::{Error, Result};
use crate::localizer::PredictionBatch;

/// IoU thresholds and indicator weights for the c-validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub thresholds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for ScoringConfig {
    /// Indicator weights 0.1/0.2/0.2/0.4/0.1 at IoU > 0.1/0.3/0.5/0.7/0.9.
    fn default() -> Self {
        ScoringConfig {
            thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            weights: vec![0.1, 0.2, 0.2, 0.4, 0.1],
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != self.weights.len() {
            return Err(Error::InvalidConfig(format!(
                "scoring: {} thresholds vs {} weights",
                self.thresholds.len(),
                self.weights.len()
            )));
        }
        if self.thresholds.is_empty() {
            return Err(Error::InvalidConfig("scoring: no thresholds".into()));
        }
        for pair in self.thresholds.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidConfig(
                    "scoring: thresholds must be strictly increasing".into(),
                ));
            }
        }
        if self
            .thresholds
            .iter()
            .any(|&h| !(0.0..1.0).contains(&h) || h == 0.0)
        {
            return Err(Error::InvalidConfig(
                "scoring: thresholds must lie in (0, 1)".into(),
            ));
        }
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig(
                "scoring: weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// A client's c-validation score for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientScore {
    pub client_id: usize,
    /// Weighted IoU-indicator sum before softmax.
    pub raw_score: f64,
    /// Softmax attention weight; per round these sum to 1.
    pub attention: f64,
}

fn check_interval(interval: (f64, f64)) -> Result<()> {
    let (s, e) = interval;
    if s > e || !s.is_finite() || !e.is_finite() {
        return Err(Error::InvertedInterval { start: s, end: e });
    }
    Ok(())
}

/// Intersection over union of two intervals.
///
/// Identical point intervals score 1; distinct intervals with a zero-length
/// union score 0.
pub fn iou(pred: (f64, f64), gt: (f64, f64)) -> Result<f64> {
    check_interval(pred)?;
    check_interval(gt)?;
    let intersection = (pred.1.min(gt.1) - pred.0.max(gt.0)).max(0.0);
    let union = (pred.1 - pred.0) + (gt.1 - gt.0) - intersection;
    if union <= 0.0 {
        return Ok(if pred == gt { 1.0 } else { 0.0 });
    }
    Ok(intersection / union)
}

/// Fraction of samples whose prediction has IoU strictly greater than `m`.
pub fn recall_at_1(predictions: &PredictionBatch, gts: &[(f64, f64)], m: f64) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(Error::CountMismatch {
            predictions: predictions.len(),
            ground_truths: gts.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput {
            context: "recall_at_1",
        });
    }
    if !(0.0..=1.0).contains(&m) || m == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "recall threshold m = {m} must lie in (0, 1]"
        )));
    }
    let mut hits = 0usize;
    for (pred, &gt) in predictions.iter().zip(gts.iter()) {
        if iou(pred.interval(), gt)? > m {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Weighted IoU-indicator sum over the configured thresholds:
/// `sum_h recall_at_1(., h) * e_h`.
pub fn raw_c_score(
    predictions: &PredictionBatch,
    gts: &[(f64, f64)],
    cfg: &ScoringConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut score = 0.0;
    for (&h, &e_h) in cfg.thresholds.iter().zip(cfg.weights.iter()) {
        score += recall_at_1(predictions, gts, h)? * e_h;
    }
    Ok(score)
}

/// Softmax over the round's raw scores, max-subtracted for stability.
///
/// Output is ordered by ascending client id and sums to 1.
pub fn attention_weights(raw_scores: &[(usize, f64)]) -> Result<Vec<ClientScore>> {
    if raw_scores.is_empty() {
        return Err(Error::EmptyInput {
            context: "attention_weights",
        });
    }
    for &(client_id, score) in raw_scores {
        if !score.is_finite() {
            return Err(Error::NonFiniteScore { client_id });
        }
    }
    let mut ordered: Vec<(usize, f64)> = raw_scores.to_vec();
    ordered.sort_by_key(|&(id, _)| id);
    let max = ordered
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = ordered.iter().map(|&(_, s)| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ordered
        .into_iter()
        .zip(exps)
        .map(|((client_id, raw_score), e)| ClientScore {
            client_id,
            raw_score,
            attention: e / total,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::Prediction;
    use proptest::prelude::*;

    /// Builds a batch whose predictions are the given intervals.
    fn batch_of(intervals: &[(f64, f64)]) -> PredictionBatch {
        PredictionBatch::from_predictions(
            intervals
                .iter()
                .map(|&(s, e)| Prediction::from_interval(s, e).unwrap())
                .collect(),
        )
    }

    #[test]
    fn iou_hand_cases() {
        let v = iou((0.4, 0.8), (0.2, 0.6)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou((0.3, 0.7), (0.3, 0.7)).unwrap(), 1.0);
        assert_eq!(iou((0.0, 0.2), (0.5, 0.7)).unwrap(), 0.0);
    }

    #[test]
    fn iou_degenerate_points() {
        assert_eq!(iou((0.5, 0.5), (0.5, 0.5)).unwrap(), 1.0);
        assert_eq!(iou((0.3, 0.3), (0.5, 0.5)).unwrap(), 0.0);
        // Zero-length prediction inside a real interval: zero intersection width.
        assert_eq!(iou((0.5, 0.5), (0.4, 0.6)).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_inverted_intervals() {
        assert!(matches!(
            iou((0.8, 0.4), (0.2, 0.6)),
            Err(Error::InvertedInterval { .. })
        ));
        assert!(matches!(
            iou((0.2, 0.6), (0.8, 0.4)),
            Err(Error::InvertedInterval { .. })
        ));
    }

    #[test]
    fn recall_counts_strictly_above_threshold() {
        // IoUs of 0.8, 0.4, 0.6 against gt [0, 1].
        let batch = batch_of(&[(0.0, 0.8), (0.0, 0.4), (0.0, 0.6)]);
        let gts = vec![(0.0, 1.0); 3];
        let r = recall_at_1(&batch, &gts, 0.5).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        // A tie at the threshold does not count.
        let tie = batch_of(&[(0.0, 0.5)]);
        assert_eq!(recall_at_1(&tie, &[(0.0, 1.0)], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn recall_perfect_predictions() {
        let gts = vec![(0.1, 0.4), (0.5, 0.9)];
        let batch = batch_of(&gts);
        for m in [0.3, 0.5, 0.7, 0.99] {
            assert_eq!(recall_at_1(&batch, &gts, m).unwrap(), 1.0);
        }
    }

    #[test]
    fn recall_rejects_empty_and_mismatched() {
        let batch = batch_of(&[(0.0, 0.5)]);
        assert!(matches!(
            recall_at_1(&batch, &[], 0.5),
            Err(Error::CountMismatch { .. })
        ));
        let empty = batch_of(&[]);
        assert!(matches!(
            recall_at_1(&empty, &[], 0.5),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn recall_is_monotone_nonincreasing_in_m() {
        let batch = batch_of(&[(0.0, 0.8), (0.1, 0.5), (0.2, 0.9), (0.4, 0.41)]);
        let gts = vec![(0.0, 1.0), (0.0, 0.6), (0.3, 0.8), (0.4, 0.6)];
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let m = i as f64 / 100.0;
            let r = recall_at_1(&batch, &gts, m).unwrap();
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn c_score_perfect_predictions_sum_to_one() {
        let gts = vec![(0.2, 0.7); 4];
        let batch = batch_of(&gts);
        let score = raw_c_score(&batch, &gts, &ScoringConfig::default()).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn c_score_all_zero_ious() {
        let batch = batch_of(&[(0.0, 0.1), (0.0, 0.1)]);
        let gts = vec![(0.5, 0.9); 2];
        assert_eq!(
            raw_c_score(&batch, &gts, &ScoringConfig::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn c_score_point_six_ious_fire_three_indicators() {
        // IoU exactly 0.6 for every sample: indicators at 0.1, 0.3, 0.5 fire.
        let batch = batch_of(&[(0.0, 0.6); 5]);
        let gts = vec![(0.0, 1.0); 5];
        let score = raw_c_score(&batch, &gts, &ScoringConfig::default()).unwrap();
        assert!((score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_equal_scores_are_uniform() {
        let raw: Vec<(usize, f64)> = (0..8).map(|id| (id, 0.37)).collect();
        let scores = attention_weights(&raw).unwrap();
        for s in &scores {
            assert!((s.attention - 1.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_two_client_softmax_value() {
        let scores = attention_weights(&[(0, 1.0), (1, 0.0)]).unwrap();
        assert!((scores[0].attention - 0.731059).abs() < 1e-6);
        assert!((scores[1].attention - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn attention_single_client_is_one() {
        let scores = attention_weights(&[(3, -2.5)]).unwrap();
        assert_eq!(scores[0].attention, 1.0);
        assert_eq!(scores[0].client_id, 3);
    }

    #[test]
    fn attention_orders_by_client_id() {
        let scores = attention_weights(&[(2, 0.1), (0, 0.9), (1, 0.4)]).unwrap();
        let ids: Vec<usize> = scores.iter().map(|s| s.client_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(scores[1].raw_score, 0.4);
    }

    #[test]
    fn attention_rejects_non_finite_scores() {
        assert!(matches!(
            attention_weights(&[(0, f64::NAN), (1, 0.0)]),
            Err(Error::NonFiniteScore { client_id: 0 })
        ));
        assert!(matches!(
            attention_weights(&[]),
            Err(Error::EmptyInput { .. })
        ));
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in 0.0f64..1.0, la in 0.0f64..0.5,
            b in 0.0f64..1.0, lb in 0.0f64..0.5,
        ) {
            let p = (a, (a + la).min(1.0));
            let g = (b, (b + lb).min(1.0));
            let x = iou(p, g).unwrap();
            let y = iou(g, p).unwrap();
            prop_assert!((x - y).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn iou_is_invariant_under_joint_affine_maps(
            a in 0.0f64..1.0, la in 0.001f64..0.5,
            b in 0.0f64..1.0, lb in 0.001f64..0.5,
            scale in 0.1f64..4.0, shift in -2.0f64..2.0,
        ) {
            let p = (a, a + la);
            let g = (b, b + lb);
            let f = |(s, e): (f64, f64)| (scale * s + shift, scale * e + shift);
            let x = iou(p, g).unwrap();
            let y = iou(f(p), f(g)).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
        }

        #[test]
        fn attention_sums_to_one_and_shift_invariant(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..12),
            shift in -3.0f64..3.0,
        ) {
            let raw: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            let shifted: Vec<(usize, f64)> =
                scores.iter().map(|&s| s + shift).enumerate().collect();
            let w = attention_weights(&raw).unwrap();
            let ws = attention_weights(&shifted).unwrap();
            let total: f64 = w.iter().map(|s| s.attention).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (x, y) in w.iter().zip(ws.iter()) {
                prop_assert!(x.attention > 0.0);
                prop_assert!((x.attention - y.attention).abs() < 1e-12);
            }
        }
    }
}
