//! Temporal-IoU matching and recall/precision/F1 scoring.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::decode::Proposal;
use crate::dte::{ExpressionClass, GroundTruth};
use crate::error::{Error, Result};

/// IoU of two inclusive frame intervals, counting frames.
pub fn interval_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        return 0.0;
    }
    let inter = hi - lo + 1;
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(proposal index, ground-truth index)`
    pub pairs: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp_me: usize,
    pub tp_mae: usize,
    pub gt_me: usize,
    pub gt_mae: usize,
}

impl MatchResult {
    pub fn proposals(&self) -> usize {
        self.tp + self.fp
    }

    pub fn ground_truths(&self) -> usize {
        self.tp + self.fn_
    }

    /// Adds the counts of `other`; pairs are left untouched since their
    /// indices refer to a different proposal list.
    pub fn merge(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tp_me += other.tp_me;
        self.tp_mae += other.tp_mae;
        self.gt_me += other.gt_me;
        self.gt_mae += other.gt_mae;
    }
}

/// One-to-one greedy matching. Proposals are visited by descending
/// confidence (ties by ascending onset); each claims the unclaimed ground
/// truth of highest IoU if that IoU reaches `k_eval`. Predicted class plays
/// no part.
pub fn match_proposals(proposals: &[Proposal], gts: &[GroundTruth], k_eval: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&proposals[i], &proposals[j]);
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.onset.cmp(&b.onset))
    });
    let mut claimed = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for i in order {
        let p = &proposals[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !claimed[*g])
            .map(|(g, gt)| (g, interval_iou((p.onset, p.offset), (gt.onset, gt.offset))))
            .filter(|(_, iou)| *iou >= k_eval)
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((g, _)) = best {
            claimed[g] = true;
            pairs.push((i, g));
        }
    }
    let tp = pairs.len();
    let count = |c: ExpressionClass| gts.iter().filter(|g| g.class == c).count();
    let tp_of = |c: ExpressionClass| pairs.iter().filter(|(_, g)| gts[*g].class == c).count();
    MatchResult {
        tp,
        fp: proposals.len() - tp,
        fn_: gts.len() - tp,
        tp_me: tp_of(ExpressionClass::Micro),
        tp_mae: tp_of(ExpressionClass::Macro),
        gt_me: count(ExpressionClass::Micro),
        gt_mae: count(ExpressionClass::Macro),
        pairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: Option<String>,
    pub aggregate: bool,
    pub recall_me: f64,
    pub recall_mae: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp_me: usize,
    pub gt_me: usize,
    pub tp_mae: usize,
    pub gt_mae: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score(result: &MatchResult) -> EvalReport {
    let precision = ratio(result.tp, result.tp + result.fp);
    let recall = ratio(result.tp, result.tp + result.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    EvalReport {
        fold: None,
        aggregate: false,
        recall_me: ratio(result.tp_me, result.gt_me),
        recall_mae: ratio(result.tp_mae, result.gt_mae),
        recall,
        precision,
        f1,
        tp: result.tp,
        fp: result.fp,
        fn_: result.fn_,
        tp_me: result.tp_me,
        gt_me: result.gt_me,
        tp_mae: result.tp_mae,
        gt_mae: result.gt_mae,
    }
}

/// Micro-averaged LOSO report: counts are pooled across folds, then scored.
pub fn aggregate_loso(folds: &[MatchResult]) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::EmptyFolds);
    }
    let mut total = MatchResult::default();
    for f in folds {
        total.merge(f);
    }
    let mut report = score(&total);
    report.aggregate = true;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(onset: usize, offset: usize, confidence: f64) -> Proposal {
        Proposal {
            onset,
            offset,
            class: ExpressionClass::Macro,
            confidence,
        }
    }

    fn gt(onset: usize, offset: usize) -> GroundTruth {
        GroundTruth::new(onset, offset, ExpressionClass::Macro)
    }

    #[test]
    fn iou_values() {
        assert_eq!(interval_iou((3, 9), (3, 9)), 1.0);
        assert_eq!(interval_iou((0, 4), (5, 9)), 0.0);
        assert_eq!(interval_iou((0, 10), (5, 15)), 0.375);
        assert_eq!(interval_iou((5, 15), (0, 10)), 0.375);
    }

    #[test]
    fn exact_match() {
        let r = match_proposals(&[prop(10, 20, 0.9)], &[gt(10, 20)], 0.5);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
        assert_eq!(r.pairs, vec![(0, 0)]);
    }

    #[test]
    fn one_to_one() {
        let r = match_proposals(&[prop(10, 20, 0.9), prop(11, 20, 0.8)], &[gt(10, 20)], 0.5);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        // higher confidence claims first
        assert_eq!(r.pairs, vec![(0, 0)]);
    }

    #[test]
    fn class_does_not_gate_matching() {
        let p = Proposal {
            onset: 0,
            offset: 9,
            class: ExpressionClass::Macro,
            confidence: 0.5,
        };
        let g = GroundTruth::new(0, 9, ExpressionClass::Micro);
        let r = match_proposals(&[p], &[g], 0.5);
        assert_eq!((r.tp, r.tp_me, r.gt_me), (1, 1, 1));
    }

    #[test]
    fn scoring() {
        let r = MatchResult {
            tp: 3,
            fp: 1,
            fn_: 1,
            ..Default::default()
        };
        let s = score(&r);
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));

        let r = MatchResult {
            fn_: 4,
            ..Default::default()
        };
        let s = score(&r);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn loso_aggregation() {
        let a = MatchResult {
            tp: 1,
            fp: 0,
            fn_: 1,
            ..Default::default()
        };
        let b = MatchResult {
            tp: 1,
            fp: 1,
            fn_: 0,
            ..Default::default()
        };
        let s = aggregate_loso(&[a.clone(), b.clone()]).unwrap();
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(s.aggregate);
        assert_eq!(aggregate_loso(&[b.clone(), a.clone()]).unwrap(), s);

        let single = aggregate_loso(std::slice::from_ref(&a)).unwrap();
        let direct = score(&a);
        assert_eq!((single.precision, single.recall, single.f1), (direct.precision, direct.recall, direct.f1));

        assert!(matches!(aggregate_loso(&[]), Err(Error::EmptyFolds)));

        // duplicated counts leave rates unchanged
        let doubled = aggregate_loso(&[a.clone(), b.clone(), a, b]).unwrap();
        assert_eq!((doubled.precision, doubled.recall), (s.precision, s.recall));
    }

    #[test]
    fn stricter_threshold_never_adds_matches() {
        let props = [prop(0, 10, 0.9), prop(20, 35, 0.7), prop(50, 52, 0.6)];
        let gts = [gt(2, 12), gt(22, 30), gt(48, 60)];
        let mut last = usize::MAX;
        for k in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let tp = match_proposals(&props, &gts, k).tp;
            assert!(tp <= last);
            last = tp;
        }
    }
}
