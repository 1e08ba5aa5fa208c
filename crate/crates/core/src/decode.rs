//! Threshold-and-merge proposal decoding.

use serde::{Deserialize, Serialize};

use crate::dte::ExpressionClass;
use crate::error::{Error, Result};
use crate::preprocess::SnippetPlan;

/// A decoded interval with inclusive frame bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub onset: usize,
    pub offset: usize,
    pub class: ExpressionClass,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub theta: f64,
    pub me_max_seconds: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            theta: 0.05,
            me_max_seconds: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!("theta {} not in [0, 1)", self.theta)));
        }
        if self.me_max_seconds <= 0.0 {
            return Err(Error::InvalidArgument("me_max_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// `O[t] > θ` at valid timestamps.
pub fn select_valid(probs: &[f64], mask: &[bool], theta: f64) -> Vec<bool> {
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| m && p > theta)
        .collect()
}

/// Maximal runs of `true`, as inclusive `(start, end)` pairs in order.
pub fn merge_runs(valid: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &v) in valid.iter().enumerate() {
        match (v, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, valid.len() - 1));
    }
    runs
}

pub fn classify_duration(frames: usize, fps: f64, me_max_seconds: f64) -> ExpressionClass {
    if frames as f64 / fps <= me_max_seconds {
        ExpressionClass::Micro
    } else {
        ExpressionClass::Macro
    }
}

pub fn to_frame_proposal(
    run: (usize, usize),
    plan: &SnippetPlan,
    probs: &[f64],
    fps: f64,
    cfg: &DecodeConfig,
) -> Result<Proposal> {
    let (a, b) = run;
    if a > b || b >= probs.len() {
        return Err(Error::OutOfRange {
            index: b,
            len: probs.len().min(plan.count),
        });
    }
    let (onset, _) = plan.timestamp_to_frames(a)?;
    let (_, offset) = plan.timestamp_to_frames(b)?;
    let run_probs = &probs[a..=b];
    Ok(Proposal {
        onset,
        offset,
        class: classify_duration(offset - onset + 1, fps, cfg.me_max_seconds),
        confidence: run_probs.iter().sum::<f64>() / run_probs.len() as f64,
    })
}

pub fn decode_video(
    probs: &[f64],
    mask: &[bool],
    plan: &SnippetPlan,
    fps: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<Proposal>> {
    if probs.len() != mask.len() {
        return Err(Error::shape("decode_video", &[probs.len()], &[mask.len()]));
    }
    if fps <= 0.0 {
        return Err(Error::InvalidArgument(format!("fps {fps} must be positive")));
    }
    let valid = select_valid(probs, mask, cfg.theta);
    let mut out = merge_runs(&valid)
        .into_iter()
        .map(|run| to_frame_proposal(run, plan, probs, fps, cfg))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|p| p.onset);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::plan_snippets;
    use proptest::prelude::*;

    #[test]
    fn selection() {
        let o = [0.01, 0.2, 0.6, 0.7, 0.03];
        let full = [true; 5];
        assert_eq!(select_valid(&o, &full, 0.05), vec![false, true, true, true, false]);
        assert_eq!(select_valid(&o, &full, 0.0), vec![true; 5]);
        let mask = [true, false, true, false, true];
        assert_eq!(select_valid(&[0.9; 5], &mask, 0.05), mask.to_vec());
        // strict inequality
        assert_eq!(select_valid(&[0.05], &[true], 0.05), vec![false]);
    }

    #[test]
    fn runs() {
        assert_eq!(merge_runs(&[false, true, true, true, false]), vec![(1, 3)]);
        assert!(merge_runs(&[false; 4]).is_empty());
        assert_eq!(merge_runs(&[true, false, true]), vec![(0, 0), (2, 2)]);
    }

    #[test]
    fn frame_proposals_and_duration_rule() {
        let plan = plan_snippets(101, 8, 6).unwrap();
        let cfg = DecodeConfig::default();
        let probs = vec![0.5; 20];
        let p = to_frame_proposal((2, 2), &plan, &probs, 30.0, &cfg).unwrap();
        assert_eq!((p.onset, p.offset, p.class), (4, 11, ExpressionClass::Micro));
        let p = to_frame_proposal((0, 9), &plan, &probs, 30.0, &cfg).unwrap();
        assert_eq!((p.onset, p.offset, p.class), (0, 25, ExpressionClass::Macro));

        let mut probs = vec![0.0; 20];
        probs[4] = 0.6;
        probs[5] = 0.8;
        let p = to_frame_proposal((4, 5), &plan, &probs, 30.0, &cfg).unwrap();
        assert!((p.confidence - 0.7).abs() < 1e-12);

        assert!(to_frame_proposal((3, 25), &plan, &probs, 30.0, &cfg).is_err());
    }

    #[test]
    fn half_second_is_micro() {
        assert_eq!(classify_duration(15, 30.0, 0.5), ExpressionClass::Micro);
        assert_eq!(classify_duration(16, 30.0, 0.5), ExpressionClass::Macro);
        assert_eq!(classify_duration(100, 200.0, 0.5), ExpressionClass::Micro);
    }

    #[test]
    fn video_decoding() {
        let plan = plan_snippets(41, 8, 6).unwrap();
        let mask = vec![true; plan.count];
        let cfg = DecodeConfig::default();
        assert!(decode_video(&vec![0.01; plan.count], &mask, &plan, 30.0, &cfg)
            .unwrap()
            .is_empty());

        let mut o = vec![0.0; plan.count];
        o[3..6].iter_mut().for_each(|v| *v = 0.9);
        o[6] = 0.02;
        o[7..9].iter_mut().for_each(|v| *v = 0.9);
        let props = decode_video(&o, &mask, &plan, 30.0, &cfg).unwrap();
        assert_eq!(props.len(), 2);
        assert_eq!((props[0].onset, props[0].offset), (6, 17));
        assert_eq!((props[1].onset, props[1].offset), (14, 23));
    }

    proptest! {
        #[test]
        fn raising_theta_only_shrinks(probs in proptest::collection::vec(0.0f64..1.0, 1..60),
                                      lo in 0.0f64..0.5, bump in 0.0f64..0.5) {
            let mask = vec![true; probs.len()];
            let low = merge_runs(&select_valid(&probs, &mask, lo));
            let high = merge_runs(&select_valid(&probs, &mask, lo + bump));
            for (a, b) in &high {
                prop_assert!(low.iter().any(|(la, lb)| la <= a && b <= lb));
            }
            for w in high.windows(2) {
                prop_assert!(w[0].1 + 1 < w[1].0);
            }
        }
    }
}
