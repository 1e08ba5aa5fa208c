//! Direct timestamp encoding: frame intervals to per-snippet foreground labels.
//!
//! Each snippet timestamp is an independent binary target. There are no
//! anchors and no regression offsets; class is recovered at decode time from
//! proposal duration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SnippetPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpressionClass {
    #[serde(rename = "ME")]
    Micro,
    #[serde(rename = "MaE")]
    Macro,
}

impl fmt::Display for ExpressionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpressionClass::Micro => "ME",
            ExpressionClass::Macro => "MaE",
        })
    }
}

impl FromStr for ExpressionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ME" => Ok(ExpressionClass::Micro),
            "MaE" => Ok(ExpressionClass::Macro),
            other => Err(Error::Format {
                what: "expression class",
                detail: format!("expected ME or MaE, got {other:?}"),
            }),
        }
    }
}

/// Annotated interval, inclusive frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub onset: usize,
    pub offset: usize,
    pub class: ExpressionClass,
}

impl GroundTruth {
    pub fn new(onset: usize, offset: usize, class: ExpressionClass) -> Self {
        Self {
            onset,
            offset,
            class,
        }
    }

    pub fn frames(&self) -> usize {
        self.offset - self.onset + 1
    }
}

/// Which snippets count as belonging to a ground-truth interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForegroundRule {
    /// Snippets whose whole frame span lies inside the interval. An interval
    /// shorter than any such span falls back to the snippets with the largest
    /// frame overlap, so every interval yields at least one foreground label.
    #[default]
    Contained,
    /// Any snippet sharing at least one frame with the interval.
    AnyOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampLabels {
    pub labels: Vec<bool>,
    pub mask: Vec<bool>,
}

impl TimestampLabels {
    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        0
    } else {
        hi - lo + 1
    }
}

pub fn encode_dte(
    video: &str,
    gts: &[GroundTruth],
    plan: &SnippetPlan,
    duration: usize,
    rule: ForegroundRule,
) -> Result<TimestampLabels> {
    if plan.count > duration {
        return Err(Error::ExceedsDuration {
            snippets: plan.count,
            duration,
        });
    }
    let mut labels = vec![false; duration];
    for gt in gts {
        if gt.onset > gt.offset || gt.offset >= plan.effective_frames {
            return Err(Error::Annotation {
                video: video.to_string(),
                onset: gt.onset,
                offset: gt.offset,
                reason: format!("outside frames [0, {}]", plan.effective_frames - 1),
            });
        }
        let span = (gt.onset, gt.offset);
        let overlaps: Vec<usize> = (0..plan.count)
            .map(|t| overlap(plan.timestamp_to_frames(t).expect("t < count"), span))
            .collect();
        match rule {
            ForegroundRule::AnyOverlap => {
                for (t, &o) in overlaps.iter().enumerate() {
                    labels[t] |= o > 0;
                }
            }
            ForegroundRule::Contained => {
                let full = plan.snippet_len;
                let mut any = false;
                for (t, &o) in overlaps.iter().enumerate() {
                    if o == full {
                        labels[t] = true;
                        any = true;
                    }
                }
                if !any {
                    let best = overlaps.iter().copied().max().unwrap_or(0);
                    if best > 0 {
                        for (t, &o) in overlaps.iter().enumerate() {
                            labels[t] |= o == best;
                        }
                    }
                }
            }
        }
    }
    Ok(TimestampLabels {
        labels,
        mask: (0..duration).map(|t| t < plan.count).collect(),
    })
}

/// Share of valid timestamps labelled foreground.
pub fn foreground_ratio(labels: &TimestampLabels) -> Result<f64> {
    let valid = labels.mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::NoValidTimestamps);
    }
    let fg = labels
        .labels
        .iter()
        .zip(&labels.mask)
        .filter(|(&l, &m)| l && m)
        .count();
    Ok(fg as f64 / valid as f64)
}
