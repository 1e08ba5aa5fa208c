//! Deterministic synthetic dataset with planted expression intervals.
//!
//! Background frames are unit Gaussian noise in both streams. Each planted
//! interval adds a triangular onset-apex-offset envelope along a unit
//! direction to the image stream, and the envelope's normalised temporal
//! derivative along the same direction to the flow stream. Directions are a
//! per-class base vector plus per-instance jitter.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`). Each video draws from its
//! own generator keyed by SHA-256 of the global seed and the video id, so
//! videos can be generated in any order or in parallel.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dte::{ExpressionClass, GroundTruth};
use crate::error::{Error, Result};
use crate::preprocess::VideoMeta;
use crate::tensor::Tensor;

/// Expected norm of the per-instance perturbation of a unit class direction.
const JITTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub videos_per_subject: usize,
    pub fps: f64,
    /// Inclusive frame-count range per video.
    pub frames: (usize, usize),
    pub me_count: (usize, usize),
    pub mae_count: (usize, usize),
    /// Inclusive duration ranges in frames.
    pub me_frames: (usize, usize),
    pub mae_frames: (usize, usize),
    /// Width of each stream.
    pub feature_dim: usize,
    /// Ratio of the apex signal's per-coordinate RMS to the unit noise.
    pub snr: f64,
    /// Minimum background frames between and around intervals.
    pub min_gap: usize,
    pub snippet_len: usize,
    pub overlap: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_subjects: 3,
            videos_per_subject: 4,
            fps: 30.0,
            frames: (1440, 1540),
            me_count: (1, 2),
            mae_count: (2, 3),
            me_frames: (9, 15),
            mae_frames: (18, 40),
            feature_dim: 16,
            snr: 3.0,
            min_gap: 8,
            snippet_len: 8,
            overlap: 6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn me_limit(&self) -> usize {
        (0.5 * self.fps).floor() as usize
    }

    pub fn mae_limit(&self) -> usize {
        (4.0 * self.fps).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        let ordered = |r: (usize, usize)| r.0 <= r.1;
        if self.num_subjects == 0 || self.videos_per_subject == 0 {
            return fail("needs at least one subject and one video");
        }
        if !(self.fps > 0.0) || !(self.snr >= 0.0) || self.feature_dim == 0 {
            return fail("fps, snr and feature_dim must be positive");
        }
        if ![self.frames, self.me_count, self.mae_count, self.me_frames, self.mae_frames]
            .into_iter()
            .all(ordered)
        {
            return fail("ranges must be ordered");
        }
        if self.me_frames.0 == 0 || self.me_frames.1 > self.me_limit() {
            return fail("micro durations must lie in [1, 0.5 s]");
        }
        if self.mae_frames.0 <= self.me_limit() || self.mae_frames.1 > self.mae_limit() {
            return fail("macro durations must lie in (0.5 s, 4 s]");
        }
        if self.min_gap < self.snippet_len {
            return fail("min_gap must be at least one snippet");
        }
        if self.overlap >= self.snippet_len {
            return fail("overlap must be smaller than the snippet length");
        }
        Ok(())
    }

    pub fn video_ids(&self) -> Vec<(String, String)> {
        (0..self.num_subjects)
            .flat_map(|s| {
                (0..self.videos_per_subject).map(move |v| (format!("s{:02}_v{:02}", s + 1, v + 1), format!("s{:02}", s + 1)))
            })
            .collect()
    }
}

/// One generated video: frame-level streams, each `frame_count × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub meta: VideoMeta,
    pub ground_truths: Vec<GroundTruth>,
    pub image: Tensor,
    pub flow: Tensor,
}

pub fn video_seed(seed: u64, video_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(video_id.as_bytes());
    h.finalize().into()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Per-class base directions, shared by every video of a dataset.
fn class_directions(spec: &SynthSpec) -> [Vec<f64>; 2] {
    let mut rng = ChaCha8Rng::from_seed(video_seed(spec.seed, "class-directions"));
    let me = unit(gaussian(&mut rng, spec.feature_dim));
    let mae = unit(gaussian(&mut rng, spec.feature_dim));
    [me, mae]
}

/// Triangular envelope over `[onset, offset]` peaking at the midpoint frame.
/// Every frame of the interval is strictly positive.
pub fn envelope(onset: usize, offset: usize, frame: usize) -> f64 {
    if frame < onset || frame > offset {
        return 0.0;
    }
    let apex = (onset + offset) / 2;
    let half = (apex - onset).max(offset - apex) as f64 + 1.0;
    1.0 - (frame as f64 - apex as f64).abs() / half
}

/// Places `durations` (in the given order) inside `[0, frames)` with at least
/// `gap` free frames before, between and after them.
fn pack(rng: &mut ChaCha8Rng, durations: &[usize], frames: usize, gap: usize) -> Option<Vec<(usize, usize)>> {
    let needed = durations.iter().sum::<usize>() + (durations.len() + 1) * gap;
    let slack = frames.checked_sub(needed)?;
    let mut cuts: Vec<usize> = (0..durations.len()).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(durations.len());
    let mut cursor = gap;
    let mut used = 0;
    for (&d, &cut) in durations.iter().zip(&cuts) {
        cursor += cut - used;
        used = cut;
        out.push((cursor, cursor + d - 1));
        cursor += d + gap;
    }
    Some(out)
}

pub fn generate_video(spec: &SynthSpec, video_id: &str, subject_id: &str) -> Result<SynthVideo> {
    generate_with_directions(spec, video_id, subject_id, &class_directions(spec))
}

fn generate_with_directions(
    spec: &SynthSpec,
    video_id: &str,
    subject_id: &str,
    bases: &[Vec<f64>; 2],
) -> Result<SynthVideo> {
    let mut rng = ChaCha8Rng::from_seed(video_seed(spec.seed, video_id));
    let frame_count = rng.random_range(spec.frames.0..=spec.frames.1);
    let n_me = rng.random_range(spec.me_count.0..=spec.me_count.1);
    let n_mae = rng.random_range(spec.mae_count.0..=spec.mae_count.1);
    let mut planted: Vec<(ExpressionClass, usize)> = Vec::with_capacity(n_me + n_mae);
    for _ in 0..n_me {
        planted.push((ExpressionClass::Micro, rng.random_range(spec.me_frames.0..=spec.me_frames.1)));
    }
    for _ in 0..n_mae {
        planted.push((ExpressionClass::Macro, rng.random_range(spec.mae_frames.0..=spec.mae_frames.1)));
    }
    planted.shuffle(&mut rng);

    // the final frame has no successor for flow, so annotations stay before it
    let usable = frame_count.saturating_sub(1);
    let durations: Vec<usize> = planted.iter().map(|p| p.1).collect();
    let spans = pack(&mut rng, &durations, usable, spec.min_gap)
        .ok_or_else(|| Error::InfeasiblePacking { video: video_id.to_string() })?;

    let d = spec.feature_dim;
    let mut image = gaussian(&mut rng, frame_count * d);
    let mut flow = gaussian(&mut rng, frame_count * d);
    let mut ground_truths = Vec::with_capacity(spans.len());
    for (&(class, _), &(onset, offset)) in planted.iter().zip(&spans) {
        let base = &bases[class as usize];
        // per-coordinate scale keeps the jitter norm near JITTER whatever D is
        let jitter = gaussian(&mut rng, d);
        let spread = JITTER / (d as f64).sqrt();
        let dir = unit(base.iter().zip(&jitter).map(|(b, j)| b + spread * j).collect());
        let lo = onset.saturating_sub(1);
        let hi = (offset + 1).min(frame_count - 1);
        let deriv: Vec<f64> = (lo..=hi)
            .map(|f| envelope(onset, offset, f + 1) - envelope(onset, offset, f))
            .collect();
        let peak = deriv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let amp = spec.snr * (d as f64).sqrt();
        for (i, f) in (lo..=hi).enumerate() {
            let e = envelope(onset, offset, f);
            let m = if peak > 0.0 { deriv[i] / peak } else { 0.0 };
            for c in 0..d {
                image[f * d + c] += amp * e * dir[c];
                flow[f * d + c] += amp * m * dir[c];
            }
        }
        ground_truths.push(GroundTruth::new(onset, offset, class));
    }
    ground_truths.sort_by_key(|g| g.onset);

    Ok(SynthVideo {
        meta: VideoMeta {
            video_id: video_id.to_string(),
            subject_id: subject_id.to_string(),
            fps: spec.fps,
            frame_count,
        },
        ground_truths,
        image: Tensor::new(vec![frame_count, d], image)?,
        flow: Tensor::new(vec![frame_count, d], flow)?,
    })
}

/// Generates every video of the dataset, ordered by video id.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let bases = class_directions(spec);
    spec.video_ids()
        .par_iter()
        .map(|(v, s)| generate_with_directions(spec, v, s, &bases))
        .collect()
}

/// Share of annotated frames among all frames.
pub fn foreground_frame_share(videos: &[SynthVideo]) -> f64 {
    let total: usize = videos.iter().map(|v| v.meta.frame_count).sum();
    let fg: usize = videos
        .iter()
        .flat_map(|v| v.ground_truths.iter().map(GroundTruth::frames))
        .sum();
    fg as f64 / total.max(1) as f64
}

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub test_subject: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// One fold per subject, in order of first appearance.
pub fn split_loso(videos: &[VideoMeta]) -> Result<Vec<Fold>> {
    let mut subjects: Vec<&str> = Vec::new();
    for v in videos {
        if !subjects.contains(&v.subject_id.as_str()) {
            subjects.push(&v.subject_id);
        }
    }
    if subjects.len() < 2 {
        return Err(Error::TooFewSubjects(subjects.len()));
    }
    Ok(subjects
        .iter()
        .map(|&s| {
            let (test, train): (Vec<&VideoMeta>, Vec<&VideoMeta>) = videos.iter().partition(|v| v.subject_id == s);
            Fold {
                test_subject: s.to_string(),
                train: train.into_iter().map(|v| v.video_id.clone()).collect(),
                test: test.into_iter().map(|v| v.video_id.clone()).collect(),
            }
        })
        .collect())
}
