//! Snippet slicing, stream concatenation and fixed-duration padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub subject_id: String,
    pub fps: f64,
    pub frame_count: usize,
}

/// How a video of `L` frames is cut into overlapping snippets.
///
/// The last frame is discarded so the image and flow streams have the same
/// length; trailing frames that do not fill a whole snippet are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetPlan {
    pub snippet_len: usize,
    pub overlap: usize,
    pub effective_frames: usize,
    pub count: usize,
}

impl SnippetPlan {
    pub fn stride(&self) -> usize {
        self.snippet_len - self.overlap
    }

    /// Inclusive frame span `[t·stride, t·stride + s − 1]` of snippet `t`.
    pub fn timestamp_to_frames(&self, t: usize) -> Result<(usize, usize)> {
        if t >= self.count {
            return Err(Error::OutOfRange {
                index: t,
                len: self.count,
            });
        }
        let start = t * self.stride();
        Ok((start, start + self.snippet_len - 1))
    }
}

pub fn plan_snippets(frame_count: usize, snippet_len: usize, overlap: usize) -> Result<SnippetPlan> {
    if snippet_len == 0 || overlap >= snippet_len {
        return Err(Error::InvalidArgument(format!(
            "snippet length {snippet_len} with overlap {overlap}"
        )));
    }
    let effective_frames = frame_count.saturating_sub(1);
    if effective_frames < snippet_len {
        return Err(Error::TooShort {
            frames: frame_count,
            snippet: snippet_len,
        });
    }
    let stride = snippet_len - overlap;
    Ok(SnippetPlan {
        snippet_len,
        overlap,
        effective_frames,
        count: 1 + (effective_frames - snippet_len) / stride,
    })
}

/// Sums frame-level features over each snippet's frames and divides by the
/// square root of the frame count, so unit-variance frame noise stays unit
/// variance per snippet.
///
/// Stands in for a learned snippet encoder when only frame-level features
/// exist, as with synthetic data.
pub fn pool_snippets(frames: &Tensor, plan: &SnippetPlan) -> Result<Tensor> {
    if frames.shape().len() != 2 || frames.rows() < plan.effective_frames {
        return Err(Error::shape(
            "pool_snippets",
            frames.shape(),
            &[plan.effective_frames],
        ));
    }
    let d = frames.cols();
    let mut out = Vec::with_capacity(plan.count * d);
    for t in 0..plan.count {
        let (a, b) = plan.timestamp_to_frames(t)?;
        let mut acc = vec![0.0; d];
        for f in a..=b {
            acc.iter_mut().zip(frames.row(f)).for_each(|(x, v)| *x += v);
        }
        let n = ((b - a + 1) as f64).sqrt();
        out.extend(acc.into_iter().map(|v| v / n));
    }
    Tensor::new(vec![plan.count, d], out)
}

/// Columnwise concatenation, image stream first.
pub fn concat_streams(image: &Tensor, flow: &Tensor) -> Result<Tensor> {
    if image.shape().len() != 2 || image.shape() != flow.shape() {
        return Err(Error::shape("concat_streams", image.shape(), flow.shape()));
    }
    let (t, d) = (image.rows(), image.cols());
    let mut data = Vec::with_capacity(t * 2 * d);
    for r in 0..t {
        data.extend_from_slice(image.row(r));
        data.extend_from_slice(flow.row(r));
    }
    Tensor::new(vec![t, 2 * d], data)
}

/// Snippet features padded to a fixed duration, with a prefix-valid mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub mask: Vec<bool>,
    pub valid_len: usize,
}

impl FeatureSequence {
    pub fn duration(&self) -> usize {
        self.mask.len()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

pub fn pad_to_fixed(snippets: &Tensor, duration: usize) -> Result<FeatureSequence> {
    if snippets.shape().len() != 2 {
        return Err(Error::shape("pad_to_fixed", snippets.shape(), &[duration]));
    }
    let (t, w) = (snippets.rows(), snippets.cols());
    if t > duration {
        return Err(Error::ExceedsDuration {
            snippets: t,
            duration,
        });
    }
    let mut data = Vec::with_capacity(duration * w);
    data.extend_from_slice(snippets.data());
    data.resize(duration * w, 0.0);
    Ok(FeatureSequence {
        features: Tensor::new(vec![duration, w], data)?,
        mask: (0..duration).map(|i| i < t).collect(),
        valid_len: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn snippet_counts() {
        let p = plan_snippets(101, 8, 6).unwrap();
        assert_eq!((p.effective_frames, p.count), (100, 47));
        // start indices 0, 2, ..., 92
        assert_eq!(p.timestamp_to_frames(46).unwrap(), (92, 99));

        let p = plan_snippets(9, 8, 6).unwrap();
        assert_eq!((p.effective_frames, p.count), (8, 1));

        assert_eq!(plan_snippets(2274, 8, 6).unwrap().count, 1133);
    }

    #[test]
    fn too_short_and_bad_overlap() {
        assert!(matches!(plan_snippets(8, 8, 6), Err(Error::TooShort { .. })));
        assert!(plan_snippets(100, 8, 8).is_err());
    }

    #[test]
    fn frame_spans() {
        let p = plan_snippets(101, 8, 6).unwrap();
        assert_eq!(p.timestamp_to_frames(0).unwrap(), (0, 7));
        assert_eq!(p.timestamp_to_frames(3).unwrap(), (6, 13));
        assert!(p.timestamp_to_frames(47).is_err());

        let p = plan_snippets(200, 32, 24).unwrap();
        assert_eq!(p.timestamp_to_frames(1).unwrap(), (8, 39));
    }

    #[test]
    fn padding() {
        let x = Tensor::full(vec![3, 2], 1.0);
        let seq = pad_to_fixed(&x, 5).unwrap();
        assert_eq!(seq.mask, vec![true, true, true, false, false]);
        assert_eq!(seq.valid_len, 3);

        let seq = pad_to_fixed(&x, 3).unwrap();
        assert!(seq.mask.iter().all(|&m| m));
        assert_eq!(seq.features, x);

        let seq = pad_to_fixed(&x, 4).unwrap();
        assert_eq!(seq.features.row(3), &[0.0, 0.0]);

        assert!(matches!(
            pad_to_fixed(&x, 2),
            Err(Error::ExceedsDuration { snippets: 3, duration: 2 })
        ));
    }

    #[test]
    fn stream_concat() {
        let r = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let f = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(concat_streams(&r, &f).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = Tensor::zeros(vec![1, 2]);
        let out = concat_streams(&r, &z).unwrap();
        assert_eq!(&out.row(0)[2..], &[0.0, 0.0]);

        let wide = Tensor::zeros(vec![2, 1024]);
        assert_eq!(concat_streams(&wide, &wide).unwrap().cols(), 2048);

        assert!(concat_streams(&r, &Tensor::zeros(vec![1, 3])).is_err());
    }

    #[test]
    fn pooling_preserves_unit_variance_scale() {
        let frames = Tensor::new(vec![10, 1], (0..10).map(f64::from).collect()).unwrap();
        let plan = plan_snippets(11, 4, 2).unwrap();
        let pooled = pool_snippets(&frames, &plan).unwrap();
        // four-frame snippets: sums 6, 14, 22, 30 over sqrt(4)
        for (got, want) in pooled.data().iter().zip([3.0, 7.0, 11.0, 15.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn spans_stay_in_range_and_overlap(frames in 10usize..3000, s in 1usize..40, d_frac in 0.0f64..1.0) {
            let overlap = ((s as f64) * d_frac) as usize % s;
            prop_assume!(frames > s);
            let p = plan_snippets(frames, s, overlap).unwrap();
            prop_assert!(p.count >= 1);
            for t in 0..p.count {
                let (a, b) = p.timestamp_to_frames(t).unwrap();
                prop_assert!(b < p.effective_frames);
                prop_assert_eq!(b - a + 1, s);
                if t > 0 {
                    let (_, prev_end) = p.timestamp_to_frames(t - 1).unwrap();
                    prop_assert_eq!(prev_end + 1 - a, overlap);
                }
            }
            // no room for one more snippet
            prop_assert!(p.count * p.stride() + s > p.effective_frames);
        }

        #[test]
        fn padding_keeps_prefix(t in 1usize..20, extra in 0usize..10, seed in 0u64..1000) {
            let data: Vec<f64> = (0..t * 3).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 - 48.0).collect();
            let x = Tensor::new(vec![t, 3], data).unwrap();
            let seq = pad_to_fixed(&x, t + extra).unwrap();
            prop_assert_eq!(&seq.features.data()[..t * 3], x.data());
            prop_assert!(seq.features.data()[t * 3..].iter().all(|&v| v == 0.0));
        }
    }
}
