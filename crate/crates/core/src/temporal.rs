//! Temporal interval arithmetic shared by proposal generation, matching and
//! evaluation: segments, overlap, greedy suppression, offset coding and
//! multi-scale window enumeration.
//!
//! Everything here is pure geometry on the frame axis. Frame indices are
//! non-negative reals so the same code serves integer frame counts and
//! second-based annotations converted through a frame rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TemporalError {
    #[error("segment [{start}, {end}) must be finite, non-negative and non-empty")]
    InvalidSegment { start: f64, end: f64 },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("suppression threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("window overlap fraction {0} outside [0, 1)")]
    InvalidOverlap(f64),
    #[error("no window lengths given")]
    NoWindowLengths,
    #[error("window length must be positive")]
    ZeroWindowLength,
    #[error("video extent must be positive")]
    EmptyExtent,
}

/// Half-open interval `[start, end)` on the frame axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSegment<F> {
    start: F,
    end: F,
}

impl<F: Scalar> TemporalSegment<F> {
    pub fn new(start: F, end: F) -> Result<Self, TemporalError> {
        if !start.is_finite() || !end.is_finite() || start < F::zero() || start >= end {
            return Err(TemporalError::InvalidSegment {
                start: start.to_f64(),
                end: end.to_f64(),
            });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> F {
        self.start
    }

    pub fn end(&self) -> F {
        self.end
    }

    pub fn length(&self) -> F {
        self.end - self.start
    }

    pub fn center(&self) -> F {
        (self.start + self.end) / F::from_f64(2.0)
    }

    pub fn shift(&self, delta: F) -> Result<Self, TemporalError> {
        Self::new(self.start + delta, self.end + delta)
    }

    /// Intersection with `[0, extent]`, or `None` when nothing is left.
    pub fn clip_to_extent(&self, extent: F) -> Option<Self> {
        let start = self.start.max(F::zero());
        let end = self.end.min(extent);
        if start < end {
            Some(Self { start, end })
        } else {
            None
        }
    }

    /// Lossless precision change through `f64`.
    pub fn cast<G: Scalar>(&self) -> TemporalSegment<G> {
        TemporalSegment {
            start: G::from_f64(self.start.to_f64()),
            end: G::from_f64(self.end.to_f64()),
        }
    }
}

/// Segment with a confidence in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment<F> {
    segment: TemporalSegment<F>,
    score: F,
}

impl<F: Scalar> ScoredSegment<F> {
    pub fn new(segment: TemporalSegment<F>, score: F) -> Result<Self, TemporalError> {
        if !score.is_finite() || score < F::zero() || score > F::one() {
            return Err(TemporalError::InvalidScore(score.to_f64()));
        }
        Ok(Self { segment, score })
    }

    pub fn segment(&self) -> &TemporalSegment<F> {
        &self.segment
    }

    pub fn score(&self) -> F {
        self.score
    }
}

/// Temporal intersection over union of two segments. Zero when they are
/// disjoint or merely share a boundary.
pub fn tiou<F: Scalar>(a: &TemporalSegment<F>, b: &TemporalSegment<F>) -> F {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(F::zero());
    if inter == F::zero() {
        return F::zero();
    }
    inter / (a.length() + b.length() - inter)
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score; ties are broken by ascending
/// start, then by original index, so the kept set does not depend on input
/// order beyond those keys. A survivor suppresses every remaining candidate
/// whose tiou with it exceeds `threshold` (strictly). Kept segments are
/// returned in visitation order.
pub fn nms<F: Scalar>(
    candidates: &[ScoredSegment<F>],
    threshold: F,
) -> Result<Vec<ScoredSegment<F>>, TemporalError> {
    Ok(nms_indices(candidates, threshold)?
        .into_iter()
        .map(|i| candidates[i])
        .collect())
}

/// Like [`nms`] but returns the original indices of the kept candidates, in
/// visitation (descending-score) order.
pub fn nms_indices<F: Scalar>(
    candidates: &[ScoredSegment<F>],
    threshold: F,
) -> Result<Vec<usize>, TemporalError> {
    if !threshold.is_finite() || threshold < F::zero() || threshold > F::one() {
        return Err(TemporalError::InvalidThreshold(threshold.to_f64()));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_unstable_by(|&i, &j| {
        let a = &candidates[i];
        let b = &candidates[j];
        b.score
            .total_cmp(&a.score)
            .then(a.segment.start.total_cmp(&b.segment.start))
            .then(i.cmp(&j))
    });
    let mut alive = vec![true; candidates.len()];
    let mut kept = Vec::new();
    for pos in 0..order.len() {
        let i = order[pos];
        if !alive[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if alive[j] && tiou(&candidates[i].segment, &candidates[j].segment) > threshold {
                alive[j] = false;
            }
        }
    }
    Ok(kept)
}

/// Relative coordinates of a target segment with respect to an anchor:
/// center shift in anchor lengths and log length ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetPair<F> {
    pub d_center: F,
    pub d_log_length: F,
}

impl<F: Scalar> OffsetPair<F> {
    pub fn zero() -> Self {
        Self {
            d_center: F::zero(),
            d_log_length: F::zero(),
        }
    }
}

pub fn encode_offsets<F: Scalar>(
    target: &TemporalSegment<F>,
    anchor: &TemporalSegment<F>,
) -> OffsetPair<F> {
    OffsetPair {
        d_center: (target.center() - anchor.center()) / anchor.length(),
        d_log_length: (target.length() / anchor.length()).ln(),
    }
}

/// Shortest decoded length, in frames. Keeps wild regressions from producing
/// empty segments.
pub const MIN_DECODED_LENGTH: f64 = 1.0;

/// Inverse of [`encode_offsets`]. The boolean is `true` when the decoded
/// segment had to be repaired: non-positive or non-finite length is clamped
/// to [`MIN_DECODED_LENGTH`], and a segment starting below zero is shifted
/// to start at zero with its length preserved.
pub fn decode_offsets<F: Scalar>(
    anchor: &TemporalSegment<F>,
    offsets: &OffsetPair<F>,
) -> (TemporalSegment<F>, bool) {
    let mut clamped = false;
    let mut center = anchor.center() + offsets.d_center * anchor.length();
    let mut length = anchor.length() * offsets.d_log_length.exp();
    let min_len = F::from_f64(MIN_DECODED_LENGTH);
    if !length.is_finite() || length < min_len {
        length = min_len;
        clamped = true;
    }
    if !center.is_finite() {
        center = anchor.center();
        clamped = true;
    }
    let half = length / F::from_f64(2.0);
    let (start, end) = if center - half < F::zero() {
        clamped = true;
        (F::zero(), length)
    } else {
        (center - half, center + half)
    };
    let segment = TemporalSegment { start, end };
    (segment, clamped)
}

/// Multi-scale sliding windows over a video of `num_frames` frames.
///
/// For every window length that fits, windows start at multiples of
/// `length * (1 - overlap)`; a final window flush with the end of the video
/// is added when the regular grid does not already reach it. When no length
/// fits the whole video becomes the single window. Exact duplicates are
/// removed, first occurrence wins.
pub fn sliding_windows<F: Scalar>(
    num_frames: usize,
    window_lengths: &[usize],
    overlap: F,
) -> Result<Vec<TemporalSegment<F>>, TemporalError> {
    if num_frames == 0 {
        return Err(TemporalError::EmptyExtent);
    }
    if window_lengths.is_empty() {
        return Err(TemporalError::NoWindowLengths);
    }
    if window_lengths.contains(&0) {
        return Err(TemporalError::ZeroWindowLength);
    }
    if !overlap.is_finite() || overlap < F::zero() || overlap >= F::one() {
        return Err(TemporalError::InvalidOverlap(overlap.to_f64()));
    }

    let extent = F::from_usize(num_frames);
    let mut windows = Vec::new();
    let mut any_fit = false;
    for &len in window_lengths {
        if len > num_frames {
            continue;
        }
        any_fit = true;
        let length = F::from_usize(len);
        let stride = length * (F::one() - overlap);
        let mut reached = F::zero();
        let mut i = 0usize;
        loop {
            let start = F::from_usize(i) * stride;
            if start + length > extent {
                break;
            }
            windows.push(TemporalSegment {
                start,
                end: start + length,
            });
            reached = start + length;
            i += 1;
        }
        if reached < extent {
            windows.push(TemporalSegment {
                start: extent - length,
                end: extent,
            });
        }
    }
    if !any_fit {
        windows.push(TemporalSegment {
            start: F::zero(),
            end: extent,
        });
    }

    let mut seen = std::collections::BTreeSet::new();
    windows.retain(|w| seen.insert((w.start.to_f64().to_bits(), w.end.to_f64().to_bits())));
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn seg(start: f64, end: f64) -> TemporalSegment<f64> {
        TemporalSegment::new(start, end).unwrap()
    }

    fn scored(start: f64, end: f64, score: f64) -> ScoredSegment<f64> {
        ScoredSegment::new(seg(start, end), score).unwrap()
    }

    #[test]
    fn segment_rejects_bad_coordinates() {
        assert!(TemporalSegment::new(3.0, 3.0).is_err());
        assert!(TemporalSegment::new(5.0, 2.0).is_err());
        assert!(TemporalSegment::new(-1.0, 2.0).is_err());
        assert!(TemporalSegment::new(f64::NAN, 2.0).is_err());
        assert!(TemporalSegment::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn score_must_be_a_probability() {
        assert!(ScoredSegment::new(seg(0.0, 1.0), 1.2).is_err());
        assert!(ScoredSegment::new(seg(0.0, 1.0), -0.1).is_err());
        assert!(ScoredSegment::new(seg(0.0, 1.0), f64::NAN).is_err());
    }

    #[test]
    fn tiou_matches_hand_computed_values() {
        assert_relative_eq!(tiou(&seg(0.0, 10.0), &seg(5.0, 15.0)), 1.0 / 3.0);
        assert_relative_eq!(tiou(&seg(0.0, 17.0), &seg(3.0, 20.0)), 0.7);
        assert_eq!(tiou(&seg(0.0, 10.0), &seg(10.0, 20.0)), 0.0);
        assert_eq!(tiou(&seg(0.0, 10.0), &seg(12.0, 20.0)), 0.0);
        assert_eq!(tiou(&seg(2.0, 8.0), &seg(2.0, 8.0)), 1.0);
    }

    #[test]
    fn nms_keeps_best_and_disjoint() {
        let cands = vec![
            scored(0.0, 10.0, 0.9),
            scored(1.0, 11.0, 0.8),
            scored(20.0, 30.0, 0.7),
        ];
        let kept = nms(&cands, 0.5).unwrap();
        assert_eq!(kept, vec![cands[0], cands[2]]);
    }

    #[test]
    fn nms_suppression_is_strict() {
        // tiou of these two is exactly 0.7; at threshold 0.7 both survive.
        let cands = vec![scored(0.0, 17.0, 0.9), scored(3.0, 20.0, 0.8)];
        assert_eq!(nms(&cands, 0.7).unwrap().len(), 2);
        assert_eq!(nms(&cands, 0.6).unwrap().len(), 1);
    }

    #[test]
    fn nms_breaks_ties_by_start_then_index() {
        let cands = vec![
            scored(5.0, 15.0, 0.8),
            scored(0.0, 10.0, 0.8),
            scored(0.0, 10.0, 0.8),
        ];
        // Suppression is strict, so at threshold 1.0 nothing is dropped and
        // the visitation order itself becomes observable.
        let kept = nms(&cands, 1.0).unwrap();
        assert_eq!(kept, vec![cands[1], cands[2], cands[0]]);
    }

    #[test]
    fn nms_of_nothing_is_nothing() {
        assert!(nms::<f64>(&[], 0.5).unwrap().is_empty());
    }

    #[test]
    fn nms_rejects_bad_threshold() {
        assert!(nms(&[scored(0.0, 1.0, 0.5)], 1.5).is_err());
        assert!(nms(&[scored(0.0, 1.0, 0.5)], -0.1).is_err());
    }

    #[test]
    fn offsets_match_hand_computed_values() {
        let o = encode_offsets(&seg(2.0, 8.0), &seg(0.0, 10.0));
        assert_relative_eq!(o.d_center, 0.0);
        assert_relative_eq!(o.d_log_length, -0.510825623765990683);

        let o = encode_offsets(&seg(12.0, 24.0), &seg(10.0, 20.0));
        assert_relative_eq!(o.d_center, 0.3);
        assert_relative_eq!(o.d_log_length, 0.182321556793954626);
    }

    #[test]
    fn decode_is_exact_inverse_on_identity() {
        let anchor = seg(10.0, 20.0);
        let (back, clamped) = decode_offsets(&anchor, &OffsetPair::zero());
        assert!(!clamped);
        assert_eq!(back, anchor);
    }

    #[test]
    fn decode_clamps_degenerate_lengths() {
        let anchor = seg(10.0, 20.0);
        let (back, clamped) = decode_offsets(
            &anchor,
            &OffsetPair {
                d_center: 0.0,
                d_log_length: -800.0,
            },
        );
        assert!(clamped);
        assert_relative_eq!(back.length(), MIN_DECODED_LENGTH);
    }

    #[test]
    fn decode_shifts_segments_that_would_start_below_zero() {
        let anchor = seg(0.0, 10.0);
        let (back, clamped) = decode_offsets(
            &anchor,
            &OffsetPair {
                d_center: -2.0,
                d_log_length: 0.0,
            },
        );
        assert!(clamped);
        assert_eq!(back.start(), 0.0);
        assert_relative_eq!(back.length(), 10.0);
    }

    #[test]
    fn windows_tile_with_quarter_stride() {
        let w = sliding_windows::<f64>(1024, &[256], 0.75).unwrap();
        assert_eq!(w.len(), 13);
        for (i, win) in w.iter().enumerate() {
            assert_relative_eq!(win.start(), 64.0 * i as f64);
            assert_relative_eq!(win.length(), 256.0);
        }
        assert_eq!(w.last().unwrap().end(), 1024.0);
    }

    #[test]
    fn windows_add_trailing_window_when_grid_misses_the_end() {
        let w = sliding_windows::<f64>(1000, &[256], 0.75).unwrap();
        assert_eq!(w.len(), 13);
        assert_eq!(w[11].start(), 704.0);
        assert_eq!(w[12], seg(744.0, 1000.0));
    }

    #[test]
    fn windows_fall_back_to_whole_video() {
        let w = sliding_windows::<f64>(100, &[256, 512, 768], 0.75).unwrap();
        assert_eq!(w, vec![seg(0.0, 100.0)]);
    }

    #[test]
    fn windows_are_deduplicated_across_lengths() {
        let w = sliding_windows::<f64>(256, &[256, 256], 0.75).unwrap();
        assert_eq!(w, vec![seg(0.0, 256.0)]);
    }

    #[test]
    fn every_fitting_length_reaches_the_video_end() {
        let lengths = [256usize, 512, 768];
        let w = sliding_windows::<f64>(3000, &lengths, 0.75).unwrap();
        for &len in &lengths {
            assert!(w
                .iter()
                .any(|s| s.length() == len as f64 && s.end() == 3000.0));
        }
    }

    // Reference implementation used only by the tests below: repeatedly pick
    // the best remaining candidate by (score, start, index) and drop whatever
    // overlaps it too much.
    fn nms_oracle(cands: &[ScoredSegment<f64>], threshold: f64) -> Vec<ScoredSegment<f64>> {
        let mut remaining: Vec<(usize, ScoredSegment<f64>)> =
            cands.iter().copied().enumerate().collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (bi, bs) = &remaining[best];
                let (ci, cs) = &remaining[i];
                let better = match cs.score().partial_cmp(&bs.score()).unwrap() {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => {
                        match bs.segment().start().partial_cmp(&cs.segment().start()).unwrap() {
                            std::cmp::Ordering::Greater => true,
                            std::cmp::Ordering::Less => false,
                            std::cmp::Ordering::Equal => ci < bi,
                        }
                    }
                };
                if better {
                    best = i;
                }
            }
            let (_, winner) = remaining.remove(best);
            kept.push(winner);
            remaining.retain(|(_, c)| tiou(winner.segment(), c.segment()) <= threshold);
        }
        kept
    }

    proptest! {
        #[test]
        fn tiou_is_symmetric_and_bounded(
            a0 in 0.0f64..1e5, al in 1e-3f64..1e4,
            b0 in 0.0f64..1e5, bl in 1e-3f64..1e4,
        ) {
            let a = seg(a0, a0 + al);
            let b = seg(b0, b0 + bl);
            let ab = tiou(&a, &b);
            let ba = tiou(&b, &a);
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn nms_agrees_with_oracle(
            raw in prop::collection::vec((0.0f64..500.0, 1.0f64..120.0, 0.0f64..1.0), 0..12),
            threshold in 0.0f64..1.0,
        ) {
            let cands: Vec<_> = raw
                .iter()
                .map(|&(s, l, sc)| scored(s, s + l, sc))
                .collect();
            prop_assert_eq!(nms(&cands, threshold).unwrap(), nms_oracle(&cands, threshold));
        }

        #[test]
        fn offsets_round_trip(
            a0 in 0.0f64..1e4, al in 1.0f64..1e3,
            t0 in 0.0f64..1e4, tl in 1.0f64..1e3,
        ) {
            let anchor = seg(a0, a0 + al);
            let target = seg(t0, t0 + tl);
            let (back, _) = decode_offsets(&anchor, &encode_offsets(&target, &anchor));
            prop_assert!((back.start() - target.start()).abs() <= 1e-9 * target.end().max(1.0));
            prop_assert!((back.end() - target.end()).abs() <= 1e-9 * target.end().max(1.0));
        }

        #[test]
        fn windows_cover_and_fit(
            num_frames in 1usize..4000,
            overlap in 0.0f64..0.9,
        ) {
            let w = sliding_windows(num_frames, &[256, 512, 768], overlap).unwrap();
            prop_assert!(!w.is_empty());
            let extent = num_frames as f64;
            for win in &w {
                prop_assert!(win.start() >= 0.0 && win.end() <= extent + 1e-9);
            }
            prop_assert!(w.iter().any(|s| s.start() == 0.0));
            prop_assert!(w.iter().any(|s| (s.end() - extent).abs() < 1e-9));
        }
    }
}
