//! Class-agnostic temporal proposals.
//!
//! Anchors of several lengths sit at every feature step. A small head scores
//! each anchor for activityness and regresses boundary offsets; decoded
//! segments are filtered, deduplicated, and padded to a fixed count so
//! downstream shapes never vary.
//!
//! The head sees the anchor's pooled feature flanked by pooled context on
//! each side. Inside-only pooling cannot tell an anchor sitting inside a
//! longer action (a negative) from one matching the action's extent (a
//! positive), and gives the regressor nothing to locate boundaries with;
//! the flanks carry exactly that information.

use crate::diffcore::{DiffError, Graph, Var};
use crate::heads::{classify_and_regress, HeadVars};
use crate::scalar::Scalar;
use crate::temporal::{
    decode_offsets, encode_offsets, nms_indices, tiou, OffsetPair, ScoredSegment,
    TemporalSegment,
};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorConfig {
    /// Anchor lengths in frames, ascending.
    pub scales: Vec<usize>,
    /// Frames between anchor centers; matches the backbone stride.
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { scales: vec![32, 64, 128, 256, 512], stride: 8 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProposalError {
    #[error("anchor scales must be positive and strictly ascending")]
    BadScales,
    #[error("anchor stride must be at least 1")]
    BadStride,
    #[error("no proposals to select from")]
    NoProposals,
    #[error(transparent)]
    Temporal(#[from] crate::temporal::TemporalError),
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), ProposalError> {
        if self.scales.is_empty() || self.scales[0] == 0 {
            return Err(ProposalError::BadScales);
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProposalError::BadScales);
        }
        if self.stride == 0 {
            return Err(ProposalError::BadStride);
        }
        Ok(())
    }
}

/// One anchor per (step position, scale), centered at `step * stride` and
/// clipped to the video extent. Ordering is position-major, then scale.
pub fn generate_anchors(
    num_steps: usize,
    num_frames: usize,
    config: &AnchorConfig,
) -> Result<Vec<TemporalSegment<f64>>, ProposalError> {
    config.validate()?;
    if num_steps == 0 || num_frames == 0 {
        return Err(ProposalError::NoProposals);
    }
    let extent = num_frames as f64;
    let mut anchors = Vec::with_capacity(num_steps * config.scales.len());
    for step in 0..num_steps {
        let center = (step * config.stride) as f64;
        for &scale in &config.scales {
            let half = scale as f64 / 2.0;
            let start = (center - half).max(0.0);
            let end = (center + half).min(extent);
            if start >= end {
                return Err(ProposalError::NoProposals);
            }
            anchors.push(TemporalSegment::new(start, end)?);
        }
    }
    Ok(anchors)
}

/// Everything the proposal stage produces for one query.
pub struct ProposalForward {
    /// `[A, 1]` activityness logits.
    pub logits: Var,
    /// `[A, 1]` sigmoid scores.
    pub scores: Var,
    /// `[A, 2]` regressed offsets.
    pub offsets: Var,
    /// Offset-decoded segments, clipped to the video, one per anchor.
    pub segments: Vec<TemporalSegment<f64>>,
    /// `[A, C]` features pooled over each decoded segment.
    pub feats: Var,
    /// How many decodes needed clamping (non-finite or degenerate output).
    pub clamped: usize,
}

/// Half-open step range covering a segment given the frames-per-step ratio.
/// Always non-empty and within `[0, num_steps)`.
pub fn step_range(seg: &TemporalSegment<f64>, stride: usize, num_steps: usize) -> (usize, usize) {
    let lo = (seg.start() / stride as f64).floor().max(0.0) as usize;
    let hi = (seg.end() / stride as f64).ceil() as usize;
    let lo = lo.min(num_steps - 1);
    let hi = hi.clamp(lo + 1, num_steps);
    (lo, hi)
}

/// Context ranges beside an inside range: half the anchor's width on each
/// side, clipped to the feature map. Either side may come back empty at a
/// video edge, which pools to a zero row.
pub fn flank_ranges(inside: (usize, usize), num_steps: usize) -> ((usize, usize), (usize, usize)) {
    let (lo, hi) = inside;
    let fl = ((hi - lo) / 2).max(1);
    let left = (lo.saturating_sub(fl), lo);
    let right = (hi, (hi + fl).min(num_steps));
    (left, right)
}

pub(crate) fn clamp_into_extent(seg: TemporalSegment<f64>, extent: f64) -> (TemporalSegment<f64>, bool) {
    match seg.clip_to_extent(extent) {
        Some(c) => {
            let moved = c.start() != seg.start() || c.end() != seg.end();
            (c, moved)
        }
        // Decoded fully outside: fall back to a minimal segment at the
        // nearer boundary.
        None => {
            let fallback = if seg.start() >= extent {
                TemporalSegment::new((extent - 1.0).max(0.0), extent)
            } else {
                TemporalSegment::new(0.0, 1.0f64.min(extent))
            };
            (fallback.expect("extent is positive"), true)
        }
    }
}

/// Scores and refines every anchor: pools the feature steps under the
/// anchor and its flanks, applies the head to the concatenation, decodes
/// offsets, then re-pools features over the refined segments. Boundary
/// choices are data (not differentiated); gradients flow through the
/// poolings and the head.
pub fn proposal_forward<F: Scalar>(
    g: &mut Graph<F>,
    feats: Var,
    anchors: &[TemporalSegment<f64>],
    head: &HeadVars,
    stride: usize,
    num_frames: usize,
) -> Result<ProposalForward, DiffError> {
    if anchors.is_empty() {
        return Err(DiffError::shape("proposal_forward", "no anchors".to_string()));
    }
    let num_steps = g.value(feats).rows();
    let anchor_ranges: Vec<(usize, usize)> = anchors
        .iter()
        .map(|a| step_range(a, stride, num_steps))
        .collect();
    let mut left_ranges = Vec::with_capacity(anchor_ranges.len());
    let mut right_ranges = Vec::with_capacity(anchor_ranges.len());
    for &inside in &anchor_ranges {
        let (left, right) = flank_ranges(inside, num_steps);
        left_ranges.push(left);
        right_ranges.push(right);
    }
    let pooled = g.pool_rows(feats, &anchor_ranges)?;
    let left = g.pool_rows(feats, &left_ranges)?;
    let right = g.pool_rows(feats, &right_ranges)?;
    let context = g.concat_cols(&[pooled, left, right])?;
    let out = classify_and_regress(g, context, head)?;
    let scores = g.sigmoid(out.cls_logits);

    let offset_values = g.value(out.offsets).clone();
    let mut segments = Vec::with_capacity(anchors.len());
    let mut clamped = 0;
    for (i, anchor) in anchors.iter().enumerate() {
        let pair = OffsetPair {
            d_center: Scalar::to_f64(offset_values.at(i, 0)),
            d_log_length: Scalar::to_f64(offset_values.at(i, 1)),
        };
        let (decoded, clamp_a) = decode_offsets(anchor, &pair);
        let (fitted, clamp_b) = clamp_into_extent(decoded, num_frames as f64);
        if clamp_a || clamp_b {
            clamped += 1;
        }
        segments.push(fitted);
    }
    let refined_ranges: Vec<(usize, usize)> = segments
        .iter()
        .map(|s| step_range(s, stride, num_steps))
        .collect();
    let refined = g.pool_rows(feats, &refined_ranges)?;
    Ok(ProposalForward {
        logits: out.cls_logits,
        scores,
        offsets: out.offsets,
        segments,
        feats: refined,
        clamped,
    })
}

/// Per-anchor training labels: positive above `pos_threshold` overlap or as
/// the best anchor for a ground-truth segment (so every reachable segment
/// gets supervision), negative at or below `neg_threshold`, ignored between.
pub struct AnchorTargets {
    /// 1.0, 0.0, or ignored (see masks).
    pub labels: Vec<f64>,
    pub offsets: Vec<OffsetPair<f64>>,
    pub cls_mask: Vec<bool>,
    pub reg_mask: Vec<bool>,
}

pub fn assign_targets(
    anchors: &[TemporalSegment<f64>],
    ground_truth: &[TemporalSegment<f64>],
    pos_threshold: f64,
    neg_threshold: f64,
) -> AnchorTargets {
    let a = anchors.len();
    let mut labels = vec![0.0; a];
    let mut offsets = vec![OffsetPair::zero(); a];
    let mut cls_mask = vec![true; a];
    let mut reg_mask = vec![false; a];
    let mut best_overlap = vec![0.0f64; a];
    let mut best_gt = vec![usize::MAX; a];
    for (i, anchor) in anchors.iter().enumerate() {
        for (k, gt) in ground_truth.iter().enumerate() {
            let o = tiou(anchor, gt);
            if o > best_overlap[i] {
                best_overlap[i] = o;
                best_gt[i] = k;
            }
        }
    }
    for (i, &overlap) in best_overlap.iter().enumerate() {
        if overlap >= pos_threshold {
            labels[i] = 1.0;
        } else if overlap > neg_threshold {
            cls_mask[i] = false; // ignore band
        }
    }
    // Every ground-truth segment recruits its best-overlapping anchor even
    // below the positive threshold, as long as they overlap at all. The
    // recruit still regresses toward its own best ground truth, which may be
    // a different segment than the one recruiting it.
    for gt in ground_truth {
        let mut best = 0.0;
        let mut arg = None;
        for (i, anchor) in anchors.iter().enumerate() {
            let o = tiou(anchor, gt);
            if o > best {
                best = o;
                arg = Some(i);
            }
        }
        if let Some(i) = arg {
            labels[i] = 1.0;
            cls_mask[i] = true;
        }
    }
    for i in 0..a {
        if labels[i] == 1.0 {
            reg_mask[i] = true;
            offsets[i] = encode_offsets(&ground_truth[best_gt[i]], &anchors[i]);
        }
    }
    AnchorTargets { labels, offsets, cls_mask, reg_mask }
}

/// Fixed-size slate of proposals for one phase.
pub struct ProposalBatch {
    pub segments: Vec<TemporalSegment<f64>>,
    pub scores: Vec<f64>,
    /// False on padding slots; padded slots repeat the top proposal and
    /// must stay out of every loss.
    pub valid: Vec<bool>,
    /// Index into the pre-selection candidate list per slot.
    pub source: Vec<usize>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelectConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// When fewer than this many survive the score filter, the top this-many
    /// by score are taken instead (degenerate-input guard).
    pub min_keep: usize,
    /// Slate size: 128 in training, 300 otherwise.
    pub slate: usize,
}

impl SelectConfig {
    pub fn train() -> Self {
        Self { score_threshold: 0.7, nms_threshold: 0.7, min_keep: 16, slate: 128 }
    }

    pub fn eval() -> Self {
        Self { slate: 300, ..Self::train() }
    }
}

/// Applies the selection policy: score filter (with top-k fallback), NMS,
/// then truncation or padding to the slate size. Survivors are sorted by
/// descending score before padding.
pub fn select_proposals(
    segments: &[TemporalSegment<f64>],
    scores: &[f64],
    config: &SelectConfig,
) -> Result<ProposalBatch, ProposalError> {
    if segments.is_empty() || segments.len() != scores.len() {
        return Err(ProposalError::NoProposals);
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_unstable_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then(segments[i].start().total_cmp(&segments[j].start()))
            .then(i.cmp(&j))
    });
    let mut picked: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| scores[i] >= config.score_threshold)
        .collect();
    if picked.len() < config.min_keep {
        picked = order.iter().copied().take(config.min_keep).collect();
    }
    let candidates: Vec<ScoredSegment<f64>> = picked
        .iter()
        .map(|&i| ScoredSegment::new(segments[i], scores[i]))
        .collect::<Result<_, _>>()?;
    let kept = nms_indices(&candidates, config.nms_threshold)?;
    let survivors: Vec<usize> = kept.into_iter().take(config.slate).map(|k| picked[k]).collect();
    if survivors.is_empty() {
        return Err(ProposalError::NoProposals);
    }
    let mut batch = ProposalBatch {
        segments: survivors.iter().map(|&i| segments[i]).collect(),
        scores: survivors.iter().map(|&i| scores[i]).collect(),
        valid: vec![true; survivors.len()],
        source: survivors.clone(),
    };
    while batch.len() < config.slate {
        batch.segments.push(batch.segments[0]);
        batch.scores.push(batch.scores[0]);
        batch.valid.push(false);
        batch.source.push(batch.source[0]);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{ParamStore, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(start: f64, end: f64) -> TemporalSegment<f64> {
        TemporalSegment::new(start, end).unwrap()
    }

    #[test]
    fn anchor_count_is_positions_times_scales() {
        let config = AnchorConfig { scales: vec![8, 16, 32], stride: 4 };
        let anchors = generate_anchors(4, 16, &config).unwrap();
        assert_eq!(anchors.len(), 12);
        // position-major, then scale; clipping preserves the count
        assert_eq!(anchors[0], seg(0.0, 4.0));
        assert_eq!(anchors[2], seg(0.0, 16.0));
        assert_eq!(anchors[3], seg(0.0, 8.0));
        assert_eq!(anchors[4], seg(0.0, 12.0));
    }

    #[test]
    fn anchors_clip_to_the_video() {
        let config = AnchorConfig { scales: vec![64], stride: 8 };
        let anchors = generate_anchors(3, 24, &config).unwrap();
        assert_eq!(anchors[0].start(), 0.0);
        assert_eq!(anchors[0].end(), 24.0_f64.min(32.0));
        // center 0 with length 64 clips to [0, 32] given enough extent
        let wide = generate_anchors(3, 1000, &config).unwrap();
        assert_eq!(wide[0].start(), 0.0);
        assert_eq!(wide[0].end(), 32.0);
    }

    #[test]
    fn anchor_generation_is_deterministic() {
        let config = AnchorConfig::default();
        let a = generate_anchors(96, 768, &config).unwrap();
        let b = generate_anchors(96, 768, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(AnchorConfig { scales: vec![], stride: 8 }.validate().is_err());
        assert!(AnchorConfig { scales: vec![32, 32], stride: 8 }.validate().is_err());
        assert!(AnchorConfig { scales: vec![0, 8], stride: 8 }.validate().is_err());
        assert!(AnchorConfig { scales: vec![8], stride: 0 }.validate().is_err());
    }

    #[test]
    fn step_ranges_stay_in_bounds_and_cover() {
        let r = step_range(&seg(0.0, 32.0), 8, 12);
        assert_eq!(r, (0, 4));
        let r = step_range(&seg(90.0, 96.0), 8, 12);
        assert_eq!(r, (11, 12));
        // segment past the feature map clamps to the last step
        let r = step_range(&seg(200.0, 230.0), 8, 12);
        assert_eq!(r, (11, 12));
        // tiny segment still covers one step
        let r = step_range(&seg(16.0, 16.5), 8, 12);
        assert_eq!(r, (2, 3));
    }

    fn prop_store(seed: u64, c: usize, hidden: usize, zero_final: bool) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = || rng.random::<f64>() * 0.4 - 0.2;
        // the head input is [inside, left flank, right flank]
        HeadVars::register(&mut store, "prop", 3 * c, hidden, &mut init).unwrap();
        if zero_final {
            for name in ["prop.cls.c1.weight", "prop.reg.c1.weight"] {
                let idx = store.index_of(name).unwrap();
                let zero = Tensor::zeros(store.tensor_at(idx).shape());
                *store.tensor_at_mut(idx) = zero;
            }
        }
        store
    }

    #[test]
    fn zeroed_head_scores_half_and_keeps_anchors() {
        let store = prop_store(1, 4, 3, true);
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Tensor::new(&[12, 4], (0..48).map(|_| rng.random::<f64>()).collect()).unwrap();
        let feats = tape.graph.leaf(feats);
        let head = HeadVars::bind(&mut tape, "prop").unwrap();
        let anchors = generate_anchors(12, 96, &AnchorConfig { scales: vec![16, 32], stride: 8 })
            .unwrap();
        let out =
            proposal_forward(&mut tape.graph, feats, &anchors, &head, 8, 96).unwrap();
        for &s in tape.graph.value(out.scores).data() {
            assert_eq!(s, 0.5);
        }
        assert_eq!(out.clamped, 0);
        for (decoded, anchor) in out.segments.iter().zip(&anchors) {
            assert_eq!(decoded, anchor);
        }
    }

    #[test]
    fn pooled_features_of_constant_video_equal_the_step_feature() {
        let store = prop_store(3, 3, 2, true);
        let mut tape = Tape::new(&store);
        let row = [0.4, -0.7, 1.1];
        let feats = Tensor::from_rows(&vec![row.to_vec(); 10]).unwrap();
        let feats = tape.graph.leaf(feats);
        let head = HeadVars::bind(&mut tape, "prop").unwrap();
        let anchors = vec![seg(0.0, 40.0), seg(16.0, 80.0)];
        let out = proposal_forward(&mut tape.graph, feats, &anchors, &head, 8, 80).unwrap();
        let pooled = tape.graph.value(out.feats);
        for r in 0..2 {
            for c in 0..3 {
                assert!((pooled.at(r, c) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_anchor_gets_positive_label_with_zero_offsets() {
        let anchors = vec![seg(10.0, 20.0), seg(50.0, 60.0)];
        let gts = vec![seg(10.0, 20.0)];
        let t = assign_targets(&anchors, &gts, 0.7, 0.3);
        assert_eq!(t.labels, vec![1.0, 0.0]);
        assert!(t.cls_mask[0] && t.cls_mask[1]);
        assert!(t.reg_mask[0] && !t.reg_mask[1]);
        assert_eq!(t.offsets[0], OffsetPair::zero());
    }

    #[test]
    fn every_ground_truth_recruits_its_best_anchor() {
        // Best overlap is 0.6, below the positive threshold, yet the anchor
        // must still be recruited.
        let anchors = vec![seg(0.0, 10.0), seg(12.0, 30.0)];
        let gts = vec![seg(13.0, 25.0)];
        let t = assign_targets(&anchors, &gts, 0.7, 0.3);
        assert_eq!(t.labels[1], 1.0);
        assert!(t.cls_mask[1]);
        assert!(t.reg_mask[1]);
        let expected = encode_offsets(&gts[0], &anchors[1]);
        assert_eq!(t.offsets[1], expected);
    }

    #[test]
    fn uncoverable_ground_truth_recruits_nobody() {
        let anchors = vec![seg(0.0, 10.0)];
        let gts = vec![seg(500.0, 600.0)];
        let t = assign_targets(&anchors, &gts, 0.7, 0.3);
        assert_eq!(t.labels, vec![0.0]);
        assert!(t.cls_mask[0]);
        assert!(!t.reg_mask[0]);
    }

    #[test]
    fn middle_band_is_ignored() {
        // anchor 0 equals the ground truth, anchor 1 overlaps at exactly
        // 0.5 (ignore band), anchor 2 at 10/11 (plain positive)
        let anchors = vec![seg(0.0, 10.0), seg(0.0, 20.0), seg(0.0, 11.0)];
        let gts = vec![seg(0.0, 10.0)];
        let t = assign_targets(&anchors, &gts, 0.7, 0.3);
        assert_eq!(t.labels[0], 1.0);
        assert!(!t.cls_mask[1], "0.5 overlap sits in the ignore band");
        assert!((tiou(&anchors[2], &gts[0]) - 10.0 / 11.0).abs() < 1e-12);
        assert_eq!(t.labels[2], 1.0);
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = vec![seg(0.0, 10.0), seg(5.0, 25.0)];
        let t = assign_targets(&anchors, &[], 0.7, 0.3);
        assert_eq!(t.labels, vec![0.0, 0.0]);
        assert!(t.cls_mask.iter().all(|&m| m));
        assert!(t.reg_mask.iter().all(|&m| !m));
    }

    #[test]
    fn selection_filters_suppresses_and_pads() {
        let config = SelectConfig { score_threshold: 0.7, nms_threshold: 0.5, min_keep: 2, slate: 4 };
        let segments = vec![
            seg(0.0, 10.0),   // high score
            seg(0.5, 10.5),   // heavy overlap with the first, suppressed
            seg(40.0, 50.0),  // separate, above threshold
            seg(80.0, 90.0),  // below score threshold
        ];
        let scores = vec![0.95, 0.9, 0.8, 0.3];
        let batch = select_proposals(&segments, &scores, &config).unwrap();
        assert_eq!(batch.len(), 4);
        assert_eq!(batch.valid, vec![true, true, false, false]);
        assert_eq!(batch.source[0], 0);
        assert_eq!(batch.source[1], 2);
        // padding repeats the top slot
        assert_eq!(batch.segments[2], batch.segments[0]);
        assert_eq!(batch.source[3], 0);
        assert!(batch.scores.windows(2).take(1).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn low_scores_engage_the_fallback() {
        let config = SelectConfig { score_threshold: 0.7, nms_threshold: 0.9, min_keep: 3, slate: 3 };
        let segments = vec![seg(0.0, 10.0), seg(20.0, 30.0), seg(40.0, 50.0), seg(60.0, 70.0)];
        let scores = vec![0.1, 0.4, 0.2, 0.3];
        let batch = select_proposals(&segments, &scores, &config).unwrap();
        assert_eq!(batch.valid_count(), 3);
        assert_eq!(batch.source, vec![1, 3, 2]);
    }

    #[test]
    fn oversupply_truncates_to_the_slate() {
        let config = SelectConfig { score_threshold: 0.0, nms_threshold: 1.0, min_keep: 1, slate: 5 };
        let segments: Vec<_> = (0..20).map(|i| seg(i as f64 * 100.0, i as f64 * 100.0 + 10.0)).collect();
        let scores: Vec<f64> = (0..20).map(|i| 1.0 - i as f64 * 0.01).collect();
        let batch = select_proposals(&segments, &scores, &config).unwrap();
        assert_eq!(batch.len(), 5);
        assert!(batch.valid.iter().all(|&v| v));
        assert_eq!(batch.source, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(select_proposals(&[], &[], &SelectConfig::train()).is_err());
    }
}
