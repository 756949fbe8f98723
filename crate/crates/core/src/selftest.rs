//! Brute-force cross-checks of the numeric plumbing, callable from tests and
//! from the command line.
//!
//! Each check pits a production code path against an oracle written straight
//! from the definition: exhaustive greedy suppression, per-prefix PR
//! enumeration, closed-form codec inversion, zeroed-projection identities.
//! Oracles stay slow and obvious on purpose; they share no code with what
//! they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{mutual_enhance, pairwise_match, progressive_align};
use crate::diffcore::{Graph, Tape, Tensor};
use crate::engine::PredictionSet;
use crate::eval::episode_ap;
use crate::features::BackboneKind;
use crate::heads::{joint_loss, LossTargets};
use crate::model::{bind_model, build_store, ModelConfig};
use crate::proposals::AnchorConfig;
use crate::temporal::{
    decode_offsets, encode_offsets, nms_indices, tiou, ScoredSegment, TemporalSegment,
};

/// One check's verdict: the largest deviation seen against its tolerance.
/// Exact checks carry a tolerance of zero.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Exhaustive greedy suppression: repeatedly scan every surviving candidate
/// for the best (score, start, index) key instead of sorting once.
pub fn oracle_nms(candidates: &[ScoredSegment<f64>], threshold: f64) -> Vec<usize> {
    let mut alive = vec![true; candidates.len()];
    let mut kept = Vec::new();
    loop {
        let mut pick: Option<usize> = None;
        for (i, c) in candidates.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            let better = match pick {
                None => true,
                Some(p) => {
                    let b = &candidates[p];
                    c.score() > b.score()
                        || (c.score() == b.score()
                            && (c.segment().start() < b.segment().start()
                                || (c.segment().start() == b.segment().start() && i < p)))
                }
            };
            if better {
                pick = Some(i);
            }
        }
        let Some(i) = pick else { break };
        alive[i] = false;
        kept.push(i);
        for (j, c) in candidates.iter().enumerate() {
            if alive[j] && tiou(candidates[i].segment(), c.segment()) > threshold {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Average precision from first principles: matching is recomputed from
/// scratch for every prefix of the ranking and the interpolated curve is
/// integrated directly from its definition. `None` without ground truth.
pub fn oracle_ap(
    predictions: &[ScoredSegment<f64>],
    gts: &[TemporalSegment<f64>],
    threshold: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &predictions[i];
        let b = &predictions[j];
        b.score()
            .total_cmp(&a.score())
            .then(a.segment().start().total_cmp(&b.segment().start()))
            .then(a.segment().end().total_cmp(&b.segment().end()))
            .then(i.cmp(&j))
    });
    let tp_at = |k: usize| -> usize {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for &i in &order[..k] {
            let mut best: Option<(f64, usize)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if !used[gi] {
                    let o = tiou(predictions[i].segment(), gt);
                    if o > threshold && best.is_none_or(|(bo, _)| o > bo) {
                        best = Some((o, gi));
                    }
                }
            }
            if let Some((_, gi)) = best {
                used[gi] = true;
                tp += 1;
            }
        }
        tp
    };
    let n = predictions.len();
    let g = gts.len() as f64;
    let recall = |k: usize| tp_at(k) as f64 / g;
    let precision = |k: usize| tp_at(k) as f64 / k as f64;
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 1..=n {
        let r = recall(k);
        if r <= prev {
            continue;
        }
        let mut p_int: f64 = 0.0;
        for j in 1..=n {
            if recall(j) >= r {
                p_int = p_int.max(precision(j));
            }
        }
        ap += (r - prev) * p_int;
        prev = r;
    }
    Some(ap)
}

fn random_scored(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredSegment<f64>> {
    let mut out: Vec<ScoredSegment<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let start = rng.random_range(0.0..100.0);
        let len = rng.random_range(0.5..30.0);
        // duplicate an earlier score now and then to exercise tie handling
        let score = if i > 0 && rng.random_bool(0.2) {
            out[rng.random_range(0..i)].score()
        } else {
            rng.random_range(0.01..0.99)
        };
        out.push(ScoredSegment::new(TemporalSegment::new(start, start + len).unwrap(), score).unwrap());
    }
    out
}

/// Suppression against the exhaustive oracle, up to 50 segments per case.
pub fn check_nms(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let n = rng.random_range(0..=50);
        let candidates = random_scored(&mut rng, n);
        let threshold = rng.random_range(0.1..0.9);
        let fast = nms_indices(&candidates, threshold).expect("valid threshold");
        if fast != oracle_nms(&candidates, threshold) {
            mismatches += 1;
        }
    }
    CheckOutcome { name: "nms_vs_exhaustive", cases, worst: mismatches as f64, tolerance: 0.0 }
}

/// Episode AP against per-prefix enumeration, up to 6 predictions and 3
/// ground-truth segments per case.
pub fn check_ap(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(0..=6);
        let preds = random_scored(&mut rng, n);
        let gts: Vec<TemporalSegment<f64>> = (0..rng.random_range(1..=3))
            .map(|_| {
                let start = rng.random_range(0.0..80.0);
                let len = rng.random_range(2.0..30.0);
                TemporalSegment::new(start, start + len).unwrap()
            })
            .collect();
        let threshold = rng.random_range(0.2..0.8);
        let set = PredictionSet { predictions: preds.clone() };
        let got = episode_ap(&set, &gts, threshold).expect("ground truth present");
        let want = oracle_ap(&preds, &gts, threshold).expect("ground truth present");
        worst = worst.max((got - want).abs());
    }
    CheckOutcome { name: "ap_vs_enumeration", cases, worst, tolerance: 1e-9 }
}

/// Offset codec inversion: encode against a random anchor, decode, compare
/// endpoints relatively.
pub fn check_offsets(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let a0: f64 = rng.random_range(0.0..100.0);
        let anchor = TemporalSegment::new(a0, a0 + rng.random_range(1.0..50.0)).unwrap();
        let t0: f64 = rng.random_range(0.0..100.0);
        let target = TemporalSegment::new(t0, t0 + rng.random_range(1.5..50.0)).unwrap();
        let enc = encode_offsets(&target, &anchor);
        let (back, clamped) = decode_offsets(&anchor, &enc);
        assert!(!clamped, "round trip of a real segment never needs repair");
        let scale = target.start().abs().max(target.end().abs()).max(1.0);
        let err = (back.start() - target.start())
            .abs()
            .max((back.end() - target.end()).abs())
            / scale;
        worst = worst.max(err);
    }
    CheckOutcome { name: "offset_round_trip", cases, worst, tolerance: 1e-9 }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .expect("shape matches data")
}

/// Match weights stay inside `[-0.5, 0.5]` on random inputs.
pub fn check_match_range(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (s, t) = (rng.random_range(1..=4), rng.random_range(1..=3));
        let (r, c) = (rng.random_range(1..=6), rng.random_range(2..=8));
        let mut g: Graph<f64> = Graph::new();
        let p_n = g.leaf(random_tensor(&mut rng, r, c));
        let m_qs = g.leaf(random_tensor(&mut rng, s * t, c));
        let w = pairwise_match(&mut g, p_n, m_qs, s, t).expect("shapes agree");
        for &v in g.value(w.var).data() {
            worst = worst.max(v.abs() - 0.5);
        }
    }
    CheckOutcome { name: "match_weights_range", cases, worst: worst.max(0.0), tolerance: 0.0 }
}

/// A proposal identical to a support descriptor matches at 0.5.
pub fn check_match_self(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (s, t) = (rng.random_range(1..=4), rng.random_range(1..=3));
        let c = rng.random_range(2..=8);
        // every part of support 0 is the same row, and proposal 0 copies it
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut support_rows = random_tensor(&mut rng, s * t, c);
        for part in 0..t {
            support_rows.data_mut()[part * c..(part + 1) * c].copy_from_slice(&v);
        }
        let mut proposals = random_tensor(&mut rng, 3, c);
        proposals.data_mut()[..c].copy_from_slice(&v);
        let mut g: Graph<f64> = Graph::new();
        let p_n = g.leaf(proposals);
        let m_qs = g.leaf(support_rows);
        let w = pairwise_match(&mut g, p_n, m_qs, s, t).expect("shapes agree");
        // weights are [S, R]; support 0 against proposal 0
        worst = worst.max((g.value(w.var).data()[0] - 0.5).abs());
    }
    CheckOutcome { name: "match_weights_self", cases, worst, tolerance: 1e-9 }
}

/// With every alignment output projection zeroed, the whole enhancement and
/// alignment chain must return the query features bit for bit.
pub fn check_alignment_identity(seed: u64) -> CheckOutcome {
    let config = ModelConfig {
        channels: 8,
        input_channels: 8,
        backbone: BackboneKind::Passthrough,
        support_parts: 2,
        pam_depth: 3,
        attn_dim: 4,
        value_dim: 4,
        residual_reduction: 4,
        head_hidden: 4,
        logit_scale: false,
        anchors: AnchorConfig::default(),
    };
    let mut store = build_store::<f64>(&config, seed).expect("valid config");
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let aligner = name.starts_with("mem.") || name.starts_with("pam.");
        if aligner && name.contains(".c1.") {
            let idx = store.index_of(&name).expect("name came from the store");
            let zero = Tensor::zeros(store.tensor_at(idx).shape());
            *store.tensor_at_mut(idx) = zero;
        }
    }
    let mut tape = Tape::new(&store);
    let vars = bind_model(&mut tape, &config).expect("store matches config");
    let g = &mut tape.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let fq_tensor = random_tensor(&mut rng, 5, config.channels);
    let fq = g.leaf(fq_tensor.clone());
    let fs = g.leaf(random_tensor(&mut rng, 4 * config.support_parts, config.channels));
    let (m_sq, m_qs) =
        mutual_enhance(g, fq, fs, &vars.mem_sq, &vars.mem_qs, None).expect("shapes agree");
    let p_n = progressive_align(g, m_sq, m_qs, &vars.pam, &vars.pam_res, None)
        .expect("shapes agree");
    let differing = g
        .value(p_n)
        .data()
        .iter()
        .zip(fq_tensor.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    CheckOutcome {
        name: "alignment_identity",
        cases: 1,
        worst: differing as f64,
        tolerance: 0.0,
    }
}

/// Perturbing regression targets and outputs on rows the mask excludes moves
/// the loss by exactly zero.
pub fn check_loss_gating(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let r = rng.random_range(2..=8);
        let logits = random_tensor(&mut rng, r, 1);
        let offsets = random_tensor(&mut rng, r, 2);
        let mut labels = vec![0.0; r];
        let mut cls_mask = vec![0.0; r];
        let mut reg_mask = vec![0.0; r];
        for i in 0..r {
            cls_mask[i] = f64::from(rng.random_bool(0.8));
            if cls_mask[i] == 1.0 && rng.random_bool(0.4) {
                labels[i] = 1.0;
                reg_mask[i] = 1.0;
            }
        }
        reg_mask[0] = 0.0; // at least one excluded row to perturb
        labels[0] = 0.0;
        let targets = LossTargets {
            labels: Tensor::new(&[r, 1], labels).unwrap(),
            offsets: random_tensor(&mut rng, r, 2),
            cls_mask: Tensor::new(&[r, 1], cls_mask).unwrap(),
            reg_mask: Tensor::new(&[r, 1], reg_mask.clone()).unwrap(),
        };

        let base = {
            let mut g: Graph<f64> = Graph::new();
            let l = g.leaf(logits.clone());
            let o = g.leaf(offsets.clone());
            let loss = joint_loss(&mut g, l, o, &targets, 1, r).expect("shapes agree");
            g.value(loss.total).data()[0]
        };

        // slam every excluded row on both the outputs and the targets
        let mut hot_offsets = offsets.clone();
        let mut hot_targets = targets.clone();
        for i in 0..r {
            if reg_mask[i] == 0.0 {
                for k in 0..2 {
                    hot_offsets.data_mut()[i * 2 + k] = rng.random_range(-1e6..1e6);
                    hot_targets.offsets.data_mut()[i * 2 + k] = rng.random_range(-1e6..1e6);
                }
            }
        }
        let shifted = {
            let mut g: Graph<f64> = Graph::new();
            let l = g.leaf(logits.clone());
            let o = g.leaf(hot_offsets);
            let loss = joint_loss(&mut g, l, o, &hot_targets, 1, r).expect("shapes agree");
            g.value(loss.total).data()[0]
        };
        worst = worst.max((shifted - base).abs());
    }
    CheckOutcome { name: "loss_gating", cases, worst, tolerance: 0.0 }
}

/// Every oracle suite at its standard size. All must pass before trusting
/// anything downstream.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_nms(seed, 1000),
        check_ap(seed ^ 1, 1000),
        check_offsets(seed ^ 2, 1000),
        check_match_range(seed ^ 3, 1000),
        check_match_self(seed ^ 4, 1000),
        check_alignment_identity(seed ^ 5),
        check_loss_gating(seed ^ 6, 200),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_full_suite_passes() {
        for outcome in run_all(0) {
            assert!(
                outcome.passed(),
                "{}: worst {} over {} cases exceeds {}",
                outcome.name,
                outcome.worst,
                outcome.cases,
                outcome.tolerance
            );
        }
    }

    #[test]
    fn outcomes_detect_failure() {
        let bad = CheckOutcome { name: "x", cases: 1, worst: 1e-3, tolerance: 1e-9 };
        assert!(!bad.passed());
        let good = CheckOutcome { name: "x", cases: 1, worst: 0.0, tolerance: 0.0 };
        assert!(good.passed());
    }
}
