//! Scoring and boundary-refinement heads plus the joint training objective.
//!
//! Each head is a two-layer tower (linear, relu, linear). The classification
//! tower emits one logit per proposal, the regression tower a center shift
//! and a log-length ratio. The loss combines binary cross-entropy over
//! counted proposals with smooth-L1 over positive ones; ignored and padded
//! proposals are masked so they contribute exactly zero.

use crate::alignment::{linear_value_count, register_linear, LinearVars};
use crate::diffcore::{DiffError, Graph, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::temporal::{encode_offsets, TemporalSegment};

#[derive(Clone, Copy, Debug)]
pub struct TowerVars {
    pub c0: LinearVars,
    pub c1: LinearVars,
}

impl TowerVars {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        mut weight_init: impl FnMut() -> F,
    ) -> Result<(), DiffError> {
        register_linear(store, &format!("{prefix}.c0"), in_dim, hidden, &mut weight_init)?;
        register_linear(store, &format!("{prefix}.c1"), hidden, out_dim, &mut weight_init)
    }

    pub fn bind<F: Scalar>(tape: &mut Tape<F>, prefix: &str) -> Result<Self, DiffError> {
        Ok(Self {
            c0: LinearVars::bind(tape, &format!("{prefix}.c0"))?,
            c1: LinearVars::bind(tape, &format!("{prefix}.c1"))?,
        })
    }

    pub fn value_count(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        linear_value_count(in_dim, hidden) + linear_value_count(hidden, out_dim)
    }
}

pub fn tower<F: Scalar>(g: &mut Graph<F>, x: Var, p: &TowerVars) -> Result<Var, DiffError> {
    let h = g.linear(x, p.c0.weight, p.c0.bias)?;
    let h = g.relu(h);
    g.linear(h, p.c1.weight, p.c1.bias)
}

/// One classification tower and one regression tower over shared features.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls: TowerVars,
    pub reg: TowerVars,
}

impl HeadVars {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        mut weight_init: impl FnMut() -> F,
    ) -> Result<(), DiffError> {
        TowerVars::register(store, &format!("{prefix}.cls"), channels, hidden, 1, &mut weight_init)?;
        TowerVars::register(store, &format!("{prefix}.reg"), channels, hidden, 2, &mut weight_init)
    }

    pub fn bind<F: Scalar>(tape: &mut Tape<F>, prefix: &str) -> Result<Self, DiffError> {
        Ok(Self {
            cls: TowerVars::bind(tape, &format!("{prefix}.cls"))?,
            reg: TowerVars::bind(tape, &format!("{prefix}.reg"))?,
        })
    }

    pub fn value_count(channels: usize, hidden: usize) -> usize {
        TowerVars::value_count(channels, hidden, 1) + TowerVars::value_count(channels, hidden, 2)
    }
}

pub struct HeadOutputs {
    /// `[R, 1]` raw scores; pass through a sigmoid for probabilities.
    pub cls_logits: Var,
    /// `[R, 2]` center shift and log-length ratio per proposal.
    pub offsets: Var,
}

pub fn classify_and_regress<F: Scalar>(
    g: &mut Graph<F>,
    feats: Var,
    p: &HeadVars,
) -> Result<HeadOutputs, DiffError> {
    Ok(HeadOutputs {
        cls_logits: tower(g, feats, &p.cls)?,
        offsets: tower(g, feats, &p.reg)?,
    })
}

/// Per-proposal supervision. `labels` holds 0/1 (entries under a zero
/// `cls_mask` are never read), `offsets` the regression targets (zero rows
/// where `reg_mask` is zero), and the masks select which proposals count
/// toward each term: `cls_mask` excludes ignored and padded proposals,
/// `reg_mask` additionally excludes negatives.
#[derive(Clone, Debug)]
pub struct LossTargets<F> {
    pub labels: Tensor<F>,
    pub offsets: Tensor<F>,
    pub cls_mask: Tensor<F>,
    pub reg_mask: Tensor<F>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TargetStats {
    pub positives: usize,
    pub negatives: usize,
    pub ignored: usize,
    pub padded: usize,
}

/// Labels each proposal against the ground truth: overlap at or above
/// `pos_threshold` is positive, overlap below `neg_threshold` is negative,
/// the band in between is ignored. Positives regress toward their
/// best-overlapping segment (ties go to the earlier one). Invalid entries
/// (padding) are masked out of both terms.
pub fn build_conditioned_targets<F: Scalar>(
    proposals: &[TemporalSegment<f64>],
    valid: &[bool],
    ground_truth: &[TemporalSegment<f64>],
    pos_threshold: f64,
    neg_threshold: f64,
) -> Result<(LossTargets<F>, TargetStats), DiffError> {
    if proposals.len() != valid.len() {
        return Err(DiffError::shape(
            "build_conditioned_targets",
            format!("{} proposals but {} validity flags", proposals.len(), valid.len()),
        ));
    }
    let r = proposals.len();
    let mut labels = vec![F::zero(); r];
    let mut offsets = vec![F::zero(); r * 2];
    let mut cls_mask = vec![F::zero(); r];
    let mut reg_mask = vec![F::zero(); r];
    let mut stats = TargetStats::default();
    for (i, prop) in proposals.iter().enumerate() {
        if !valid[i] {
            stats.padded += 1;
            continue;
        }
        let mut best = 0.0;
        let mut best_gt: Option<&TemporalSegment<f64>> = None;
        for gt in ground_truth {
            let overlap = crate::temporal::tiou(prop, gt);
            if overlap > best {
                best = overlap;
                best_gt = Some(gt);
            }
        }
        if best >= pos_threshold {
            let gt = best_gt.expect("positive overlap implies a best segment");
            let enc = encode_offsets(gt, prop);
            labels[i] = F::one();
            offsets[i * 2] = F::from_f64(enc.d_center);
            offsets[i * 2 + 1] = F::from_f64(enc.d_log_length);
            cls_mask[i] = F::one();
            reg_mask[i] = F::one();
            stats.positives += 1;
        } else if best < neg_threshold {
            cls_mask[i] = F::one();
            stats.negatives += 1;
        } else {
            stats.ignored += 1;
        }
    }
    Ok((
        LossTargets {
            labels: Tensor::new(&[r, 1], labels)?,
            offsets: Tensor::new(&[r, 2], offsets)?,
            cls_mask: Tensor::new(&[r, 1], cls_mask)?,
            reg_mask: Tensor::new(&[r, 1], reg_mask)?,
        },
        stats,
    ))
}

pub struct JointLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `L = (1/n_cls) * sum(masked bce) + (1/n_reg) * sum(masked smooth-L1)`.
///
/// `n_cls` is 1 by default (one episode per step); `n_reg` is the number of
/// proposal slots. With no positives the regression term is exactly zero,
/// and masked-out proposals cannot move either term.
pub fn joint_loss<F: Scalar>(
    g: &mut Graph<F>,
    cls_logits: Var,
    offsets: Var,
    targets: &LossTargets<F>,
    n_cls: usize,
    n_reg: usize,
) -> Result<JointLoss, DiffError> {
    let per = g.bce_logits(cls_logits, &targets.labels)?;
    let cls_mask = g.leaf(targets.cls_mask.clone());
    let gated = g.mul(per, cls_mask)?;
    let summed = g.sum(gated);
    let cls = g.scale(summed, F::one() / F::from_usize(n_cls.max(1)));

    let target_off = g.leaf(targets.offsets.clone());
    let diff = g.sub(offsets, target_off)?;
    let huber = g.smooth_l1(diff);
    let reg_mask = g.leaf(targets.reg_mask.clone());
    let gated = g.scale_rows(huber, reg_mask)?;
    let summed = g.sum(gated);
    let reg = g.scale(summed, F::one() / F::from_usize(n_reg.max(1)));

    let total = g.add(cls, reg)?;
    Ok(JointLoss { total, cls, reg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, GRADCHECK_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(start: f64, end: f64) -> TemporalSegment<f64> {
        TemporalSegment::new(start, end).unwrap()
    }

    fn leaf_targets(r: usize, rows: &[(f64, f64, f64, f64, f64)]) -> LossTargets<f64> {
        // (label, off_c, off_l, cls_mask, reg_mask) per proposal
        assert_eq!(rows.len(), r);
        LossTargets {
            labels: Tensor::new(&[r, 1], rows.iter().map(|t| t.0).collect()).unwrap(),
            offsets: Tensor::new(&[r, 2], rows.iter().flat_map(|t| [t.1, t.2]).collect())
                .unwrap(),
            cls_mask: Tensor::new(&[r, 1], rows.iter().map(|t| t.3).collect()).unwrap(),
            reg_mask: Tensor::new(&[r, 1], rows.iter().map(|t| t.4).collect()).unwrap(),
        }
    }

    #[test]
    fn zeroed_final_layers_emit_half_probability_and_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mut init = || rng.random::<f64>() - 0.5;
        HeadVars::register(&mut store, "head", 6, 3, &mut init).unwrap();
        for name in ["head.cls.c1.weight", "head.reg.c1.weight"] {
            let idx = store.index_of(name).unwrap();
            let zero = Tensor::zeros(store.tensor_at(idx).shape());
            *store.tensor_at_mut(idx) = zero;
        }
        let mut tape = Tape::new(&store);
        let vars = HeadVars::bind(&mut tape, "head").unwrap();
        let feats = Tensor::new(&[4, 6], (0..24).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
        let feats = tape.graph.leaf(feats);
        let out = classify_and_regress(&mut tape.graph, feats, &vars).unwrap();
        let probs = tape.graph.sigmoid(out.cls_logits);
        for &p in tape.graph.value(probs).data() {
            assert_eq!(p, 0.5);
        }
        for &o in tape.graph.value(out.offsets).data() {
            assert_eq!(o, 0.0);
        }
    }

    #[test]
    fn loss_matches_hand_computation() {
        // One positive with a miss, one negative scored high, one ignored.
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::new(&[3, 1], vec![0.4, 1.2, -0.3]).unwrap());
        let offsets = g.leaf(
            Tensor::new(&[3, 2], vec![0.3, -0.2, 0.0, 0.0, 9.0, 9.0]).unwrap(),
        );
        let targets = leaf_targets(
            3,
            &[
                (1.0, 0.1, 0.5, 1.0, 1.0),
                (0.0, 0.0, 0.0, 1.0, 0.0),
                (0.0, 0.0, 0.0, 0.0, 0.0),
            ],
        );
        let loss = joint_loss(&mut g, logits, offsets, &targets, 1, 3).unwrap();

        let bce = |z: f64, y: f64| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let expect_cls = bce(0.4, 1.0) + bce(1.2, 0.0);
        // diffs 0.2 and -0.7, both inside the quadratic zone
        let expect_reg = (0.5 * 0.2 * 0.2 + 0.5 * 0.7 * 0.7) / 3.0;
        let cls = g.value(loss.cls).at(0, 0);
        let reg = g.value(loss.reg).at(0, 0);
        assert!((cls - expect_cls).abs() < 1e-12, "cls {cls} vs {expect_cls}");
        assert!((reg - expect_reg).abs() < 1e-12, "reg {reg} vs {expect_reg}");
        assert!((g.value(loss.total).at(0, 0) - (expect_cls + expect_reg)).abs() < 1e-12);
    }

    #[test]
    fn no_positives_zeroes_regression_exactly() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::new(&[2, 1], vec![0.9, -2.0]).unwrap());
        let offsets = g.leaf(Tensor::new(&[2, 2], vec![5.0, -3.0, 7.0, 1.0]).unwrap());
        let targets = leaf_targets(2, &[(0.0, 0.0, 0.0, 1.0, 0.0), (0.0, 0.0, 0.0, 1.0, 0.0)]);
        let loss = joint_loss(&mut g, logits, offsets, &targets, 1, 2).unwrap();
        assert_eq!(g.value(loss.reg).at(0, 0).to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn ignored_proposals_cannot_move_the_loss() {
        let targets = leaf_targets(
            2,
            &[(1.0, 0.1, 0.2, 1.0, 1.0), (0.0, 0.0, 0.0, 0.0, 0.0)],
        );
        let eval = |ignored_logit: f64, ignored_off: f64| {
            let mut g = Graph::<f64>::new();
            let logits = g.leaf(Tensor::new(&[2, 1], vec![0.3, ignored_logit]).unwrap());
            let offsets =
                g.leaf(Tensor::new(&[2, 2], vec![0.2, 0.1, ignored_off, -ignored_off]).unwrap());
            let loss = joint_loss(&mut g, logits, offsets, &targets, 1, 2).unwrap();
            g.value(loss.total).at(0, 0)
        };
        assert_eq!(eval(0.0, 0.0).to_bits(), eval(123.0, -55.0).to_bits());
    }

    #[test]
    fn targets_split_by_overlap_band() {
        let proposals = vec![
            seg(0.0, 10.0),
            seg(0.0, 24.0),
            seg(50.0, 60.0),
            seg(100.0, 110.0),
            seg(0.0, 10.0),
        ];
        let valid = vec![true, true, true, true, false];
        let gts = vec![seg(0.0, 10.0), seg(52.0, 64.0)];
        let (t, stats) =
            build_conditioned_targets::<f64>(&proposals, &valid, &gts, 0.5, 0.3).unwrap();
        assert_eq!(
            stats,
            TargetStats { positives: 2, negatives: 1, ignored: 1, padded: 1 }
        );
        // proposal 0 matches gt 0 exactly
        assert_eq!(t.labels.at(0, 0), 1.0);
        assert_eq!(t.offsets.at(0, 0), 0.0);
        assert_eq!(t.offsets.at(0, 1), 0.0);
        // proposal 1 overlaps gt 0 at 10/24, inside the ignore band
        assert_eq!(t.cls_mask.at(1, 0), 0.0);
        assert_eq!(t.reg_mask.at(1, 0), 0.0);
        // proposal 2 overlaps gt 1 at 8/14, positive with a real offset
        assert_eq!(t.labels.at(2, 0), 1.0);
        assert!((t.offsets.at(2, 0) - 0.3).abs() < 1e-12);
        assert!((t.offsets.at(2, 1) - (1.2f64).ln()).abs() < 1e-12);
        // proposal 3 touches nothing
        assert_eq!(t.labels.at(3, 0), 0.0);
        assert_eq!(t.cls_mask.at(3, 0), 1.0);
        assert_eq!(t.reg_mask.at(3, 0), 0.0);
        // padding row fully masked
        assert_eq!(t.cls_mask.at(4, 0), 0.0);
        assert_eq!(t.reg_mask.at(4, 0), 0.0);
    }

    #[test]
    fn overlap_ties_regress_toward_the_earlier_segment() {
        let proposals = vec![seg(10.0, 20.0)];
        let gts = vec![seg(5.0, 17.5), seg(12.5, 25.0)];
        // both overlap 7.5/15
        let (t, _) = build_conditioned_targets::<f64>(&proposals, &[true], &gts, 0.4, 0.3)
            .unwrap();
        let enc = encode_offsets(&gts[0], &proposals[0]);
        assert_eq!(t.offsets.at(0, 0), enc.d_center);
        assert_eq!(t.offsets.at(0, 1), enc.d_log_length);
    }

    #[test]
    fn no_ground_truth_makes_everything_negative() {
        let proposals = vec![seg(0.0, 5.0), seg(5.0, 9.0)];
        let (t, stats) =
            build_conditioned_targets::<f64>(&proposals, &[true, true], &[], 0.5, 0.3).unwrap();
        assert_eq!(stats.negatives, 2);
        assert_eq!(t.cls_mask.at(0, 0), 1.0);
        assert_eq!(t.labels.at(0, 0), 0.0);
    }

    #[test]
    fn loss_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits =
            Tensor::new(&[3, 1], (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .unwrap();
        let offsets =
            Tensor::new(&[3, 2], (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .unwrap();
        let targets = leaf_targets(
            3,
            &[
                (1.0, 0.1, 0.5, 1.0, 1.0),
                (0.0, 0.0, 0.0, 1.0, 0.0),
                (1.0, -0.3, 0.2, 1.0, 1.0),
            ],
        );
        let err = gradcheck(
            |g, vars| {
                let loss = joint_loss(g, vars[0], vars[1], &targets, 1, 3)?;
                Ok(loss.total)
            },
            &[logits, offsets],
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel error {err}");
    }
}
