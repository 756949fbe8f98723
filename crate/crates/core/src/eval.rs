//! Class-agnostic localization quality: average precision per episode at
//! temporal-overlap thresholds, aggregated into mAP.
//!
//! Every episode hides one common action, so each one is scored like a
//! single-class detection problem and the per-episode APs are averaged.
//! Pooling all predictions into one ranking first is available behind
//! [`Aggregation::Micro`].

use serde::{Deserialize, Serialize};

use crate::engine::PredictionSet;
use crate::temporal::{tiou, ScoredSegment, TemporalSegment};

/// The sweep reported by default, lowest first.
pub const EVAL_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no episode has ground truth to evaluate against")]
    NoValidEpisodes,
    #[error("thresholds must be non-empty, finite, and inside (0, 1)")]
    BadThresholds,
}

/// One query's predictions next to what was actually there.
#[derive(Clone, Debug)]
pub struct EvalEpisode {
    pub predictions: PredictionSet,
    pub ground_truth: Vec<TemporalSegment<f64>>,
}

/// How episode APs combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-episode APs.
    Macro,
    /// One ranking pooled over every episode; a prediction can only match
    /// ground truth from its own episode.
    Micro,
}

/// AP of one episode at each threshold. `index` is the episode's position
/// in the evaluated list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub index: usize,
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub aggregation: Aggregation,
    pub thresholds: Vec<f64>,
    /// mAP per threshold, parallel to `thresholds`.
    pub map: Vec<f64>,
    /// Mean of `map` across the whole sweep.
    pub mean: f64,
    /// Per-episode table; episodes without ground truth never appear.
    pub per_episode: Vec<EpisodeRow>,
    /// Episodes dropped for having no ground truth.
    pub skipped: usize,
}

// score desc, then start, then end, then index: evaluation must not depend
// on the order predictions were inserted
fn ranked(predictions: &[ScoredSegment<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_unstable_by(|&i, &j| {
        let a = &predictions[i];
        let b = &predictions[j];
        b.score()
            .total_cmp(&a.score())
            .then(a.segment().start().total_cmp(&b.segment().start()))
            .then(a.segment().end().total_cmp(&b.segment().end()))
            .then(i.cmp(&j))
    });
    order
}

// Greedy matching in rank order: each prediction takes the unmatched ground
// truth it overlaps most, if that overlap clears the threshold (strictly).
fn match_flags(
    predictions: &[ScoredSegment<f64>],
    order: &[usize],
    gts: &[TemporalSegment<f64>],
    threshold: f64,
) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(order.len());
    for &i in order {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if used[gi] {
                continue;
            }
            let o = tiou(predictions[i].segment(), gt);
            if o > threshold && best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                used[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

// All-points interpolation: AP = sum over recall increments of the best
// precision achieved at that recall or beyond.
fn ap_from_flags(flags: &[bool], n_gts: usize) -> f64 {
    debug_assert!(n_gts > 0);
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gts as f64);
    }
    let mut best = 0.0;
    for p in precisions.iter_mut().rev() {
        best = f64::max(best, *p);
        *p = best;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recalls.iter().zip(&precisions) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Average precision of one ranked prediction set against one episode's
/// ground truth. `None` when the episode has no ground truth: the value is
/// undefined there and the episode must be excluded upstream.
pub fn episode_ap(
    predictions: &PredictionSet,
    ground_truth: &[TemporalSegment<f64>],
    threshold: f64,
) -> Option<f64> {
    if ground_truth.is_empty() {
        return None;
    }
    let order = ranked(&predictions.predictions);
    let flags = match_flags(&predictions.predictions, &order, ground_truth, threshold);
    Some(ap_from_flags(&flags, ground_truth.len()))
}

fn micro_map(episodes: &[(usize, &EvalEpisode)], threshold: f64) -> f64 {
    // one global ranking of (episode slot, prediction index); ties across
    // episodes break by original episode position
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (slot, (_, ep)) in episodes.iter().enumerate() {
        for pi in 0..ep.predictions.predictions.len() {
            entries.push((slot, pi));
        }
    }
    entries.sort_unstable_by(|&(si, pi), &(sj, pj)| {
        let a = &episodes[si].1.predictions.predictions[pi];
        let b = &episodes[sj].1.predictions.predictions[pj];
        b.score()
            .total_cmp(&a.score())
            .then(a.segment().start().total_cmp(&b.segment().start()))
            .then(a.segment().end().total_cmp(&b.segment().end()))
            .then(episodes[si].0.cmp(&episodes[sj].0))
            .then(pi.cmp(&pj))
    });
    let mut used: Vec<Vec<bool>> = episodes
        .iter()
        .map(|(_, ep)| vec![false; ep.ground_truth.len()])
        .collect();
    let total_gts: usize = episodes.iter().map(|(_, ep)| ep.ground_truth.len()).sum();
    let mut flags = Vec::with_capacity(entries.len());
    for (slot, pi) in entries {
        let ep = episodes[slot].1;
        let pred = &ep.predictions.predictions[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in ep.ground_truth.iter().enumerate() {
            if used[slot][gi] {
                continue;
            }
            let o = tiou(pred.segment(), gt);
            if o > threshold && best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                used[slot][gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    ap_from_flags(&flags, total_gts)
}

/// mAP over a threshold sweep. Episodes without ground truth are excluded
/// (with a warning naming them) and counted in `skipped`; at least one
/// episode must survive.
pub fn evaluate(
    episodes: &[EvalEpisode],
    thresholds: &[f64],
    aggregation: Aggregation,
) -> Result<EvalResult, EvalError> {
    if thresholds.is_empty()
        || thresholds
            .iter()
            .any(|t| !t.is_finite() || *t <= 0.0 || *t >= 1.0)
    {
        return Err(EvalError::BadThresholds);
    }
    let mut valid: Vec<(usize, &EvalEpisode)> = Vec::new();
    let mut skipped = 0;
    for (i, ep) in episodes.iter().enumerate() {
        if ep.ground_truth.is_empty() {
            log::warn!("episode {i} has no ground truth; excluded from mAP");
            skipped += 1;
        } else {
            valid.push((i, ep));
        }
    }
    if valid.is_empty() {
        return Err(EvalError::NoValidEpisodes);
    }

    let per_episode: Vec<EpisodeRow> = valid
        .iter()
        .map(|&(i, ep)| EpisodeRow {
            index: i,
            ap: thresholds
                .iter()
                .map(|&t| {
                    episode_ap(&ep.predictions, &ep.ground_truth, t)
                        .expect("validated non-empty above")
                })
                .collect(),
        })
        .collect();

    let map: Vec<f64> = match aggregation {
        Aggregation::Macro => (0..thresholds.len())
            .map(|ti| {
                per_episode.iter().map(|row| row.ap[ti]).sum::<f64>() / per_episode.len() as f64
            })
            .collect(),
        Aggregation::Micro => thresholds
            .iter()
            .map(|&t| micro_map(&valid, t))
            .collect(),
    };
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalResult {
        aggregation,
        thresholds: thresholds.to_vec(),
        map,
        mean,
        per_episode,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::oracle_ap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(start: f64, end: f64) -> TemporalSegment<f64> {
        TemporalSegment::new(start, end).unwrap()
    }

    fn pred(start: f64, end: f64, score: f64) -> ScoredSegment<f64> {
        ScoredSegment::new(seg(start, end), score).unwrap()
    }

    fn set(preds: Vec<ScoredSegment<f64>>) -> PredictionSet {
        PredictionSet { predictions: preds }
    }

    #[test]
    fn one_clean_hit_is_perfect() {
        let preds = set(vec![pred(10.0, 30.0, 0.9)]);
        let gts = vec![seg(12.0, 32.0)];
        assert!(tiou(preds.predictions[0].segment(), &gts[0]) > 0.5);
        assert_eq!(episode_ap(&preds, &gts, 0.5), Some(1.0));
    }

    #[test]
    fn one_weak_hit_is_zero() {
        let preds = set(vec![pred(0.0, 10.0, 0.9)]);
        let gts = vec![seg(8.0, 30.0)];
        assert!(tiou(preds.predictions[0].segment(), &gts[0]) < 0.5);
        assert_eq!(episode_ap(&preds, &gts, 0.5), Some(0.0));
    }

    #[test]
    fn hit_miss_hit_matches_the_hand_value() {
        // hits on both instances with a false alarm ranked in between
        let preds = set(vec![
            pred(10.0, 20.0, 0.9),
            pred(50.0, 60.0, 0.8),
            pred(100.0, 110.0, 0.7),
        ]);
        let gts = vec![seg(10.0, 20.0), seg(100.0, 110.0)];
        let ap = episode_ap(&preds, &gts, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert!((ap - oracle_ap(&preds.predictions, &gts, 0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_hits_on_one_instance_cost_precision() {
        // the duplicate of the first instance is a false positive and drags
        // the precision at full recall below one
        let preds = set(vec![
            pred(10.0, 20.0, 0.9),
            pred(11.0, 21.0, 0.8),
            pred(100.0, 110.0, 0.7),
        ]);
        let gts = vec![seg(10.0, 20.0), seg(100.0, 110.0)];
        let ap = episode_ap(&preds, &gts, 0.5).unwrap();
        assert!(ap < 1.0);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_undefined() {
        let preds = set(vec![pred(0.0, 10.0, 0.5)]);
        assert_eq!(episode_ap(&preds, &[], 0.5), None);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let a = vec![
            pred(0.0, 10.0, 0.3),
            pred(20.0, 30.0, 0.9),
            pred(40.0, 50.0, 0.6),
        ];
        let mut b = a.clone();
        b.reverse();
        let gts = vec![seg(20.0, 30.0), seg(41.0, 51.0)];
        for t in [0.3, 0.5, 0.7] {
            assert_eq!(
                episode_ap(&set(a.clone()), &gts, t),
                episode_ap(&set(b.clone()), &gts, t)
            );
        }
    }

    #[test]
    fn ap_agrees_with_the_prefix_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..1000 {
            let n_gts = rng.random_range(1..=3);
            let n_preds = rng.random_range(0..=6);
            let gts: Vec<_> = (0..n_gts)
                .map(|_| {
                    let start = rng.random_range(0.0..80.0);
                    let len = rng.random_range(2.0..30.0);
                    seg(start, start + len)
                })
                .collect();
            let preds: Vec<_> = (0..n_preds)
                .map(|_| {
                    let start = rng.random_range(0.0..90.0);
                    let len = rng.random_range(2.0..30.0);
                    pred(start, start + len, rng.random_range(0.01..0.99))
                })
                .collect();
            for t in [0.3, 0.5, 0.7] {
                let got = episode_ap(&set(preds.clone()), &gts, t).unwrap();
                let want = oracle_ap(&preds, &gts, t).unwrap();
                assert!(
                    (got - want).abs() <= 1e-9,
                    "case {case} at {t}: {got} vs {want}"
                );
                assert!((0.0..=1.0).contains(&got));
            }
        }
    }

    fn perfect_episode(at: f64) -> EvalEpisode {
        EvalEpisode {
            predictions: set(vec![pred(at, at + 10.0, 0.9)]),
            ground_truth: vec![seg(at, at + 10.0)],
        }
    }

    #[test]
    fn perfect_episodes_score_one_everywhere() {
        let eps = vec![perfect_episode(0.0), perfect_episode(50.0)];
        let out = evaluate(&eps, &EVAL_THRESHOLDS, Aggregation::Macro).unwrap();
        assert!(out.map.iter().all(|&m| m == 1.0));
        assert_eq!(out.mean, 1.0);
        assert_eq!(out.skipped, 0);
        assert_eq!(out.per_episode.len(), 2);
    }

    #[test]
    fn map_never_rises_with_the_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let episodes: Vec<EvalEpisode> = (0..12)
            .map(|_| {
                let gt_start = rng.random_range(0.0..50.0);
                let gt = seg(gt_start, gt_start + rng.random_range(5.0..20.0));
                let preds = (0..rng.random_range(1..5))
                    .map(|_| {
                        let jitter = rng.random_range(-8.0..8.0);
                        let start = (gt.start() + jitter).max(0.0);
                        pred(
                            start,
                            start + rng.random_range(4.0..22.0),
                            rng.random_range(0.05..0.95),
                        )
                    })
                    .collect();
                EvalEpisode {
                    predictions: set(preds),
                    ground_truth: vec![gt],
                }
            })
            .collect();
        for agg in [Aggregation::Macro, Aggregation::Micro] {
            let out = evaluate(&episodes, &EVAL_THRESHOLDS, agg).unwrap();
            for w in out.map.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{agg:?}: {:?}", out.map);
            }
        }
    }

    #[test]
    fn macro_map_is_the_mean_of_episode_aps() {
        // AP 1.0, AP 0.0, AP 0.5 by construction
        let eps = vec![
            perfect_episode(0.0),
            EvalEpisode {
                predictions: set(vec![pred(0.0, 5.0, 0.9)]),
                ground_truth: vec![seg(50.0, 60.0)],
            },
            EvalEpisode {
                predictions: set(vec![pred(70.0, 80.0, 0.9)]),
                ground_truth: vec![seg(70.0, 80.0), seg(90.0, 99.0)],
            },
        ];
        let out = evaluate(&eps, &[0.5], Aggregation::Macro).unwrap();
        assert!((out.map[0] - 0.5).abs() < 1e-12);
        assert_eq!(out.per_episode[2].ap[0], 0.5);
    }

    #[test]
    fn empty_episodes_are_skipped_with_a_count() {
        let eps = vec![
            perfect_episode(0.0),
            EvalEpisode {
                predictions: set(vec![pred(0.0, 5.0, 0.9)]),
                ground_truth: vec![],
            },
        ];
        let out = evaluate(&eps, &[0.5], Aggregation::Macro).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.per_episode.len(), 1);
        assert_eq!(out.map[0], 1.0);

        let all_empty = vec![EvalEpisode {
            predictions: set(vec![]),
            ground_truth: vec![],
        }];
        assert!(matches!(
            evaluate(&all_empty, &[0.5], Aggregation::Macro),
            Err(EvalError::NoValidEpisodes)
        ));
    }

    #[test]
    fn thresholds_are_validated() {
        let eps = vec![perfect_episode(0.0)];
        assert!(matches!(
            evaluate(&eps, &[], Aggregation::Macro),
            Err(EvalError::BadThresholds)
        ));
        assert!(matches!(
            evaluate(&eps, &[0.0], Aggregation::Macro),
            Err(EvalError::BadThresholds)
        ));
        assert!(matches!(
            evaluate(&eps, &[1.0], Aggregation::Macro),
            Err(EvalError::BadThresholds)
        ));
    }

    #[test]
    fn micro_pools_rankings_across_episodes() {
        // episode A: one instance, hit at score 0.9
        // episode B: one instance, miss at score 0.95 then hit at 0.5
        // macro: mean(1.0, 0.5) = 0.75
        // micro ranking: [miss 0.95, hit 0.9, hit 0.5]
        //   precisions 0, 1/2, 2/3 at recalls 0, 1/2, 1
        //   AP = 1/2 * 2/3 + 1/2 * 2/3 = 2/3
        let eps = vec![
            EvalEpisode {
                predictions: set(vec![pred(10.0, 20.0, 0.9)]),
                ground_truth: vec![seg(10.0, 20.0)],
            },
            EvalEpisode {
                predictions: set(vec![pred(0.0, 5.0, 0.95), pred(30.0, 40.0, 0.5)]),
                ground_truth: vec![seg(30.0, 40.0)],
            },
        ];
        let macro_out = evaluate(&eps, &[0.5], Aggregation::Macro).unwrap();
        assert!((macro_out.map[0] - 0.75).abs() < 1e-12);
        let micro_out = evaluate(&eps, &[0.5], Aggregation::Micro).unwrap();
        assert!((micro_out.map[0] - 2.0 / 3.0).abs() < 1e-12);
        // the per-episode table stays per-episode either way
        assert_eq!(micro_out.per_episode, macro_out.per_episode);
    }

    #[test]
    fn mean_is_the_mean_of_the_sweep() {
        let eps = vec![perfect_episode(0.0)];
        let out = evaluate(&eps, &[0.5, 0.7], Aggregation::Macro).unwrap();
        assert_eq!(out.mean, (out.map[0] + out.map[1]) / 2.0);
    }
}
