//! Episode construction: one query video plus N support clips that share a
//! class with it.
//!
//! Validation and test episodes must be identical across runs and across
//! processes regardless of the training RNG, so a draw is either seeded
//! explicitly (training) or derived from a fixed pairing of phase and
//! episode index (evaluation).

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::temporal::TemporalSegment;

use super::{AnnotatedVideo, DataError, Phase};

/// One support clip: a labeled instance cut from some video.
///
/// `noisy` marks supports whose class differs from the episode's common
/// class on purpose; `image` marks supports collapsed to a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportRef {
    pub video_id: String,
    pub class_label: String,
    pub segment: TemporalSegment<f64>,
    pub noisy: bool,
    pub image: bool,
}

/// A sampled episode: the query video, the ground truth instances of the
/// common class inside it, and the support clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub common_class: String,
    pub query_id: String,
    pub query_frames: usize,
    pub gt_segments: Vec<TemporalSegment<f64>>,
    pub supports: Vec<SupportRef>,
}

/// Knobs for a single draw.
#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    /// Number of supports.
    pub n_supports: usize,
    /// How many of the supports come from a class other than the common one.
    pub noisy_count: usize,
    /// Noisy supports share one wrong class instead of distinct wrong classes.
    pub noisy_same_class: bool,
    /// Supports are single frames rather than trimmed clips.
    pub image_supports: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            n_supports: 5,
            noisy_count: 0,
            noisy_same_class: false,
            image_supports: false,
        }
    }
}

/// How to seed the draw.
#[derive(Debug, Clone, Copy)]
pub enum Draw {
    /// Training: any seed, typically derived from the run seed and iteration.
    Seed(u64),
    /// Evaluation: episode `index` of `phase`, reproducible forever.
    Fixed { phase: Phase, index: u64 },
}

// arbitrary odd constant; fixes the eval episode sequence independently of
// the run seed
const FIXED_DRAW_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

impl Draw {
    pub(crate) fn seed(self) -> u64 {
        match self {
            Draw::Seed(s) => s,
            Draw::Fixed { phase, index } => {
                let tag = match phase {
                    Phase::Train => 1u64,
                    Phase::Val => 2,
                    Phase::Test => 3,
                };
                FIXED_DRAW_SALT
                    .wrapping_mul(index.wrapping_add(1))
                    .wrapping_add(tag.wrapping_mul(0x1000_0000_0000_0001))
            }
        }
    }
}

/// Index over a phase's videos: which (video, instance) pairs exist per
/// class, and how many distinct videos carry each class.
pub struct EpisodePool<'a> {
    videos: &'a [AnnotatedVideo],
    // class -> (video index, instance index), video-sorted
    by_class: BTreeMap<String, Vec<(usize, usize)>>,
}

impl<'a> EpisodePool<'a> {
    pub fn new(videos: &'a [AnnotatedVideo]) -> Self {
        let mut by_class: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for (vi, video) in videos.iter().enumerate() {
            for (ii, inst) in video.instances.iter().enumerate() {
                by_class
                    .entry(inst.label.clone())
                    .or_default()
                    .push((vi, ii));
            }
        }
        Self { videos, by_class }
    }

    pub fn videos(&self) -> &[AnnotatedVideo] {
        self.videos
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.by_class.keys().map(String::as_str)
    }

    fn distinct_videos(&self, class: &str) -> usize {
        let Some(entries) = self.by_class.get(class) else {
            return 0;
        };
        let mut count = 0;
        let mut last = usize::MAX;
        for &(vi, _) in entries {
            if vi != last {
                count += 1;
                last = vi;
            }
        }
        count
    }

    /// Classes with instances in at least `needed` distinct videos.
    fn eligible_classes(&self, needed: usize) -> Vec<&str> {
        self.by_class
            .keys()
            .filter(|c| self.distinct_videos(c) >= needed)
            .map(String::as_str)
            .collect()
    }
}

/// Draw one episode from the pool.
///
/// The common class is picked uniformly among classes present in at least
/// N+1 distinct videos, the query uniformly among that class's videos, and
/// the supports without replacement from the remaining ones. Noisy supports
/// replace clean ones with instances of deliberately wrong classes.
pub fn sample_episode(
    pool: &EpisodePool,
    options: &EpisodeOptions,
    draw: Draw,
) -> Result<Episode, DataError> {
    if options.n_supports == 0 {
        return Err(DataError::Malformed {
            line: 0,
            detail: "an episode needs at least one support".into(),
        });
    }
    if options.noisy_count > options.n_supports {
        return Err(DataError::Malformed {
            line: 0,
            detail: format!(
                "cannot make {} of {} supports noisy",
                options.noisy_count, options.n_supports
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw.seed());

    let clean = options.n_supports - options.noisy_count;
    // query plus the clean supports all come from distinct videos of the
    // common class; a fully noisy draw still needs a donor video for class
    // identity, hence max(clean, 1) + 1
    let needed = clean.max(1) + 1;
    let eligible = pool.eligible_classes(needed);
    if eligible.is_empty() {
        return Err(DataError::NoEligibleClass { needed });
    }
    let common = (*eligible
        .choose(&mut rng)
        .expect("eligible is non-empty"))
    .to_string();

    let entries = &pool.by_class[&common];
    let mut class_videos: Vec<usize> = Vec::new();
    for &(vi, _) in entries {
        if class_videos.last() != Some(&vi) {
            class_videos.push(vi);
        }
    }
    let query_vi = *class_videos.choose(&mut rng).expect("class has videos");
    let query = &pool.videos[query_vi];

    let donors: Vec<usize> = class_videos
        .iter()
        .copied()
        .filter(|&vi| vi != query_vi)
        .collect();
    let picked = sample_indices(&mut rng, donors.len(), clean.min(donors.len()));
    let mut supports = Vec::with_capacity(options.n_supports);
    for di in picked.iter() {
        let vi = donors[di];
        supports.push(make_support(pool, &mut rng, vi, &common, false, options)?);
    }
    // donor shortage cannot happen for clean >= 1 given the eligibility
    // check, but a fully noisy episode skips this loop entirely
    debug_assert_eq!(supports.len(), clean);

    if options.noisy_count > 0 {
        let mut wrong: Vec<&str> = pool
            .by_class
            .keys()
            .map(String::as_str)
            .filter(|c| *c != common)
            .collect();
        if wrong.is_empty() {
            return Err(DataError::NotEnoughNoisyClasses(options.noisy_count));
        }
        if options.noisy_same_class {
            let class = (*wrong.choose(&mut rng).expect("non-empty")).to_string();
            for _ in 0..options.noisy_count {
                let vi = pick_class_video(pool, &mut rng, &class);
                supports.push(make_support(pool, &mut rng, vi, &class, true, options)?);
            }
        } else {
            if wrong.len() < options.noisy_count {
                return Err(DataError::NotEnoughNoisyClasses(options.noisy_count));
            }
            let idx = sample_indices(&mut rng, wrong.len(), options.noisy_count);
            let mut chosen: Vec<&str> = idx.iter().map(|i| wrong[i]).collect();
            chosen.sort_unstable();
            wrong = chosen;
            for class in wrong {
                let vi = pick_class_video(pool, &mut rng, class);
                supports.push(make_support(pool, &mut rng, vi, class, true, options)?);
            }
        }
    }

    let gt_segments = query
        .instances_of(&common)
        .into_iter()
        .map(|ii| query.instances[ii].segment.clone())
        .collect();

    Ok(Episode {
        common_class: common,
        query_id: query.video_id.clone(),
        query_frames: query.num_frames,
        gt_segments,
        supports,
    })
}

fn pick_class_video(pool: &EpisodePool, rng: &mut ChaCha8Rng, class: &str) -> usize {
    let entries = &pool.by_class[class];
    let mut vids: Vec<usize> = Vec::new();
    for &(vi, _) in entries {
        if vids.last() != Some(&vi) {
            vids.push(vi);
        }
    }
    *vids.choose(rng).expect("class has videos")
}

fn make_support(
    pool: &EpisodePool,
    rng: &mut ChaCha8Rng,
    video_idx: usize,
    class: &str,
    noisy: bool,
    options: &EpisodeOptions,
) -> Result<SupportRef, DataError> {
    let video = &pool.videos[video_idx];
    let candidates = video.instances_of(class);
    debug_assert!(!candidates.is_empty());
    let ii = *candidates.choose(rng).expect("video carries the class");
    let inst = &video.instances[ii];
    let segment = if options.image_supports {
        // a single representative frame from the middle of the instance
        let mid = ((inst.segment.start() + inst.segment.end()) / 2.0).floor();
        let mid = mid.min(video.num_frames as f64 - 1.0).max(0.0);
        TemporalSegment::new(mid, mid + 1.0).map_err(DataError::Temporal)?
    } else {
        inst.segment.clone()
    };
    Ok(SupportRef {
        video_id: video.video_id.clone(),
        class_label: class.to_string(),
        segment,
        noisy,
        image: options.image_supports,
    })
}
