//! Seeded synthetic episodes with attached step features.
//!
//! Every episode draws a fresh unit embedding for its hidden class, plants
//! instances of it in an otherwise-noise query, and emits trimmed supports
//! carrying the same embedding. The model therefore cannot memorize classes;
//! it has to match the query against the supports. All randomness flows from
//! one seed, so a (config, draw) pair is reproducible forever.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::features::{FrameFeatures, ENCODER_STRIDE};
use crate::temporal::TemporalSegment;

use super::{DataError, Draw, Episode, SupportRef};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub n_supports: usize,
    pub channels: usize,
    /// Planted instances per query.
    pub gt_count: usize,
    /// Query length in frames; must be a multiple of the feature stride.
    pub num_frames: usize,
    /// Support clip length in frames; same stride constraint.
    pub support_frames: usize,
    /// Planted instance length bounds, in feature steps.
    pub min_gt_steps: usize,
    pub max_gt_steps: usize,
    /// Stddev of the additive gaussian on every step.
    pub noise_std: f64,
    pub seed: u64,
    /// Supports drawn from a wrong class instead of the common one.
    pub noisy_count: usize,
    /// All noisy supports share a single wrong class.
    pub noisy_same_class: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_supports: 5,
            channels: 64,
            gt_count: 2,
            num_frames: 512,
            support_frames: 128,
            min_gt_steps: 8,
            max_gt_steps: 24,
            noise_std: 0.25,
            seed: 0,
            noisy_count: 0,
            noisy_same_class: false,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |detail: &str| Err(DataError::BadSyntheticConfig(detail.to_string()));
        if self.n_supports == 0 {
            return bad("n_supports must be positive");
        }
        if self.noisy_count > self.n_supports {
            return bad("noisy_count exceeds n_supports");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.gt_count == 0 {
            return bad("gt_count must be positive");
        }
        if self.num_frames == 0 || self.num_frames % ENCODER_STRIDE != 0 {
            return bad("num_frames must be a positive multiple of the stride");
        }
        if self.support_frames == 0 || self.support_frames % ENCODER_STRIDE != 0 {
            return bad("support_frames must be a positive multiple of the stride");
        }
        if self.min_gt_steps < 1 || self.min_gt_steps > self.max_gt_steps {
            return bad("need 1 <= min_gt_steps <= max_gt_steps");
        }
        let steps = self.num_frames / ENCODER_STRIDE;
        // each instance lives in its own block with one background step of
        // margin on either side
        if steps / self.gt_count < self.max_gt_steps + 2 {
            return bad("query too short for gt_count instances of max_gt_steps");
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad("noise_std must be finite and non-negative");
        }
        Ok(())
    }
}

/// An [`Episode`] bundled with its step features, ready to feed the model
/// without any backbone.
#[derive(Debug, Clone)]
pub struct SyntheticEpisode {
    pub episode: Episode,
    pub query_feats: FrameFeatures<f32>,
    pub support_feats: Vec<FrameFeatures<f32>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noisy_rows(
    rng: &mut ChaCha8Rng,
    steps: usize,
    base: impl Fn(usize) -> Option<usize>,
    embeddings: &[Vec<f64>],
    channels: usize,
    std: f64,
) -> Vec<f32> {
    let mut data = Vec::with_capacity(steps * channels);
    for s in 0..steps {
        let emb = base(s).map(|i| &embeddings[i]);
        for c in 0..channels {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * std;
            let v = emb.map_or(0.0, |e| e[c]) + noise;
            data.push(v as f32);
        }
    }
    data
}

/// Generate one synthetic episode. The effective seed mixes `config.seed`
/// with the draw, so one config yields an unbounded family of episodes and
/// fixed draws stay disjoint from training ones.
pub fn synthesize_episode(
    config: &SyntheticConfig,
    draw: Draw,
) -> Result<SyntheticEpisode, DataError> {
    config.validate()?;
    let mixed = config
        .seed
        .wrapping_mul(0xA24B_AED4_963E_E407)
        .rotate_left(23)
        ^ draw.seed();
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let channels = config.channels;
    let steps = config.num_frames / ENCODER_STRIDE;
    let support_steps = config.support_frames / ENCODER_STRIDE;

    let common = unit_vector(&mut rng, channels);
    let wrong_classes = if config.noisy_count == 0 {
        0
    } else if config.noisy_same_class {
        1
    } else {
        config.noisy_count
    };
    let mut embeddings = vec![common];
    for _ in 0..wrong_classes {
        embeddings.push(unit_vector(&mut rng, channels));
    }

    // one instance per equal block of the step axis, with a margin step on
    // each side so instances never touch each other or the clip edges
    let mut gt_steps: Vec<(usize, usize)> = Vec::with_capacity(config.gt_count);
    for b in 0..config.gt_count {
        let lo = b * steps / config.gt_count;
        let hi = (b + 1) * steps / config.gt_count;
        let room = hi - lo - 2;
        let len = rng.random_range(config.min_gt_steps..=config.max_gt_steps.min(room));
        let start = rng.random_range(lo + 1..=hi - 1 - len);
        gt_steps.push((start, start + len));
    }

    let inside = |s: usize| -> Option<usize> {
        gt_steps
            .iter()
            .any(|&(a, b)| s >= a && s < b)
            .then_some(0usize)
    };
    let query_data = noisy_rows(&mut rng, steps, inside, &embeddings, channels, config.noise_std);

    let tag = format!("{mixed:016x}");
    let mut supports = Vec::with_capacity(config.n_supports);
    let mut support_feats = Vec::with_capacity(config.n_supports);
    for i in 0..config.n_supports {
        let noisy = i >= config.n_supports - config.noisy_count;
        let emb_idx = if !noisy {
            0
        } else if config.noisy_same_class {
            1
        } else {
            1 + (i - (config.n_supports - config.noisy_count))
        };
        let data = noisy_rows(
            &mut rng,
            support_steps,
            |_| Some(emb_idx),
            &embeddings,
            channels,
            config.noise_std,
        );
        let video_id = format!("syn-s{i}-{tag}");
        let class_label = if noisy {
            format!("distractor{}", emb_idx - 1)
        } else {
            "common".to_string()
        };
        supports.push(SupportRef {
            video_id: video_id.clone(),
            class_label,
            segment: TemporalSegment::new(0.0, config.support_frames as f64)
                .map_err(DataError::Temporal)?,
            noisy,
            image: false,
        });
        support_feats.push(
            FrameFeatures::new(
                video_id,
                ENCODER_STRIDE,
                crate::diffcore::Tensor::new(&[support_steps, channels], data)
                    .expect("row count times channels matches the data length"),
            )
            .expect("support clips are non-empty"),
        );
    }

    let gt_segments = gt_steps
        .iter()
        .map(|&(a, b)| {
            TemporalSegment::new(
                (a * ENCODER_STRIDE) as f64,
                (b * ENCODER_STRIDE) as f64,
            )
            .map_err(DataError::Temporal)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let query_id = format!("syn-q-{tag}");
    let episode = Episode {
        common_class: "common".to_string(),
        query_id: query_id.clone(),
        query_frames: config.num_frames,
        gt_segments,
        supports,
    };
    let query_feats = FrameFeatures::new(
        query_id,
        ENCODER_STRIDE,
        crate::diffcore::Tensor::new(&[steps, channels], query_data)
            .expect("row count times channels matches the data length"),
    )
    .expect("queries are non-empty");

    Ok(SyntheticEpisode {
        episode,
        query_feats,
        support_feats,
    })
}
