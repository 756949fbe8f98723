//! Orchestration: the training schedule, single-episode inference, and the
//! sliding-window path for long queries.
//!
//! Training is one sequential loop at batch size one: draw an episode, run
//! the forward pass under the training selection policy, sum both loss
//! stages, backpropagate once, and take an adaptive-moment step. Everything
//! downstream of the run seed is deterministic, so two runs with the same
//! configuration produce identical loss traces and identical checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    sample_episode, synthesize_episode, DataError, Draw, Episode, EpisodeOptions, EpisodePool,
    SyntheticConfig, SyntheticEpisode,
};
use crate::diffcore::{
    save_checkpoint, CheckpointError, DiffError, ParamStore, Tape, Tensor,
};
use crate::features::FrameFeatures;
use crate::model::{
    bind_model, build_store, episode_loss, forward, EpisodeInputs, ModelConfig, ModelError,
    QueryInput, SupportInput,
};
use crate::proposals::SelectConfig;
use crate::scalar::Scalar;
use crate::temporal::{nms, sliding_windows, ScoredSegment, TemporalError, TemporalSegment};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Window lengths and overlap for queries longer than the largest window.
pub const LONG_WINDOW_LENGTHS: [usize; 3] = [256, 512, 768];
pub const LONG_WINDOW_OVERLAP: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("engine config: {0}")]
    Config(String),
    #[error("no features for video {0}")]
    MissingFeatures(String),
    #[error("non-finite loss at iteration {iteration}; snapshot at {snapshot}")]
    NonFinite { iteration: u64, snapshot: PathBuf },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// How the last suppression pass picks its threshold.
///
/// The refinement stage tends to pile several near-identical segments onto
/// one action, so the final pass runs a little under the evaluation overlap
/// and merges them; an absolute threshold is available instead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalNms {
    /// Evaluation overlap minus 0.1, never below 0.1.
    BelowOverlap,
    Absolute(f64),
}

impl FinalNms {
    pub fn threshold(&self, overlap: f64) -> f64 {
        match self {
            FinalNms::BelowOverlap => (overlap - 0.1).max(0.1),
            FinalNms::Absolute(t) => *t,
        }
    }
}

/// Schedule and seeding for one training run. `paper()` is the published
/// 40k-iteration schedule; `desk()` shrinks it to minutes on one core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Rate after the decay point.
    pub decayed_rate: f64,
    /// Iteration past which the decayed rate applies.
    pub decay_at: u64,
    pub iterations: u64,
    /// Episodes per gradient step. Only 1 is supported.
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluation overlap the run targets.
    pub overlap_threshold: f64,
    pub final_nms: FinalNms,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-5,
            decayed_rate: 1e-6,
            decay_at: 25_000,
            iterations: 40_000,
            batch_size: 1,
            seed: 0,
            overlap_threshold: 0.5,
            final_nms: FinalNms::BelowOverlap,
        }
    }

    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            decayed_rate: 1e-4,
            decay_at: 1_500,
            iterations: 2_000,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |detail: &str| Err(EngineError::Config(detail.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be finite and positive");
        }
        if !(self.decayed_rate.is_finite() && self.decayed_rate > 0.0) {
            return bad("decayed_rate must be finite and positive");
        }
        if self.decay_at >= self.iterations {
            return bad("decay_at must come before the last iteration");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size != 1 {
            return bad("only batch_size 1 is supported");
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0) {
            return bad("overlap_threshold must lie in (0, 1)");
        }
        if let FinalNms::Absolute(t) = self.final_nms {
            if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
                return bad("absolute final NMS threshold must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Step rate at a 1-based iteration: the base rate through `decay_at`,
    /// the decayed rate after it.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration > self.decay_at {
            self.decayed_rate
        } else {
            self.learning_rate
        }
    }
}

/// One episode ready for the forward pass: inputs plus its ground truth in
/// frame coordinates.
#[derive(Clone, Debug)]
pub struct TrainEpisode<F> {
    pub inputs: EpisodeInputs<F>,
    pub ground_truth: Vec<TemporalSegment<f64>>,
}

/// Packs a generated episode's features into model inputs at any precision.
pub fn synthetic_inputs<F: Scalar>(ep: &SyntheticEpisode) -> TrainEpisode<F> {
    let query = QueryInput {
        rows: ep.query_feats.feats.cast::<F>(),
        stride: ep.query_feats.stride,
        num_frames: ep.episode.query_frames,
    };
    let supports = ep
        .support_feats
        .iter()
        .zip(&ep.episode.supports)
        .map(|(feats, sref)| SupportInput {
            rows: feats.feats.cast::<F>(),
            image: sref.image,
        })
        .collect();
    TrainEpisode {
        inputs: EpisodeInputs { query, supports },
        ground_truth: ep.episode.gt_segments.clone(),
    }
}

fn slice_rows<F: Scalar>(rows: &Tensor<F>, r0: usize, r1: usize) -> Result<Tensor<F>, DiffError> {
    let (_, cols) = rows.dims2()?;
    Tensor::new(&[r1 - r0, cols], rows.data()[r0 * cols..r1 * cols].to_vec())
}

/// Rows of `feats` covering `segment`, in the feature's own stride.
fn rows_covering<F: Scalar>(
    feats: &FrameFeatures<F>,
    segment: &TemporalSegment<f64>,
) -> Result<Tensor<F>, EngineError> {
    let steps = feats.num_steps();
    let stride = feats.stride as f64;
    let r0 = ((segment.start() / stride).floor() as usize).min(steps.saturating_sub(1));
    let r1 = (((segment.end() / stride).ceil() as usize).max(r0 + 1)).min(steps);
    let r0 = r0.min(r1 - 1);
    Ok(slice_rows(&feats.feats, r0, r1)?)
}

/// Builds model inputs for a sampled episode from preloaded features.
pub fn episode_inputs<F: Scalar>(
    episode: &Episode,
    features: &BTreeMap<String, FrameFeatures<F>>,
) -> Result<TrainEpisode<F>, EngineError> {
    let qf = features
        .get(&episode.query_id)
        .ok_or_else(|| EngineError::MissingFeatures(episode.query_id.clone()))?;
    let query = QueryInput {
        rows: qf.feats.clone(),
        stride: qf.stride,
        num_frames: episode.query_frames,
    };
    let mut supports = Vec::with_capacity(episode.supports.len());
    for sref in &episode.supports {
        let sf = features
            .get(&sref.video_id)
            .ok_or_else(|| EngineError::MissingFeatures(sref.video_id.clone()))?;
        supports.push(SupportInput {
            rows: rows_covering(sf, &sref.segment)?,
            image: sref.image,
        });
    }
    Ok(TrainEpisode {
        inputs: EpisodeInputs { query, supports },
        ground_truth: episode.gt_segments.clone(),
    })
}

/// Where training episodes come from.
pub enum EpisodeSource<'a, F: Scalar> {
    /// A fresh generator draw per iteration.
    Synthetic(SyntheticConfig),
    /// Cycles a fixed list; iteration i serves entry (i - 1) mod len.
    Fixed(Vec<TrainEpisode<F>>),
    /// Samples annotated videos whose features are already in memory.
    Pool {
        pool: &'a EpisodePool<'a>,
        options: EpisodeOptions,
        features: &'a BTreeMap<String, FrameFeatures<F>>,
    },
}

// distinct training draws per iteration without correlating adjacent seeds
fn draw_seed(seed: u64, iteration: u64) -> u64 {
    seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<F: Scalar> EpisodeSource<'_, F> {
    pub fn draw(&self, seed: u64, iteration: u64) -> Result<TrainEpisode<F>, EngineError> {
        match self {
            EpisodeSource::Synthetic(config) => {
                let ep = synthesize_episode(config, Draw::Seed(draw_seed(seed, iteration)))?;
                Ok(synthetic_inputs(&ep))
            }
            EpisodeSource::Fixed(episodes) => {
                if episodes.is_empty() {
                    return Err(EngineError::Config("fixed source has no episodes".into()));
                }
                let idx = ((iteration - 1) % episodes.len() as u64) as usize;
                Ok(episodes[idx].clone())
            }
            EpisodeSource::Pool {
                pool,
                options,
                features,
            } => {
                let ep = sample_episode(pool, options, Draw::Seed(draw_seed(seed, iteration)))?;
                episode_inputs(&ep, features)
            }
        }
    }
}

/// Adaptive moment estimation with the conventional constants. Moments live
/// alongside the store, indexed by registration order; the update arithmetic
/// runs in 64-bit regardless of the parameter precision.
pub struct Adam<F> {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = (0..store.len())
            .map(|i| {
                let shape = store.tensor_at(i).shape().to_vec();
                Tensor::zeros(&shape)
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update over every parameter that received a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[Option<Tensor<F>>],
        lr: f64,
    ) -> Result<(), EngineError> {
        if grads.len() != self.m.len() {
            return Err(EngineError::Config(
                "gradient list does not match the parameter store".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grad.data();
            let w = store.tensor_at_mut(i).data_mut();
            for k in 0..g.len() {
                let gk = g[k].to_f64();
                let mk = self.beta1 * m[k].to_f64() + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k].to_f64() + (1.0 - self.beta2) * gk * gk;
                m[k] = F::from_f64(mk);
                v[k] = F::from_f64(vk);
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + self.epsilon);
                w[k] = F::from_f64(w[k].to_f64() - update);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub total_loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome<F> {
    pub store: ParamStore<F>,
    pub records: Vec<TrainRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Runs the full schedule and leaves a checkpoint plus a line-per-iteration
/// log in `out_dir`. `echo` is stored in the checkpoint verbatim so a run
/// can be reproduced from its own artifact; pass the serialized run
/// configuration there.
///
/// A non-finite loss aborts immediately: the offending parameters are
/// snapshotted next to the log and the error names both.
pub fn train<F: Scalar>(
    config: &TrainConfig,
    model: &ModelConfig,
    source: &EpisodeSource<'_, F>,
    out_dir: &Path,
    echo: Option<&str>,
) -> Result<TrainOutcome<F>, EngineError> {
    config.validate()?;
    model.validate()?;
    fs::create_dir_all(out_dir)?;
    let default_echo;
    let echo = match echo {
        Some(e) => e,
        None => {
            default_echo = serde_json::to_string(&serde_json::json!({
                "train": config,
                "model": model,
            }))?;
            &default_echo
        }
    };

    let mut store: ParamStore<F> = build_store(model, config.seed)?;
    let mut adam = Adam::new(&store);
    let select = SelectConfig::train();
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut records = Vec::with_capacity(config.iterations as usize);

    for iteration in 1..=config.iterations {
        let episode = source.draw(config.seed, iteration)?;
        let lr = config.lr_at(iteration);
        let (record, grads) = {
            let mut tape = Tape::new(&store);
            let vars = bind_model(&mut tape, model)?;
            let fwd = forward(&mut tape.graph, model, &vars, &episode.inputs, &select)?;
            let loss = episode_loss(
                &mut tape.graph,
                &fwd,
                &episode.ground_truth,
                config.batch_size,
            )?;
            let scalar = |v| tape.graph.value(v).data()[0].to_f64();
            let record = TrainRecord {
                iteration,
                total_loss: scalar(loss.total),
                cls_loss: scalar(loss.agnostic.cls) + scalar(loss.conditioned.cls),
                reg_loss: scalar(loss.agnostic.reg) + scalar(loss.conditioned.reg),
                lr,
            };
            if !record.total_loss.is_finite() {
                writeln!(log, "{}", serde_json::to_string(&record)?)?;
                log.flush()?;
                let snapshot = out_dir.join(format!("abort-{iteration:06}.ckpt"));
                save_checkpoint(&snapshot, &store, iteration, echo)?;
                return Err(EngineError::NonFinite {
                    iteration,
                    snapshot,
                });
            }
            let grads = tape.graph.backward(loss.total)?;
            (record, tape.collect_grads(&grads))
        };
        adam.step(&mut store, &grads, lr)?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        records.push(record);
    }
    log.flush()?;

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &store, config.iterations, echo)?;
    Ok(TrainOutcome {
        store,
        records,
        checkpoint,
        log: log_path,
    })
}

/// Final detections for one query: a post-suppression antichain sorted by
/// descending score, every segment inside the query extent.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predictions: Vec<ScoredSegment<f64>>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn top(&self) -> Option<&ScoredSegment<f64>> {
        self.predictions.first()
    }
}

/// Inference knobs: the evaluation overlap the final suppression is derived
/// from, and the proposal selection policy (wide slate, same filtering).
#[derive(Clone, Debug)]
pub struct InferSettings {
    pub overlap_threshold: f64,
    pub final_nms: FinalNms,
    pub select: SelectConfig,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.5,
            final_nms: FinalNms::BelowOverlap,
            select: SelectConfig::eval(),
        }
    }
}

impl InferSettings {
    pub fn from_train(config: &TrainConfig) -> Self {
        Self {
            overlap_threshold: config.overlap_threshold,
            final_nms: config.final_nms,
            select: SelectConfig::eval(),
        }
    }

    fn final_threshold(&self) -> f64 {
        self.final_nms.threshold(self.overlap_threshold)
    }
}

/// One episode through the trained model: proposals, filtering, alignment,
/// refinement, then the final suppression. Padding slots never surface.
pub fn infer<F: Scalar>(
    store: &ParamStore<F>,
    model: &ModelConfig,
    inputs: &EpisodeInputs<F>,
    settings: &InferSettings,
) -> Result<PredictionSet, EngineError> {
    let mut tape = Tape::new(store);
    let vars = bind_model(&mut tape, model)?;
    let fwd = forward(&mut tape.graph, model, &vars, inputs, &settings.select)?;
    let mut candidates = Vec::with_capacity(fwd.batch.valid_count());
    for r in 0..fwd.batch.len() {
        if !fwd.batch.valid[r] {
            continue;
        }
        candidates.push(ScoredSegment::new(fwd.refined[r], fwd.probs[r])?);
    }
    let kept = nms(&candidates, settings.final_threshold())?;
    Ok(PredictionSet { predictions: kept })
}

/// Multi-scale inference for queries longer than the largest window: tile
/// the query, infer each window, shift every detection by its window start,
/// and run one suppression pass over the pooled set. A query that fits a
/// single window takes the plain path unchanged.
pub fn infer_long<F: Scalar>(
    store: &ParamStore<F>,
    model: &ModelConfig,
    inputs: &EpisodeInputs<F>,
    settings: &InferSettings,
) -> Result<PredictionSet, EngineError> {
    let max_len = LONG_WINDOW_LENGTHS[LONG_WINDOW_LENGTHS.len() - 1];
    if inputs.query.num_frames <= max_len {
        return infer(store, model, inputs, settings);
    }

    let windows = sliding_windows::<f64>(
        inputs.query.num_frames,
        &LONG_WINDOW_LENGTHS,
        LONG_WINDOW_OVERLAP,
    )?;
    let stride = inputs.query.stride;
    let (steps, _) = inputs.query.rows.dims2()?;
    let mut pooled = Vec::new();
    for window in &windows {
        // snap to the feature grid: whole rows covering the window
        let r0 = ((window.start() / stride as f64).floor() as usize).min(steps - 1);
        let r1 = (((window.end() / stride as f64).ceil() as usize).max(r0 + 1)).min(steps);
        let shift = (r0 * stride) as f64;
        let win_frames = ((r1 - r0) * stride).min(inputs.query.num_frames - r0 * stride);
        let win_inputs = EpisodeInputs {
            query: QueryInput {
                rows: slice_rows(&inputs.query.rows, r0, r1)?,
                stride,
                num_frames: win_frames,
            },
            supports: inputs.supports.clone(),
        };
        let preds = infer(store, model, &win_inputs, settings)?;
        for p in preds.predictions {
            pooled.push(ScoredSegment::new(p.segment().shift(shift)?, p.score())?);
        }
    }
    let kept = nms(&pooled, settings.final_threshold())?;
    Ok(PredictionSet { predictions: kept })
}
