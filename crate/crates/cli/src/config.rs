//! Run configuration: one document covering the model, the schedule, the
//! synthetic data shape, real-data paths, and mode flags.
//!
//! Resolution is defaults, then the config file, then command-line flags,
//! each layer overriding the one before. `--synthetic` (or `mode.synthetic`
//! in the file) swaps the defaults from the full-scale preset to the desk
//! preset before the other layers apply. Every run writes its resolved form
//! back out, and feeding that echo to `--config` reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use comloc::data::{EpisodeOptions, SyntheticConfig};
use comloc::engine::TrainConfig;
use comloc::features::BackboneKind;
use comloc::model::ModelConfig;

pub const CONFIG_FILE: &str = "config.json";
/// Default output directory when neither the file nor the flags name one.
pub const OUT_DIR_ENV: &str = "COMLOC_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    /// Supports per episode (N), for generated and real data alike.
    pub supports: usize,
    pub mode: ModeFlags,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SynthShape,
    pub data: DataPaths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ModeFlags {
    /// Draw episodes from the seeded generator instead of a manifest.
    pub synthetic: bool,
    /// Supports drawn from a class other than the common one.
    pub noisy_supports: usize,
    /// Noisy supports share a single wrong class.
    pub noisy_same_class: bool,
    /// Supports are single frames.
    pub image_supports: bool,
    /// Pool predictions across episodes instead of averaging per-episode AP.
    pub micro_map: bool,
}

/// Shape of generated episodes. Support count and noise knobs live at the
/// top level since they are not generator-specific.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthShape {
    pub channels: usize,
    pub gt_count: usize,
    pub num_frames: usize,
    pub support_frames: usize,
    pub min_gt_steps: usize,
    pub max_gt_steps: usize,
    pub noise_std: f64,
    /// Seeds the embedding family; disjoint from the run seed.
    pub seed: u64,
}

impl Default for SynthShape {
    fn default() -> Self {
        let base = SyntheticConfig::default();
        Self {
            channels: base.channels,
            gt_count: base.gt_count,
            num_frames: base.num_frames,
            support_frames: base.support_frames,
            min_gt_steps: base.min_gt_steps,
            max_gt_steps: base.max_gt_steps,
            noise_std: base.noise_std,
            seed: base.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataPaths {
    /// Split manifest produced by `reorganize`.
    pub manifest: Option<PathBuf>,
    /// Directory of per-video feature files.
    pub features_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            manifest: None,
            features_dir: None,
            out_dir: std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
        }
    }
}

impl RunConfig {
    /// Full-scale defaults: encoder backbone, 40k-iteration schedule.
    pub fn paper_baseline() -> Self {
        Self {
            supports: 5,
            mode: ModeFlags::default(),
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            synthetic: SynthShape::default(),
            data: DataPaths::default(),
        }
    }

    /// Desk-scale defaults for generated data: passthrough features, a
    /// schedule that finishes in minutes.
    pub fn desk_baseline() -> Self {
        Self {
            supports: 5,
            mode: ModeFlags { synthetic: true, ..ModeFlags::default() },
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            synthetic: SynthShape::default(),
            data: DataPaths::default(),
        }
    }

    /// The generator configuration this run describes.
    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_supports: self.supports,
            channels: self.synthetic.channels,
            gt_count: self.synthetic.gt_count,
            num_frames: self.synthetic.num_frames,
            support_frames: self.synthetic.support_frames,
            min_gt_steps: self.synthetic.min_gt_steps,
            max_gt_steps: self.synthetic.max_gt_steps,
            noise_std: self.synthetic.noise_std,
            seed: self.synthetic.seed,
            noisy_count: self.mode.noisy_supports,
            noisy_same_class: self.mode.noisy_same_class,
        }
    }

    /// How episodes are drawn from a real-data pool.
    pub fn episode_options(&self) -> EpisodeOptions {
        EpisodeOptions {
            n_supports: self.supports,
            noisy_count: self.mode.noisy_supports,
            noisy_same_class: self.mode.noisy_same_class,
            image_supports: self.mode.image_supports,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.supports == 0 {
            bail!("supports must be at least 1");
        }
        if self.mode.noisy_supports > self.supports {
            bail!(
                "{} noisy supports cannot exceed the {} supports",
                self.mode.noisy_supports,
                self.supports
            );
        }
        self.model.validate().context("model")?;
        self.train.validate().context("train")?;
        if self.mode.synthetic {
            if self.model.backbone != BackboneKind::Passthrough {
                bail!("generated features feed the model directly; synthetic mode needs backbone = \"passthrough\"");
            }
            if self.model.channels != self.synthetic.channels {
                bail!(
                    "generated features are {} wide but the model expects {}",
                    self.synthetic.channels,
                    self.model.channels
                );
            }
            self.synthetic_config().validate().context("synthetic")?;
        }
        Ok(())
    }

    /// The resolved form, echoed into every artifact.
    pub fn echo(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config always serializes");
        text.push('\n');
        text
    }
}

// ---- file layer ----
//
// Every field is optional so a file can override any subset; whatever the
// file leaves out keeps the baseline value. The full echo is itself a valid
// file in which every field happens to be present.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPatch {
    pub supports: Option<usize>,
    pub mode: Option<ModePatch>,
    pub model: Option<ModelPatch>,
    pub train: Option<TrainPatch>,
    pub synthetic: Option<SynthPatch>,
    pub data: Option<DataPatch>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModePatch {
    pub synthetic: Option<bool>,
    pub noisy_supports: Option<usize>,
    pub noisy_same_class: Option<bool>,
    pub image_supports: Option<bool>,
    pub micro_map: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPatch {
    pub channels: Option<usize>,
    pub input_channels: Option<usize>,
    pub backbone: Option<BackboneKind>,
    pub support_parts: Option<usize>,
    pub pam_depth: Option<usize>,
    pub attn_dim: Option<usize>,
    pub value_dim: Option<usize>,
    pub residual_reduction: Option<usize>,
    pub head_hidden: Option<usize>,
    pub logit_scale: Option<bool>,
    pub anchors: Option<AnchorPatch>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorPatch {
    pub scales: Option<Vec<usize>>,
    pub stride: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPatch {
    pub learning_rate: Option<f64>,
    pub decayed_rate: Option<f64>,
    pub decay_at: Option<u64>,
    pub iterations: Option<u64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub overlap_threshold: Option<f64>,
    pub final_nms: Option<comloc::engine::FinalNms>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPatch {
    pub channels: Option<usize>,
    pub gt_count: Option<usize>,
    pub num_frames: Option<usize>,
    pub support_frames: Option<usize>,
    pub min_gt_steps: Option<usize>,
    pub max_gt_steps: Option<usize>,
    pub noise_std: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPatch {
    pub manifest: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

macro_rules! take {
    ($dst:expr, $patch:expr; $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $patch.$field {
            $dst.$field = v;
        })+
    };
}

fn apply(cfg: &mut RunConfig, patch: RunPatch) {
    take!(cfg, patch; supports);
    if let Some(p) = patch.mode {
        take!(cfg.mode, p; synthetic, noisy_supports, noisy_same_class, image_supports, micro_map);
    }
    if let Some(p) = patch.model {
        take!(cfg.model, p; channels, input_channels, backbone, support_parts, pam_depth,
              attn_dim, value_dim, residual_reduction, head_hidden, logit_scale);
        if let Some(a) = p.anchors {
            take!(cfg.model.anchors, a; scales, stride);
        }
    }
    if let Some(p) = patch.train {
        take!(cfg.train, p; learning_rate, decayed_rate, decay_at, iterations, batch_size,
              seed, overlap_threshold, final_nms);
    }
    if let Some(p) = patch.synthetic {
        take!(cfg.synthetic, p; channels, gt_count, num_frames, support_frames,
              min_gt_steps, max_gt_steps, noise_std, seed);
    }
    if let Some(p) = patch.data {
        if let Some(v) = p.manifest {
            cfg.data.manifest = Some(v);
        }
        if let Some(v) = p.features_dir {
            cfg.data.features_dir = Some(v);
        }
        if let Some(v) = p.out_dir {
            cfg.data.out_dir = v;
        }
    }
}

pub fn read_patch(path: &Path) -> Result<RunPatch> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "toml" => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        "json" => {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        }
        other => bail!(
            "config {} has extension {other:?}; expected .toml or .json",
            path.display()
        ),
    }
}

/// Flags shared by every run-shaped subcommand. Each one overrides the
/// matching config field; absent flags change nothing.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Config file (.toml or .json), applied over the defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Generated episodes and desk-scale defaults.
    #[arg(long)]
    pub synthetic: bool,
    /// Training iterations.
    #[arg(long, value_name = "N")]
    pub iters: Option<u64>,
    /// Initial learning rate.
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    /// Learning rate after the decay point.
    #[arg(long, value_name = "RATE")]
    pub decayed_lr: Option<f64>,
    /// Iteration after which the decayed rate applies.
    #[arg(long, value_name = "N")]
    pub decay_at: Option<u64>,
    /// Run seed: parameter init and episode draws.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Supports per episode (N).
    #[arg(long, value_name = "N")]
    pub supports: Option<usize>,
    /// Number of supports drawn from a wrong class.
    #[arg(long, value_name = "N")]
    pub noisy: Option<usize>,
    /// Noisy supports share one wrong class.
    #[arg(long)]
    pub noisy_same_class: bool,
    /// Single-frame supports.
    #[arg(long)]
    pub image_supports: bool,
    /// Pool predictions across episodes when computing mAP.
    #[arg(long)]
    pub micro_map: bool,
    /// Evaluation overlap threshold.
    #[arg(long, value_name = "TIOU")]
    pub overlap: Option<f64>,
    /// Use this absolute final-suppression threshold instead of the
    /// overlap-derived one.
    #[arg(long, value_name = "TIOU")]
    pub absolute_nms: Option<f64>,
    /// Alignment depth (number of stacked blocks).
    #[arg(long, value_name = "N")]
    pub depth: Option<usize>,
    /// Split manifest for real data.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Directory of per-video feature files.
    #[arg(long, value_name = "PATH")]
    pub features_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Defaults, then the file, then the flags.
pub fn resolve(flags: &Overrides) -> Result<RunConfig> {
    let patch = flags.config.as_deref().map(read_patch).transpose()?;
    let synthetic = flags.synthetic
        || patch
            .as_ref()
            .and_then(|p| p.mode.as_ref())
            .and_then(|m| m.synthetic)
            .unwrap_or(false);
    let mut cfg = if synthetic {
        RunConfig::desk_baseline()
    } else {
        RunConfig::paper_baseline()
    };
    let decay_explicit = flags.decay_at.is_some()
        || patch
            .as_ref()
            .and_then(|p| p.train.as_ref())
            .and_then(|t| t.decay_at)
            .is_some();
    if let Some(patch) = patch {
        apply(&mut cfg, patch);
    }

    if flags.synthetic {
        cfg.mode.synthetic = true;
    }
    if let Some(v) = flags.iters {
        cfg.train.iterations = v;
    }
    if let Some(v) = flags.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = flags.decayed_lr {
        cfg.train.decayed_rate = v;
    }
    if let Some(v) = flags.decay_at {
        cfg.train.decay_at = v;
    }
    if let Some(v) = flags.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = flags.supports {
        cfg.supports = v;
    }
    if let Some(v) = flags.noisy {
        cfg.mode.noisy_supports = v;
    }
    if flags.noisy_same_class {
        cfg.mode.noisy_same_class = true;
    }
    if flags.image_supports {
        cfg.mode.image_supports = true;
    }
    if flags.micro_map {
        cfg.mode.micro_map = true;
    }
    if let Some(v) = flags.overlap {
        cfg.train.overlap_threshold = v;
    }
    if let Some(v) = flags.absolute_nms {
        cfg.train.final_nms = comloc::engine::FinalNms::Absolute(v);
    }
    if let Some(v) = flags.depth {
        cfg.model.pam_depth = v;
    }
    if let Some(v) = &flags.manifest {
        cfg.data.manifest = Some(v.clone());
    }
    if let Some(v) = &flags.features_dir {
        cfg.data.features_dir = Some(v.clone());
    }
    if let Some(v) = &flags.out {
        cfg.data.out_dir = v.clone();
    }
    // a shortened run drags the preset decay point along unless the file or
    // a flag pinned it
    if !decay_explicit && cfg.train.decay_at >= cfg.train.iterations {
        cfg.train.decay_at = cfg.train.iterations.saturating_sub(1).max(1);
    }

    cfg.validate()?;
    Ok(cfg)
}
