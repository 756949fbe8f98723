//! Annotation ingest, dataset reorganization, and episode sampling.
//!
//! The flow is: parse annotation files into [`AnnotatedVideo`] records, split
//! class labels into disjoint train/val/test sets, reorganize videos per the
//! single-instance or multi-instance regime, then draw few-shot episodes
//! (a query video plus N trimmed supports sharing one hidden action class).
//! A synthetic generator produces fully seeded episodes with attached
//! features for desk-scale end-to-end runs.

mod episodes;
mod ingest;
mod splits;
mod synth;

pub use episodes::{sample_episode, Draw, Episode, EpisodeOptions, EpisodePool, SupportRef};
pub use ingest::{ingest_annotations, ActionInstance, AnnotatedVideo, AnnotationFormat};
pub use splits::{
    read_manifest, reorganize_common_instance, reorganize_multi_instance, split_classes,
    write_manifest, ClassSplit, PhaseVideos, SplitMode, ACTIVITYNET_TEST, ACTIVITYNET_TRAIN,
    ACTIVITYNET_VAL, THUMOS_TEST, THUMOS_TRAIN, THUMOS_VAL,
};
pub use synth::{synthesize_episode, SyntheticConfig, SyntheticEpisode};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Val,
    Test,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Train, Phase::Val, Phase::Test];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("annotation io: {0}")]
    Io(#[from] std::io::Error),
    #[error("annotation parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("need at least 3 classes to split, got {0}")]
    TooFewClasses(usize),
    #[error("fixed split names missing from the data: {0:?}")]
    MissingClasses(Vec<String>),
    #[error("no class has enough videos for {needed} supports plus a query")]
    NoEligibleClass { needed: usize },
    #[error("not enough classes for {0} distinct noisy supports")]
    NotEnoughNoisyClasses(usize),
    #[error("synthetic config: {0}")]
    BadSyntheticConfig(String),
    #[error(transparent)]
    Temporal(#[from] crate::temporal::TemporalError),
}
