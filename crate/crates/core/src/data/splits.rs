//! Class splits and dataset reorganization.
//!
//! Classes are divided into disjoint train/val/test label sets, either by a
//! seeded 80/10/10 shuffle or from the fixed benchmark lists below. Videos
//! are then reorganized per regime: the single-instance regime cuts every
//! multi-action video into one derived video per instance, the
//! multi-instance regime keeps videos whole and assigns each to the phase of
//! its majority class.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ingest::{ActionInstance, AnnotatedVideo};
use super::{DataError, Phase};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl ClassSplit {
    pub fn phase_of(&self, class: &str) -> Option<Phase> {
        if self.train.contains(class) {
            Some(Phase::Train)
        } else if self.val.contains(class) {
            Some(Phase::Val)
        } else if self.test.contains(class) {
            Some(Phase::Test)
        } else {
            None
        }
    }

    pub fn classes(&self, phase: Phase) -> &BTreeSet<String> {
        match phase {
            Phase::Train => &self.train,
            Phase::Val => &self.val,
            Phase::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.val)
            && self.train.is_disjoint(&self.test)
            && self.val.is_disjoint(&self.test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Seeded 80/10/10 shuffle.
    Random { seed: u64 },
    /// The fixed 160/20/20 benchmark lists.
    FixedActivityNet,
    /// The fixed 16/2/2 benchmark lists.
    FixedThumos,
}

pub fn split_classes(classes: &BTreeSet<String>, mode: SplitMode) -> Result<ClassSplit, DataError> {
    if classes.len() < 3 {
        return Err(DataError::TooFewClasses(classes.len()));
    }
    let split = match mode {
        SplitMode::Random { seed } => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut names: Vec<&String> = classes.iter().collect();
            names.shuffle(&mut rng);
            let n = names.len();
            let n_val = ((n as f64) * 0.1).round().max(1.0) as usize;
            let n_test = n_val.min(n - n_val - 1);
            let n_train = n - n_val - n_test;
            ClassSplit {
                train: names[..n_train].iter().map(|s| s.to_string()).collect(),
                val: names[n_train..n_train + n_val].iter().map(|s| s.to_string()).collect(),
                test: names[n_train + n_val..].iter().map(|s| s.to_string()).collect(),
            }
        }
        SplitMode::FixedActivityNet => {
            fixed_split(classes, &ACTIVITYNET_TRAIN, &ACTIVITYNET_VAL, &ACTIVITYNET_TEST)?
        }
        SplitMode::FixedThumos => fixed_split(classes, &THUMOS_TRAIN, &THUMOS_VAL, &THUMOS_TEST)?,
    };
    debug_assert!(split.is_disjoint());
    Ok(split)
}

fn fixed_split(
    classes: &BTreeSet<String>,
    train: &[&str],
    val: &[&str],
    test: &[&str],
) -> Result<ClassSplit, DataError> {
    let missing: Vec<String> = train
        .iter()
        .chain(val)
        .chain(test)
        .filter(|name| !classes.contains(**name))
        .map(|name| name.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingClasses(missing));
    }
    let listed: BTreeSet<&str> = train.iter().chain(val).chain(test).copied().collect();
    for extra in classes.iter().filter(|c| !listed.contains(c.as_str())) {
        log::warn!("class {extra} is not part of the fixed split and will be unused");
    }
    Ok(ClassSplit {
        train: train.iter().map(|s| s.to_string()).collect(),
        val: val.iter().map(|s| s.to_string()).collect(),
        test: test.iter().map(|s| s.to_string()).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseVideos {
    pub train: Vec<AnnotatedVideo>,
    pub val: Vec<AnnotatedVideo>,
    pub test: Vec<AnnotatedVideo>,
}

impl PhaseVideos {
    pub fn phase(&self, phase: Phase) -> &[AnnotatedVideo] {
        match phase {
            Phase::Train => &self.train,
            Phase::Val => &self.val,
            Phase::Test => &self.test,
        }
    }

    fn push(&mut self, phase: Phase, video: AnnotatedVideo) {
        match phase {
            Phase::Train => self.train.push(video),
            Phase::Val => self.val.push(video),
            Phase::Test => self.test.push(video),
        }
    }
}

/// Single-instance regime: every instance becomes its own derived video
/// containing that instance plus surrounding background up to the midpoint
/// toward each neighboring instance. Derived videos longer than
/// `max_frames` are discarded; phase follows the instance's class.
pub fn reorganize_common_instance(
    videos: &[AnnotatedVideo],
    split: &ClassSplit,
    max_frames: usize,
) -> PhaseVideos {
    let mut out = PhaseVideos::default();
    for video in videos {
        let mut order: Vec<usize> = (0..video.instances.len()).collect();
        order.sort_by(|&a, &b| {
            video.instances[a]
                .segment
                .start()
                .total_cmp(&video.instances[b].segment.start())
        });
        let single = video.instances.len() == 1;
        for (rank, &idx) in order.iter().enumerate() {
            let inst = &video.instances[idx];
            let Some(phase) = split.phase_of(&inst.label) else {
                continue;
            };
            // background extends to the midpoint toward each neighboring
            // instance, or to the video edge when there is none; never cut
            // into the instance itself (neighbors may overlap it)
            let lo = if rank == 0 {
                0.0
            } else {
                let prev_end = video.instances[order[rank - 1]].segment.end();
                ((prev_end + inst.segment.start()) / 2.0)
                    .floor()
                    .clamp(0.0, inst.segment.start())
            };
            let hi = if rank + 1 == order.len() {
                video.num_frames as f64
            } else {
                let next_start = video.instances[order[rank + 1]].segment.start();
                ((inst.segment.end() + next_start) / 2.0)
                    .ceil()
                    .clamp(inst.segment.end(), video.num_frames as f64)
            };
            let derived_frames = (hi - lo).round() as usize;
            if derived_frames > max_frames {
                continue;
            }
            let shifted = inst
                .segment
                .shift(-lo)
                .expect("lo never exceeds the instance start");
            let derived = AnnotatedVideo {
                video_id: if single {
                    video.video_id.clone()
                } else {
                    format!("{}#{}", video.video_id, rank)
                },
                num_frames: derived_frames,
                fps: video.fps,
                instances: vec![ActionInstance { label: inst.label.clone(), segment: shifted }],
            };
            out.push(phase, derived);
        }
    }
    out
}

/// Multi-instance regime: videos stay whole. A video goes to the phase
/// holding the majority of its instances; ties resolve train, then val,
/// then test. Videos with no instance in any split class are dropped.
pub fn reorganize_multi_instance(videos: &[AnnotatedVideo], split: &ClassSplit) -> PhaseVideos {
    let mut out = PhaseVideos::default();
    for video in videos {
        let mut counts = [0usize; 3];
        for inst in &video.instances {
            if let Some(phase) = split.phase_of(&inst.label) {
                counts[phase as usize] += 1;
            }
        }
        // strict > keeps the earliest phase on ties: train, then val
        let mut winner = None;
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > best {
                best = c;
                winner = Some(Phase::ALL[i]);
            }
        }
        if let Some(phase) = winner {
            out.push(phase, video.clone());
        }
    }
    out
}

/// Everything needed to reproduce a reorganization, with stable ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub split: ClassSplit,
    pub videos: PhaseVideos,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn write_manifest(path: &Path, split: &ClassSplit, videos: &PhaseVideos) -> Result<(), DataError> {
    let manifest = SplitManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        split: split.clone(),
        videos: videos.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(ClassSplit, PhaseVideos), DataError> {
    let text = fs::read_to_string(path)?;
    let manifest: SplitManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(DataError::Malformed {
            line: 0,
            detail: format!("manifest schema {} unsupported", manifest.schema_version),
        });
    }
    Ok((manifest.split, manifest.videos))
}
pub const ACTIVITYNET_TRAIN: [&str; 160] = [
    "Fun sliding down", "Beer pong", "Getting a piercing", "Shoveling snow",
    "Kneeling", "Tumbling", "Playing water polo", "Washing dishes",
    "Blowing leaves", "Playing congas", "Making a lemonade",
    "Playing kickball", "Removing ice from car", "Playing racquetball",
    "Swimming", "Playing bagpipes", "Painting", "Assembling bicycle",
    "Playing violin", "Surfing", "Making a sandwich", "Welding", "Hopscotch",
    "Gargling mouthwash", "Baking cookies", "Braiding hair", "Capoeira",
    "Slacklining", "Plastering", "Changing car wheel", "Chopping wood",
    "Removing curlers", "Horseback riding", "Smoking hookah",
    "Doing a powerbomb", "Playing ten pins", "Getting a haircut",
    "Playing beach volleyball", "Making a cake", "Clean and jerk",
    "Trimming branches or hedges", "Drum corps", "Windsurfing", "Kite flying",
    "Using parallel bars", "Doing kickboxing", "Cleaning shoes",
    "Playing field hockey", "Playing squash", "Rollerblading",
    "Playing drums", "Playing rubik cube", "Sharpening knives", "Zumba",
    "Raking leaves", "Bathing dog", "Tug of war", "Ping-pong",
    "Using the balance beam", "Playing lacrosse", "Scuba diving",
    "Preparing pasta", "Brushing teeth", "Playing badminton", "Mixing drinks",
    "Discus throw", "Playing ice hockey", "Doing crunches",
    "Wrapping presents", "Hand washing clothes", "Rock climbing",
    "Cutting the grass", "Wakeboarding", "Futsal", "Playing piano",
    "Baton twirling", "Mooping floor", "Triple jump", "Longboarding",
    "Polishing shoes", "Doing motocross", "Arm wrestling", "Doing fencing",
    "Hammer throw", "Shot put", "Playing pool", "Blow-drying hair", "Cricket",
    "Spinning", "Running a marathon", "Table soccer", "Playing flauta",
    "Ice fishing", "Tai chi", "Archery", "Shaving", "Using the monkey bar",
    "Layup drill in basketball", "Spread mulch", "Skateboarding", "Canoeing",
    "Mowing the lawn", "Beach soccer", "Hanging wallpaper", "Tango",
    "Disc dog", "Powerbocking", "Getting a tattoo", "Doing nails",
    "Snowboarding", "Putting on shoes", "Clipping cat claws", "Snow tubing",
    "River tubing", "Putting on makeup", "Decorating the Christmas tree",
    "Fixing bicycle", "Hitting a pinata", "High jump", "Doing karate",
    "Kayaking", "Grooming dog", "Bungee jumping", "Washing hands",
    "Painting fence", "Doing step aerobics", "Installing carpet",
    "Playing saxophone", "Long jump", "Javelin throw", "Playing accordion",
    "Smoking a cigarette", "Belly dance", "Playing polo", "Throwing darts",
    "Roof shingle removal", "Tennis serve with ball bouncing", "Skiing",
    "Peeling potatoes", "Elliptical trainer", "Building sandcastles",
    "Drinking beer", "Rock-paper-scissors", "Using the pommel horse",
    "Croquet", "Laying tile", "Cleaning windows", "Fixing the roof",
    "Springboard diving", "Waterskiing", "Using uneven bars",
    "Having an ice cream", "Sailing", "Washing face", "Knitting",
    "Bullfighting", "Applying sunscreen", "Painting furniture",
    "Grooming horse", "Carving jack-o-lanterns",
];

pub const ACTIVITYNET_VAL: [&str; 20] = [
    "Swinging at the playground", "Dodgeball", "Ballet", "Playing harmonica",
    "Paintball", "Cumbia", "Rafting", "Hula hoop", "Cheerleading",
    "Vacuuming floor", "Playing blackjack", "Waxing skis", "Curling",
    "Using the rowing machine", "Ironing clothes", "Playing guitarra", "Sumo",
    "Putting in contact lenses", "Brushing hair", "Volleyball",
];

pub const ACTIVITYNET_TEST: [&str; 20] = [
    "Hurling", "Polishing forniture", "BMX", "Riding bumper cars",
    "Starting a campfire", "Walking the dog", "Preparing salad",
    "Plataform diving", "Breakdancing", "Camel ride", "Hand car wash",
    "Making an omelette", "Shuffleboard", "Calf roping", "Shaving legs",
    "Snatch", "Cleaning sink", "Rope skipping", "Drinking coffee",
    "Pole vault",
];

pub const THUMOS_TRAIN: [&str; 16] = [
    "BaseballPitch", "BasketballDunk", "Billiards", "CleanAndJerk",
    "CliffDiving", "CricketBowling", "CricketShot", "Diving", "FrisbeeCatch",
    "GolfSwing", "HammerThrow", "HighJump", "JavelinThrow", "LongJump",
    "PoleVault", "Shotput",
];

pub const THUMOS_VAL: [&str; 2] = [
    "SoccerPenalty", "TennisSwing",
];

pub const THUMOS_TEST: [&str; 2] = [
    "ThrowDiscus", "VolleyballSpiking",
];
