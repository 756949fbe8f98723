//! Command-line driver: reorganize data, train, localize, evaluate, sweep
//! support counts, and audit the numerics.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use comloc::data::{
    ingest_annotations, read_manifest, reorganize_common_instance, reorganize_multi_instance,
    sample_episode, split_classes, synthesize_episode, write_manifest, AnnotatedVideo,
    AnnotationFormat, Draw, EpisodePool, Phase, SplitMode,
};
use comloc::diffcore::{load_checkpoint, store_from_checkpoint, ParamStore};
use comloc::engine::{
    episode_inputs, infer_long, synthetic_inputs, train, EpisodeSource, InferSettings,
    PredictionSet, TrainEpisode,
};
use comloc::eval::{evaluate, Aggregation, EvalEpisode, EvalResult, EVAL_THRESHOLDS};
use comloc::features::{load_features, FrameFeatures};
use comloc::model::gradcheck_suite;
use comloc::report::{checkpoint_id, write_plots, write_report, write_sweep_plot, RunMeta};
use comloc::temporal::TemporalSegment;

use config::{resolve, Overrides, RunConfig, CONFIG_FILE};

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "comloc",
    version,
    about = "Localize a common action in an untrimmed video from a few trimmed supports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split classes and rewrite annotations into a per-phase manifest.
    Reorganize(ReorganizeArgs),
    /// Train and leave a checkpoint, an iteration log, and the config echo.
    Train(RunArgs),
    /// Localize the common action in one episode and write the predictions.
    Infer(InferArgs),
    /// Evaluate fixed episodes; write the result document and plots.
    Eval(EvalArgs),
    /// Evaluate across support counts N = 1..=max.
    Sweep(SweepArgs),
    /// Finite-difference audit of every differentiable module.
    Gradcheck(GradcheckArgs),
    /// Brute-force oracle suites for the numeric plumbing.
    Selftest,
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    flags: Overrides,
}

#[derive(clap::Args)]
struct InferArgs {
    #[command(flatten)]
    flags: Overrides,
    /// Checkpoint to load (defaults to the output directory's).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Which fixed episode to draw.
    #[arg(long, value_name = "INDEX", default_value_t = 0)]
    index: u64,
    /// Phase the episode is drawn from.
    #[arg(long, value_enum, default_value_t = PhaseArg::Val)]
    phase: PhaseArg,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: Overrides,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Number of fixed episodes to evaluate.
    #[arg(long, value_name = "N", default_value_t = 50)]
    episodes: u64,
    #[arg(long, value_enum, default_value_t = PhaseArg::Val)]
    phase: PhaseArg,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: Overrides,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Largest support count; the sweep covers 1..=max.
    #[arg(long, value_name = "N", default_value_t = 5)]
    max_supports: usize,
    #[arg(long, value_name = "N", default_value_t = 50)]
    episodes: u64,
    #[arg(long, value_enum, default_value_t = PhaseArg::Val)]
    phase: PhaseArg,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct ReorganizeArgs {
    /// Annotation file to ingest.
    #[arg(long, value_name = "PATH")]
    annotations: PathBuf,
    #[arg(long, value_enum)]
    format: FormatArg,
    /// Single-instance derivation or whole multi-instance videos.
    #[arg(long, value_enum, default_value_t = RegimeArg::Single)]
    regime: RegimeArg,
    /// Longest derived video kept in the single-instance regime.
    #[arg(long, value_name = "FRAMES", default_value_t = 768)]
    max_frames: usize,
    /// Benchmark class lists or a seeded shuffle.
    #[arg(long, value_enum, default_value_t = SplitArg::Fixed)]
    split: SplitArg,
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    split_seed: u64,
    /// Where the manifest goes.
    #[arg(long, value_name = "PATH")]
    out_manifest: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Activitynet,
    Thumos,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Fixed,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Train,
    Val,
    Test,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Phase {
        match p {
            PhaseArg::Train => Phase::Train,
            PhaseArg::Val => Phase::Val,
            PhaseArg::Test => Phase::Test,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Reorganize(args) => cmd_reorganize(args)?,
        Command::Train(args) => cmd_train(args)?,
        Command::Infer(args) => cmd_infer(args)?,
        Command::Eval(args) => cmd_eval(args)?,
        Command::Sweep(args) => cmd_sweep(args)?,
        Command::Gradcheck(args) => return cmd_gradcheck(args),
        Command::Selftest => return cmd_selftest(),
    }
    Ok(ExitCode::SUCCESS)
}

// ---- reorganize ----

fn cmd_reorganize(args: ReorganizeArgs) -> Result<()> {
    let format = match args.format {
        FormatArg::Activitynet => AnnotationFormat::ActivityNetStyle,
        FormatArg::Thumos => AnnotationFormat::ThumosStyle,
    };
    let videos = ingest_annotations(&args.annotations, format)
        .with_context(|| format!("ingesting {}", args.annotations.display()))?;
    let classes = videos
        .iter()
        .flat_map(|v| v.instances.iter().map(|i| i.label.clone()))
        .collect();
    let mode = match (args.split, args.format) {
        (SplitArg::Fixed, FormatArg::Activitynet) => SplitMode::FixedActivityNet,
        (SplitArg::Fixed, FormatArg::Thumos) => SplitMode::FixedThumos,
        (SplitArg::Random, _) => SplitMode::Random { seed: args.split_seed },
    };
    let split = split_classes(&classes, mode)?;
    let phased = match args.regime {
        RegimeArg::Single => reorganize_common_instance(&videos, &split, args.max_frames),
        RegimeArg::Multi => reorganize_multi_instance(&videos, &split),
    };
    if let Some(parent) = args.out_manifest.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_manifest(&args.out_manifest, &split, &phased)?;
    for phase in Phase::ALL {
        println!(
            "{}: {} classes, {} videos",
            phase.name(),
            split.classes(phase).len(),
            phased.phase(phase).len()
        );
    }
    println!("manifest: {}", args.out_manifest.display());
    Ok(())
}

// ---- train ----

fn cmd_train(args: RunArgs) -> Result<()> {
    let cfg = resolve(&args.flags)?;
    let out = cfg.data.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let echo = cfg.echo();
    std::fs::write(out.join(CONFIG_FILE), &echo)?;

    let started = Instant::now();
    let outcome = if cfg.mode.synthetic {
        let source = EpisodeSource::<f32>::Synthetic(cfg.synthetic_config());
        train(&cfg.train, &cfg.model, &source, &out, Some(&echo))?
    } else {
        let (videos, features) = load_real_phase(&cfg, Phase::Train)?;
        let pool = EpisodePool::new(&videos);
        let source = EpisodeSource::Pool {
            pool: &pool,
            options: cfg.episode_options(),
            features: &features,
        };
        train(&cfg.train, &cfg.model, &source, &out, Some(&echo))?
    };
    let last = outcome.records.last().expect("schedules run at least one iteration");
    println!(
        "trained {} iterations in {:.1}s, final loss {:.4}",
        last.iteration,
        started.elapsed().as_secs_f64(),
        last.total_loss
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    println!("config echo: {}", out.join(CONFIG_FILE).display());
    Ok(())
}

// ---- shared run plumbing ----

fn load_real_phase(
    cfg: &RunConfig,
    phase: Phase,
) -> Result<(Vec<AnnotatedVideo>, BTreeMap<String, FrameFeatures<f32>>)> {
    let Some(manifest) = &cfg.data.manifest else {
        bail!("real-data runs need a manifest; pass --manifest or set data.manifest");
    };
    let Some(features_dir) = &cfg.data.features_dir else {
        bail!("real-data runs need feature files; pass --features-dir or set data.features_dir");
    };
    let (_, phased) = read_manifest(manifest)?;
    let videos = phased.phase(phase).to_vec();
    if videos.is_empty() {
        bail!("manifest holds no {} videos", phase.name());
    }
    let mut features = BTreeMap::new();
    for video in &videos {
        let path = feature_path(features_dir, &video.video_id);
        let f = load_features::<f32>(&path, Some(expected_channels(cfg)))
            .with_context(|| format!("loading features {}", path.display()))?;
        features.insert(video.video_id.clone(), f);
    }
    Ok((videos, features))
}

/// One file per video: `<dir>/<id>.feat`.
fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.feat"))
}

/// Width the feature files must have: raw frame rows for the trainable
/// encoder, finished features for the passthrough backbone.
fn expected_channels(cfg: &RunConfig) -> usize {
    match cfg.model.backbone {
        comloc::features::BackboneKind::Encoder => cfg.model.input_channels,
        comloc::features::BackboneKind::Passthrough => cfg.model.channels,
    }
}

struct LoadedModel {
    store: ParamStore<f32>,
    path: PathBuf,
    sha256: String,
}

fn load_model(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<LoadedModel> {
    let path = flag
        .clone()
        .unwrap_or_else(|| cfg.data.out_dir.join(comloc::engine::CHECKPOINT_FILE));
    let ckpt = load_checkpoint(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let store = store_from_checkpoint::<f32>(&ckpt)?;
    let sha256 = checkpoint_id(&path)?;
    Ok(LoadedModel { store, path, sha256 })
}

/// Draws the fixed episode `index` of `phase` as model inputs plus ground
/// truth, from whichever data source the config names.
fn fixed_episode(
    cfg: &RunConfig,
    phase: Phase,
    index: u64,
    real: Option<&(Vec<AnnotatedVideo>, BTreeMap<String, FrameFeatures<f32>>)>,
) -> Result<TrainEpisode<f32>> {
    if cfg.mode.synthetic {
        let ep = synthesize_episode(&cfg.synthetic_config(), Draw::Fixed { phase, index })?;
        Ok(synthetic_inputs(&ep))
    } else {
        let (videos, features) = real.expect("real data preloaded for non-synthetic runs");
        let pool = EpisodePool::new(videos);
        let episode = sample_episode(&pool, &cfg.episode_options(), Draw::Fixed { phase, index })?;
        Ok(episode_inputs(&episode, features)?)
    }
}

fn eval_episodes(
    cfg: &RunConfig,
    store: &ParamStore<f32>,
    phase: Phase,
    count: u64,
) -> Result<Vec<EvalEpisode>> {
    let settings = InferSettings::from_train(&cfg.train);
    let real = if cfg.mode.synthetic {
        None
    } else {
        Some(load_real_phase(cfg, phase)?)
    };
    let mut episodes = Vec::with_capacity(count as usize);
    for index in 0..count {
        let ep = fixed_episode(cfg, phase, index, real.as_ref())?;
        let predictions = infer_long(store, &cfg.model, &ep.inputs, &settings)?;
        episodes.push(EvalEpisode { predictions, ground_truth: ep.ground_truth });
    }
    Ok(episodes)
}

fn aggregation(cfg: &RunConfig) -> Aggregation {
    if cfg.mode.micro_map {
        Aggregation::Micro
    } else {
        Aggregation::Macro
    }
}

fn print_result(result: &EvalResult) {
    for (t, m) in result.thresholds.iter().zip(&result.map) {
        println!("mAP@{t:.2}: {m:.4}");
    }
    println!("mean over thresholds: {:.4}", result.mean);
    if result.skipped > 0 {
        println!("episodes without ground truth skipped: {}", result.skipped);
    }
}

// ---- infer ----

#[derive(Serialize)]
struct InferDoc {
    schema: &'static str,
    config: serde_json::Value,
    checkpoint_sha256: String,
    phase: &'static str,
    index: u64,
    ground_truth: Vec<TemporalSegment<f64>>,
    predictions: PredictionSet,
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let cfg = resolve(&args.flags)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let phase: Phase = args.phase.into();
    let real = if cfg.mode.synthetic {
        None
    } else {
        Some(load_real_phase(&cfg, phase)?)
    };
    let ep = fixed_episode(&cfg, phase, args.index, real.as_ref())?;
    let settings = InferSettings::from_train(&cfg.train);
    let predictions = infer_long(&model.store, &cfg.model, &ep.inputs, &settings)?;

    let out = cfg.data.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let doc = InferDoc {
        schema: "comloc.infer.v1",
        config: serde_json::to_value(&cfg)?,
        checkpoint_sha256: model.sha256,
        phase: phase.name(),
        index: args.index,
        ground_truth: ep.ground_truth.clone(),
        predictions: predictions.clone(),
    };
    let path = out.join("predictions.json");
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(&path, text)?;

    println!(
        "{} predictions on {} episode {}",
        predictions.len(),
        phase.name(),
        args.index
    );
    for p in predictions.predictions.iter().take(5) {
        println!(
            "  [{:8.1}, {:8.1}] score {:.4}",
            p.segment().start(),
            p.segment().end(),
            p.score()
        );
    }
    println!("predictions: {}", path.display());
    Ok(())
}

// ---- eval ----

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve(&args.flags)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let episodes = eval_episodes(&cfg, &model.store, args.phase.into(), args.episodes)?;
    let result = evaluate(&episodes, &EVAL_THRESHOLDS, aggregation(&cfg))?;

    let out = cfg.data.out_dir.clone();
    let meta = RunMeta {
        config: serde_json::to_value(&cfg)?,
        seed: cfg.train.seed,
        checkpoint_sha256: Some(model.sha256),
    };
    let doc_path = write_report(&out, &result, &meta)?;
    let plot_paths = write_plots(&out, &result)?;

    println!("checkpoint: {}", model.path.display());
    print_result(&result);
    println!("result document: {}", doc_path.display());
    for p in plot_paths {
        println!("plot: {}", p.display());
    }
    Ok(())
}

// ---- sweep ----

#[derive(Serialize)]
struct SweepDoc {
    schema: &'static str,
    config: serde_json::Value,
    checkpoint_sha256: String,
    thresholds: Vec<f64>,
    rows: Vec<SweepRow>,
}

#[derive(Serialize)]
struct SweepRow {
    supports: usize,
    map: Vec<f64>,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.max_supports == 0 {
        bail!("--max-supports must be at least 1");
    }
    let cfg = resolve(&args.flags)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let phase: Phase = args.phase.into();

    let mut rows = Vec::new();
    for n in 1..=args.max_supports {
        let mut cfg_n = cfg.clone();
        cfg_n.supports = n;
        cfg_n.mode.noisy_supports = cfg.mode.noisy_supports.min(n);
        cfg_n.validate()?;
        let episodes = eval_episodes(&cfg_n, &model.store, phase, args.episodes)?;
        let result = evaluate(&episodes, &EVAL_THRESHOLDS, aggregation(&cfg))?;
        println!("N = {n}: mAP@{:.2} = {:.4}", EVAL_THRESHOLDS[0], result.map[0]);
        rows.push(SweepRow { supports: n, map: result.map });
    }

    let out = cfg.data.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let doc = SweepDoc {
        schema: "comloc.sweep.v1",
        config: serde_json::to_value(&cfg)?,
        checkpoint_sha256: model.sha256,
        thresholds: EVAL_THRESHOLDS.to_vec(),
        rows,
    };
    let path = out.join("sweep.json");
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    let points: Vec<(usize, f64)> = doc.rows.iter().map(|r| (r.supports, r.map[0])).collect();
    let plot = write_sweep_plot(&out, &points)?;
    println!("sweep document: {}", path.display());
    println!("plot: {}", plot.display());
    Ok(())
}

// ---- gradcheck and selftest ----

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let entries = gradcheck_suite(args.seed)?;
    let mut ok = true;
    for (name, err) in &entries {
        let pass = *err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "{name:<16} max relative error {err:.3e}  {}",
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_selftest() -> Result<ExitCode> {
    let started = Instant::now();
    let mut ok = true;
    for outcome in comloc::selftest::run_all(0) {
        ok &= outcome.passed();
        println!(
            "{:<22} {} cases, worst {:.3e} (tolerance {:.1e})  {}",
            outcome.name,
            outcome.cases,
            outcome.worst,
            outcome.tolerance,
            if outcome.passed() { "ok" } else { "FAIL" }
        );
    }
    for (name, err) in gradcheck_suite(0)? {
        let pass = err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "gradcheck/{name:<16} max relative error {err:.3e}  {}",
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!("selftest finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
