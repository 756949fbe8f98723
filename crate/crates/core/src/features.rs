//! Video representations for the query and support streams.
//!
//! A backbone provider turns per-frame inputs into a temporal feature map
//! `[steps, C]`: either a passthrough over already-extracted features or a
//! small trainable stack of strided temporal convolutions. Both streams use
//! the same provider and parameters. Support videos are additionally split
//! into a fixed number of contiguous parts, each mean-pooled to one vector,
//! and single images are inflated into static support videos.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use crate::alignment::register_linear;
use crate::diffcore::{DiffError, Graph, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Frames consumed per output step by the trainable encoder (three
/// convolutions of stride 2).
pub const ENCODER_STRIDE: usize = 8;

/// A temporal feature map with its frame-to-step ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures<F> {
    pub video_id: String,
    /// Frames per feature step.
    pub stride: usize,
    /// `[num_steps, C]`.
    pub feats: Tensor<F>,
}

impl<F: Scalar> FrameFeatures<F> {
    pub fn new(video_id: impl Into<String>, stride: usize, feats: Tensor<F>) -> Result<Self, FeatureError> {
        let (steps, channels) = feats.dims2().map_err(|_| FeatureError::NotAMatrix)?;
        if steps == 0 || channels == 0 {
            return Err(FeatureError::Empty);
        }
        if stride == 0 {
            return Err(FeatureError::ZeroStride);
        }
        Ok(Self { video_id: video_id.into(), stride, feats })
    }

    pub fn num_steps(&self) -> usize {
        self.feats.rows()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature container io: {0}")]
    Io(#[from] io::Error),
    #[error("not a feature container (bad magic)")]
    BadMagic,
    #[error("unsupported feature container version {0}")]
    BadVersion(u32),
    #[error("corrupt feature container: {0}")]
    Corrupt(String),
    #[error("expected {expected} channels, file has {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("feature map must be a matrix")]
    NotAMatrix,
    #[error("feature map has no steps or no channels")]
    Empty,
    #[error("stride must be at least one frame per step")]
    ZeroStride,
}

const FEATURE_MAGIC: &[u8; 4] = b"CLFT";
const FEATURE_VERSION: u32 = 1;

/// Writes `{video_id, stride, num_steps, C}` followed by row-major 32-bit
/// little-endian values.
pub fn save_features<F: Scalar>(path: &Path, f: &FrameFeatures<F>) -> Result<(), FeatureError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    let id = f.video_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(FeatureError::Corrupt("video id too long".into()));
    }
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(f.stride as u32).to_le_bytes());
    out.extend_from_slice(&(f.num_steps() as u32).to_le_bytes());
    out.extend_from_slice(&(f.channels() as u32).to_le_bytes());
    for &v in f.feats.data() {
        out.extend_from_slice(&(Scalar::to_f64(v) as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_features<F: Scalar>(
    path: &Path,
    expected_channels: Option<usize>,
) -> Result<FrameFeatures<F>, FeatureError> {
    let mut file = io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_VERSION {
        return Err(FeatureError::BadVersion(version));
    }
    let mut u16buf = [0u8; 2];
    file.read_exact(&mut u16buf)?;
    let id_len = u16::from_le_bytes(u16buf) as usize;
    let mut id = vec![0u8; id_len];
    file.read_exact(&mut id)?;
    let video_id = String::from_utf8(id)
        .map_err(|_| FeatureError::Corrupt("video id is not utf-8".into()))?;
    file.read_exact(&mut u32buf)?;
    let stride = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf)?;
    let steps = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf)?;
    let channels = u32::from_le_bytes(u32buf) as usize;
    if let Some(expected) = expected_channels {
        if channels != expected {
            return Err(FeatureError::ChannelMismatch { expected, found: channels });
        }
    }
    let count = steps
        .checked_mul(channels)
        .ok_or_else(|| FeatureError::Corrupt("dimension overflow".into()))?;
    let mut data = Vec::with_capacity(count);
    let mut f32buf = [0u8; 4];
    for _ in 0..count {
        file.read_exact(&mut f32buf).map_err(|_| {
            FeatureError::Corrupt(format!("expected {count} values, file ended early"))
        })?;
        data.push(F::from_f64(f32::from_le_bytes(f32buf) as f64));
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(FeatureError::Corrupt("trailing bytes after data".into()));
    }
    let feats = Tensor::new(&[steps, channels], data)
        .map_err(|e| FeatureError::Corrupt(e.to_string()))?;
    FrameFeatures::new(video_id, stride, feats)
}

/// Which provider turns frames into features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Inputs are already feature maps; used verbatim.
    Passthrough,
    /// Small trainable temporal encoder with overall stride 8.
    Encoder,
}

/// Bound parameters of the backbone for one graph.
#[derive(Clone, Debug)]
pub enum BackboneVars {
    Passthrough,
    Encoder(EncoderVars),
}

impl BackboneVars {
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, kind: BackboneKind) -> Result<Self, DiffError> {
        Ok(match kind {
            BackboneKind::Passthrough => Self::Passthrough,
            BackboneKind::Encoder => Self::Encoder(EncoderVars::bind(tape, "backbone")?),
        })
    }
}

/// Three temporal convolutions (kernel 3, stride 2, zero padding 1) with
/// relu between them; the last layer stays linear so downstream attention
/// sees signed features.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    layers: Vec<crate::alignment::LinearVars>,
}

const ENCODER_LAYERS: usize = 3;
const ENCODER_KERNEL: usize = 3;

impl EncoderVars {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_dim: usize,
        channels: usize,
        mut weight_init: impl FnMut() -> F,
    ) -> Result<(), DiffError> {
        let mut cur = in_dim;
        for l in 0..ENCODER_LAYERS {
            register_linear(
                store,
                &format!("{prefix}.l{l}"),
                ENCODER_KERNEL * cur,
                channels,
                &mut weight_init,
            )?;
            cur = channels;
        }
        Ok(())
    }

    pub fn bind<F: Scalar>(tape: &mut Tape<F>, prefix: &str) -> Result<Self, DiffError> {
        let layers = (0..ENCODER_LAYERS)
            .map(|l| crate::alignment::LinearVars::bind(tape, &format!("{prefix}.l{l}")))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn value_count(in_dim: usize, channels: usize) -> usize {
        crate::alignment::linear_value_count(ENCODER_KERNEL * in_dim, channels)
            + (ENCODER_LAYERS - 1)
                * crate::alignment::linear_value_count(ENCODER_KERNEL * channels, channels)
    }
}

fn encode_steps<F: Scalar>(
    g: &mut Graph<F>,
    frames: Var,
    vars: &EncoderVars,
) -> Result<Var, DiffError> {
    let mut x = frames;
    for (l, layer) in vars.layers.iter().enumerate() {
        let unfolded = g.unfold_rows(x, ENCODER_KERNEL, 2, 1)?;
        x = g.linear(unfolded, layer.weight, layer.bias)?;
        if l + 1 < vars.layers.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Encodes a query video. Returns the feature map and its frames-per-step
/// stride (`input_stride` for the passthrough, multiplied by 8 for the
/// encoder).
pub fn encode_query<F: Scalar>(
    g: &mut Graph<F>,
    frames: Var,
    backbone: &BackboneVars,
    input_stride: usize,
) -> Result<(Var, usize), DiffError> {
    if g.value(frames).rows() == 0 {
        return Err(DiffError::shape("encode_query", "empty input".to_string()));
    }
    match backbone {
        BackboneVars::Passthrough => Ok((frames, input_stride)),
        BackboneVars::Encoder(vars) => {
            Ok((encode_steps(g, frames, vars)?, input_stride * ENCODER_STRIDE))
        }
    }
}

/// Contiguous step ranges for `parts` parts over `steps` steps. Extra steps
/// go to the earlier parts (10 steps in 4 parts → 3/3/2/2). With fewer
/// steps than parts the trailing parts repeat the last step; the flag
/// reports that duplication.
pub fn part_ranges(steps: usize, parts: usize) -> (Vec<(usize, usize)>, bool) {
    assert!(steps >= 1 && parts >= 1, "need at least one step and one part");
    if steps < parts {
        let ranges = (0..parts)
            .map(|i| {
                let row = i.min(steps - 1);
                (row, row + 1)
            })
            .collect();
        return (ranges, true);
    }
    let base = steps / parts;
    let rem = steps % parts;
    let mut ranges = Vec::with_capacity(parts);
    let mut lo = 0;
    for i in 0..parts {
        let len = base + usize::from(i < rem);
        ranges.push((lo, lo + len));
        lo += len;
    }
    (ranges, false)
}

/// Encodes a trimmed support video and pools it into `parts` part vectors,
/// `[parts, C]`. The boolean reports whether the video was too short and
/// steps had to be duplicated.
pub fn encode_support<F: Scalar>(
    g: &mut Graph<F>,
    frames: Var,
    backbone: &BackboneVars,
    parts: usize,
) -> Result<(Var, bool), DiffError> {
    if parts == 0 {
        return Err(DiffError::shape("encode_support", "zero parts".to_string()));
    }
    let (steps, _) = encode_query(g, frames, backbone, 1)?;
    let (ranges, duplicated) = part_ranges(g.value(steps).rows(), parts);
    let pooled = g.pool_rows(steps, &ranges)?;
    Ok((pooled, duplicated))
}

/// Builds a static support video by repeating one frame (or feature vector)
/// `parts` times, then encodes it like any other support. By construction
/// this equals `encode_support` on the frame-replicated video.
pub fn inflate_image_support<F: Scalar>(
    g: &mut Graph<F>,
    frame: Var,
    backbone: &BackboneVars,
    parts: usize,
) -> Result<Var, DiffError> {
    let rows = g.value(frame).rows();
    if rows != 1 {
        return Err(DiffError::shape(
            "inflate_image_support",
            format!("expected a single frame, got {rows} rows"),
        ));
    }
    let replicated = g.concat_rows(&vec![frame; parts])?;
    let (pooled, _) = encode_support(g, replicated, backbone, parts)?;
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn encoder_store(seed: u64, in_dim: usize, channels: usize) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = || rng.random::<f64>() * 0.2 - 0.1;
        EncoderVars::register(&mut store, "backbone", in_dim, channels, &mut init).unwrap();
        store
    }

    #[test]
    fn ranges_split_evenly_when_divisible() {
        let (r, dup) = part_ranges(64, 4);
        assert!(!dup);
        assert_eq!(r, vec![(0, 16), (16, 32), (32, 48), (48, 64)]);
    }

    #[test]
    fn remainder_goes_to_earlier_parts() {
        let (r, dup) = part_ranges(10, 4);
        assert!(!dup);
        assert_eq!(r, vec![(0, 3), (3, 6), (6, 8), (8, 10)]);
    }

    #[test]
    fn short_videos_duplicate_the_last_step() {
        let (r, dup) = part_ranges(2, 4);
        assert!(dup);
        assert_eq!(r, vec![(0, 1), (1, 2), (1, 2), (1, 2)]);
    }

    #[test]
    fn ranges_partition_the_steps() {
        for steps in 1..40 {
            for parts in 1..=8 {
                let (r, dup) = part_ranges(steps, parts);
                assert_eq!(r.len(), parts);
                if !dup {
                    assert_eq!(r[0].0, 0);
                    assert_eq!(r[parts - 1].1, steps);
                    for w in r.windows(2) {
                        assert_eq!(w[0].1, w[1].0);
                    }
                }
                for &(lo, hi) in &r {
                    assert!(lo < hi && hi <= steps);
                }
            }
        }
    }

    #[test]
    fn passthrough_returns_the_input_untouched() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = rand_tensor(&mut rng, &[5, 3]);
        let frames = tape.graph.leaf(feats.clone());
        let backbone = BackboneVars::bind(&mut tape, BackboneKind::Passthrough).unwrap();
        let (out, stride) = encode_query(&mut tape.graph, frames, &backbone, 8).unwrap();
        assert_eq!(out, frames);
        assert_eq!(stride, 8);
        assert_eq!(tape.graph.value(out), &feats);
    }

    #[test]
    fn encoder_reduces_768_frames_to_96_steps() {
        let store = encoder_store(3, 4, 6);
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = tape.graph.leaf(rand_tensor(&mut rng, &[768, 4]));
        let backbone = BackboneVars::bind(&mut tape, BackboneKind::Encoder).unwrap();
        let (out, stride) = encode_query(&mut tape.graph, frames, &backbone, 1).unwrap();
        assert_eq!(tape.graph.value(out).shape(), &[96, 6]);
        assert_eq!(stride, ENCODER_STRIDE);
    }

    #[test]
    fn query_and_support_share_the_encoder() {
        // Pooling the query feature map by hand must match encode_support,
        // which proves both streams ran the same parameters.
        let store = encoder_store(5, 3, 4);
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let video = rand_tensor(&mut rng, &[64, 3]);
        let frames = tape.graph.leaf(video);
        let backbone = BackboneVars::bind(&mut tape, BackboneKind::Encoder).unwrap();
        let (as_query, _) = encode_query(&mut tape.graph, frames, &backbone, 1).unwrap();
        let (as_support, dup) = encode_support(&mut tape.graph, frames, &backbone, 4).unwrap();
        assert!(!dup);
        let steps = tape.graph.value(as_query).rows();
        let (ranges, _) = part_ranges(steps, 4);
        let pooled = tape.graph.pool_rows(as_query, &ranges).unwrap();
        let a = tape.graph.value(pooled).clone();
        let b = tape.graph.value(as_support);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn static_video_pools_to_equal_parts() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let row: Vec<f64> = vec![0.3, -1.2, 0.5];
        let video = Tensor::from_rows(&vec![row.clone(); 12]).unwrap();
        let frames = tape.graph.leaf(video);
        let backbone = BackboneVars::bind(&mut tape, BackboneKind::Passthrough).unwrap();
        let (parts, dup) = encode_support(&mut tape.graph, frames, &backbone, 4).unwrap();
        assert!(!dup);
        let t = tape.graph.value(parts);
        assert_eq!(t.shape(), &[4, 3]);
        for p in 0..4 {
            for c in 0..3 {
                assert!((t.at(p, c) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inflation_matches_a_replicated_video() {
        let store = encoder_store(7, 3, 4);
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = rand_tensor(&mut rng, &[1, 3]);
        let backbone = BackboneVars::bind(&mut tape, BackboneKind::Encoder).unwrap();
        let frame_var = tape.graph.leaf(frame.clone());
        let inflated = inflate_image_support(&mut tape.graph, frame_var, &backbone, 4).unwrap();

        let replicated = Tensor::from_rows(&vec![frame.row(0).to_vec(); 4]).unwrap();
        let rep_var = tape.graph.leaf(replicated);
        let (direct, _) = encode_support(&mut tape.graph, rep_var, &backbone, 4).unwrap();

        let a = tape.graph.value(inflated);
        let b = tape.graph.value(direct);
        assert_eq!(a.shape(), &[4, 4]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn container_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..15).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
        let feats = Tensor::new(&[5, 3], data).unwrap();
        let original = FrameFeatures::new("video_0007", 8, feats).unwrap();
        save_features(&path, &original).unwrap();
        let loaded: FrameFeatures<f32> = load_features(&path, Some(3)).unwrap();
        assert_eq!(loaded.video_id, original.video_id);
        assert_eq!(loaded.stride, 8);
        for (a, b) in loaded.feats.data().iter().zip(original.feats.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn channel_mismatch_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        let feats = Tensor::new(&[2, 3], vec![0.0f32; 6]).unwrap();
        save_features(&path, &FrameFeatures::new("v", 8, feats).unwrap()).unwrap();
        match load_features::<f32>(&path, Some(7)) {
            Err(FeatureError::ChannelMismatch { expected: 7, found: 3 }) => {}
            other => panic!("expected channel mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        let feats = Tensor::new(&[4, 4], vec![1.0f32; 16]).unwrap();
        save_features(&path, &FrameFeatures::new("v", 8, feats).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_features::<f32>(&path, None), Err(FeatureError::Corrupt(_))));
        fs::write(&path, b"PNG\x89 definitely not features").unwrap();
        assert!(matches!(load_features::<f32>(&path, None), Err(FeatureError::BadMagic)));
    }
}
