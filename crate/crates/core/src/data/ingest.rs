//! Annotation file parsing.
//!
//! Two source schemas are supported: a JSON map keyed by video id (segments
//! in seconds, converted to frames via fps) and a whitespace-delimited text
//! format with one instance per line. Instances that fall outside their
//! video's extent are dropped with a warning rather than failing the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::temporal::TemporalSegment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub label: String,
    /// In frames, within `[0, num_frames]`.
    pub segment: TemporalSegment<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedVideo {
    pub video_id: String,
    pub num_frames: usize,
    pub fps: f64,
    pub instances: Vec<ActionInstance>,
}

impl AnnotatedVideo {
    /// Indices of instances labeled with `class`.
    pub fn instances_of(&self, class: &str) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.label == class)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    /// JSON map: id → {num_frames or duration, fps, annotations:[{label, segment:[s,e] seconds}]}.
    ActivityNetStyle,
    /// Text lines: `video_id num_frames fps label start_sec end_sec`.
    ThumosStyle,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVideo {
    #[serde(default)]
    num_frames: Option<u64>,
    #[serde(default)]
    duration: Option<f64>,
    fps: f64,
    annotations: Vec<RawInstance>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    label: String,
    /// Seconds.
    segment: [f64; 2],
}

pub fn ingest_annotations(
    path: &Path,
    format: AnnotationFormat,
) -> Result<Vec<AnnotatedVideo>, DataError> {
    match format {
        AnnotationFormat::ActivityNetStyle => ingest_json(path),
        AnnotationFormat::ThumosStyle => ingest_text(path),
    }
}

/// Converts a second-based instance to frames, keeping it only if it fits
/// the video extent (small float overhang at the end is clamped).
fn instance_in_frames(
    video_id: &str,
    label: &str,
    start_sec: f64,
    end_sec: f64,
    fps: f64,
    num_frames: usize,
) -> Option<ActionInstance> {
    let start = start_sec * fps;
    let mut end = end_sec * fps;
    let extent = num_frames as f64;
    if end > extent && end < extent * (1.0 + 1e-9) + 1e-6 {
        end = extent;
    }
    if !(start.is_finite() && end.is_finite()) || start < 0.0 || end > extent || start >= end {
        log::warn!(
            "{video_id}: dropping instance {label} [{start_sec}, {end_sec}]s, \
             outside the video extent of {num_frames} frames"
        );
        return None;
    }
    let segment = TemporalSegment::new(start, end).ok()?;
    Some(ActionInstance { label: label.to_string(), segment })
}

fn ingest_json(path: &Path) -> Result<Vec<AnnotatedVideo>, DataError> {
    let text = fs::read_to_string(path)?;
    let raw: BTreeMap<String, RawVideo> = serde_json::from_str(&text)?;
    let mut videos = Vec::with_capacity(raw.len());
    for (video_id, rv) in raw {
        let num_frames = match (rv.num_frames, rv.duration) {
            (Some(n), _) if n >= 1 => n as usize,
            (None, Some(d)) if d > 0.0 && rv.fps > 0.0 => (d * rv.fps).round() as usize,
            _ => {
                return Err(DataError::Malformed {
                    line: 0,
                    detail: format!("{video_id}: need num_frames >= 1 or positive duration"),
                })
            }
        };
        if !(rv.fps.is_finite() && rv.fps > 0.0) {
            return Err(DataError::Malformed {
                line: 0,
                detail: format!("{video_id}: fps must be positive"),
            });
        }
        let instances = rv
            .annotations
            .iter()
            .filter_map(|a| {
                instance_in_frames(&video_id, &a.label, a.segment[0], a.segment[1], rv.fps, num_frames)
            })
            .collect();
        videos.push(AnnotatedVideo { video_id, num_frames, fps: rv.fps, instances });
    }
    Ok(videos)
}

fn ingest_text(path: &Path) -> Result<Vec<AnnotatedVideo>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut by_id: BTreeMap<String, AnnotatedVideo> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(DataError::Malformed {
                line: line_no,
                detail: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| DataError::Malformed {
            line: line_no,
            detail: format!("cannot parse {what}"),
        };
        let video_id = fields[0].to_string();
        let num_frames: usize = fields[1].parse().map_err(|_| parse_err("num_frames"))?;
        let fps: f64 = fields[2].parse().map_err(|_| parse_err("fps"))?;
        let label = fields[3];
        let start_sec: f64 = fields[4].parse().map_err(|_| parse_err("start_sec"))?;
        let end_sec: f64 = fields[5].parse().map_err(|_| parse_err("end_sec"))?;
        if num_frames == 0 || !(fps.is_finite() && fps > 0.0) {
            return Err(DataError::Malformed {
                line: line_no,
                detail: "num_frames and fps must be positive".to_string(),
            });
        }
        let entry = by_id.entry(video_id.clone()).or_insert_with(|| AnnotatedVideo {
            video_id: video_id.clone(),
            num_frames,
            fps,
            instances: Vec::new(),
        });
        if entry.num_frames != num_frames || entry.fps != fps {
            return Err(DataError::Malformed {
                line: line_no,
                detail: format!("{video_id}: num_frames/fps disagree with an earlier line"),
            });
        }
        if let Some(inst) =
            instance_in_frames(&video_id, label, start_sec, end_sec, fps, num_frames)
        {
            entry.instances.push(inst);
        }
    }
    Ok(by_id.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    #[test]
    fn json_videos_parse_with_frame_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        write(
            &path,
            r#"{
account_a: 1
            }"#,
        );
        // malformed first: not json
        assert!(matches!(ingest_json(&path), Err(DataError::Json(_))));
        write(
            &path,
            r#"{
              "v_b": {"duration": 10.0, "fps": 8.0, "annotations": [
                  {"label": "Kayaking", "segment": [1.0, 3.5]}]},
              "v_a": {"num_frames": 64, "fps": 4.0, "annotations": [
                  {"label": "Archery", "segment": [2.0, 6.0]},
                  {"label": "Archery", "segment": [10.0, 30.0]}]}
            }"#,
        );
        let videos = ingest_annotations(&path, AnnotationFormat::ActivityNetStyle).unwrap();
        assert_eq!(videos.len(), 2);
        // BTreeMap ordering: v_a first
        assert_eq!(videos[0].video_id, "v_a");
        assert_eq!(videos[0].num_frames, 64);
        // second instance ends at 30s * 4fps = 120 > 64 frames: dropped
        assert_eq!(videos[0].instances.len(), 1);
        assert_eq!(videos[0].instances[0].segment.start(), 8.0);
        assert_eq!(videos[0].instances[0].segment.end(), 24.0);
        // duration * fps = 80 frames
        assert_eq!(videos[1].num_frames, 80);
        assert_eq!(videos[1].instances[0].segment.end(), 28.0);
    }

    #[test]
    fn text_lines_group_by_video() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        write(
            &path,
            "# comment line\n\
             video_17 2400 30 GolfSwing 10.0 15.0\n\
             video_17 2400 30 GolfSwing 40.0 44.0\n\
             video_03 900 30 Diving 2.0 8.0\n",
        );
        let videos = ingest_annotations(&path, AnnotationFormat::ThumosStyle).unwrap();
        assert_eq!(videos.len(), 2);
        assert_eq!(videos[0].video_id, "video_03");
        assert_eq!(videos[1].instances.len(), 2);
        assert_eq!(videos[1].instances[1].segment.start(), 1200.0);
    }

    #[test]
    fn text_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        write(&path, "video_1 100 30 Diving 0.0 1.0\nvideo_2 100 30 Diving\n");
        match ingest_annotations(&path, AnnotationFormat::ThumosStyle) {
            Err(DataError::Malformed { line: 2, .. }) => {}
            other => panic!("expected line-2 error, got {other:?}"),
        }
        write(&path, "video_1 100 30 Diving 0.0 1.0\nvideo_1 200 30 Diving 1.0 2.0\n");
        match ingest_annotations(&path, AnnotationFormat::ThumosStyle) {
            Err(DataError::Malformed { line: 2, detail }) => {
                assert!(detail.contains("disagree"));
            }
            other => panic!("expected disagreement error, got {other:?}"),
        }
    }

    #[test]
    fn instances_of_filters_by_label() {
        let video = AnnotatedVideo {
            video_id: "v".into(),
            num_frames: 100,
            fps: 1.0,
            instances: vec![
                ActionInstance {
                    label: "a".into(),
                    segment: TemporalSegment::new(0.0, 10.0).unwrap(),
                },
                ActionInstance {
                    label: "b".into(),
                    segment: TemporalSegment::new(20.0, 30.0).unwrap(),
                },
                ActionInstance {
                    label: "a".into(),
                    segment: TemporalSegment::new(50.0, 60.0).unwrap(),
                },
            ],
        };
        assert_eq!(video.instances_of("a"), vec![0, 2]);
        assert_eq!(video.instances_of("c"), Vec::<usize>::new());
    }

    #[test]
    fn float_overhang_at_the_end_is_clamped() {
        // 3.2s * 10fps lands a hair above 32 frames in float; must clamp
        let inst = instance_in_frames("v", "x", 1.0, 3.2, 10.0, 32).unwrap();
        assert_eq!(inst.segment.end(), 32.0);
    }
}
