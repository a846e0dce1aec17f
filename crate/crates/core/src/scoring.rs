//! Test-time spoof scores from cue maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackType, Label};
use crate::image_tensor::CueMap;
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Recommended decision threshold on the spoof score.
pub const DEFAULT_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub score: f64,
    pub label: Label,
    pub attack_type: AttackType,
}

/// Element-wise mean of `|C|` over every pixel and channel.
pub fn spoof_score(cue: &CueMap) -> f64 {
    spoof_score_values(cue.values())
}

pub fn spoof_score_values<T: Scalar>(values: &[T]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v.as_f64().abs()).sum::<f64>() / values.len() as f64
}

/// Spoof iff `score >= threshold`; ties go to spoof.
pub fn decide(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Spoof
    } else {
        Label::Live
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoAggregation {
    #[default]
    Mean,
    Max,
}

/// Arithmetic mean of per-frame scores.
pub fn aggregate_video(frame_scores: &[f64]) -> Result<f64> {
    aggregate_scores(frame_scores, VideoAggregation::Mean)
}

pub fn aggregate_scores(frame_scores: &[f64], how: VideoAggregation) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(Error::Empty("no frame scores to aggregate".into()));
    }
    Ok(match how {
        VideoAggregation::Mean => frame_scores.iter().sum::<f64>() / frame_scores.len() as f64,
        VideoAggregation::Max => frame_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// One JSON record per line.
pub fn write_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialises"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
