//! On-disk dataset layout: `manifest.json` plus per-video annotation and
//! feature files under `videos/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotations::{self, AnnotationError, AnnotationFile, Triplet};
use crate::graph::SubjectNode;
use crate::synthgen::ScenarioConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Annotation {
        path: PathBuf,
        #[source]
        source: AnnotationError,
    },
    #[error("{video}: frame {frame}: no feature for track {track_id}")]
    MissingFeature { video: String, frame: u32, track_id: u32 },
    #[error("{video}: {message}")]
    Invalid { video: String, message: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFeature {
    pub track_id: u32,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameFeatures {
    pub frame_index: u32,
    pub tracks: Vec<TrackFeature>,
}

/// Per-frame, per-track input features `F^(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFile {
    pub video_id: String,
    pub dim: usize,
    pub frames: Vec<FrameFeatures>,
}

impl FeatureFile {
    /// Same selection and renumbering as [`annotations::subsample_frames`].
    pub fn subsample(&self, rate: usize) -> FeatureFile {
        assert!(rate >= 1, "sampling rate must be at least 1");
        let mut out = self.clone();
        let Some(first) = self.frames.first().map(|f| f.frame_index) else {
            return out;
        };
        out.frames = self
            .frames
            .iter()
            .filter(|f| ((f.frame_index - first) as usize).is_multiple_of(rate))
            .enumerate()
            .map(|(i, f)| FrameFeatures {
                frame_index: first + i as u32,
                ..f.clone()
            })
            .collect();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub frames: usize,
    pub annotations: String,
    pub features: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub feature_dim: usize,
    pub vocabulary: annotations::Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
    pub videos: Vec<ManifestEntry>,
}

/// Model-ready view of one video. Frames are numbered by position
/// (`1..=T`); `first_frame` maps position 1 back to the file's index.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub first_frame: u32,
    pub frames: Vec<Vec<SubjectNode>>,
    /// Ground truth with spans in positional units.
    pub ground_truth: Vec<Triplet>,
}

impl VideoSample {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn to_file_frame(&self, position: u32) -> u32 {
        self.first_frame + position - 1
    }
}

/// Joins an annotation file with its features.
pub fn build_sample(ann: &AnnotationFile, features: &FeatureFile) -> Result<VideoSample> {
    let video = ann.video_id.clone();
    let invalid = |message: String| DatasetError::Invalid {
        video: video.clone(),
        message,
    };
    if ann.data.len() != features.frames.len() {
        return Err(invalid(format!(
            "{} annotated frames but {} feature frames",
            ann.data.len(),
            features.frames.len()
        )));
    }
    let first_frame = ann.first_frame().ok_or_else(|| invalid("no frames".into()))?;
    let mut frames = Vec::with_capacity(ann.data.len());
    for (record, feats) in ann.data.iter().zip(&features.frames) {
        if record.frame_index != feats.frame_index {
            return Err(invalid(format!(
                "annotation frame {} paired with feature frame {}",
                record.frame_index, feats.frame_index
            )));
        }
        let mut nodes = Vec::with_capacity(record.segments_info.len());
        for seg in &record.segments_info {
            let ann_box = record
                .annotations
                .iter()
                .find(|a| a.id == seg.id)
                .ok_or_else(|| invalid(format!("segment {} has no annotation", seg.id)))?;
            let bbox = ann
                .normalized_box(&ann_box.bbox)
                .ok_or_else(|| invalid(format!("segment {} has an invalid box", seg.id)))?;
            let feature = feats
                .tracks
                .iter()
                .find(|t| t.track_id == seg.track_id)
                .ok_or(DatasetError::MissingFeature {
                    video: video.clone(),
                    frame: record.frame_index,
                    track_id: seg.track_id,
                })?
                .feature
                .clone();
            if feature.len() != features.dim {
                return Err(invalid(format!(
                    "track {} feature has length {}, expected {}",
                    seg.track_id,
                    feature.len(),
                    features.dim
                )));
            }
            nodes.push(SubjectNode {
                track_id: seg.track_id,
                kind: seg.kind,
                category_id: seg.category_id,
                bbox,
                feature,
            });
        }
        frames.push(nodes);
    }
    let offset = first_frame - 1;
    let ground_truth = annotations::extract_ground_truth_triplets(ann)
        .into_iter()
        .map(|t| Triplet {
            start: t.start - offset,
            end: t.end - offset,
            ..t
        })
        .collect();
    Ok(VideoSample {
        video_id: ann.video_id.clone(),
        first_frame,
        frames,
        ground_truth,
    })
}

/// A dataset directory with its manifest loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
        Ok(Self { root, manifest })
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest
            .videos
            .iter()
            .filter(move |e| split.is_none_or(|s| e.split == s))
    }

    pub fn load_annotations(&self, entry: &ManifestEntry) -> Result<AnnotationFile> {
        let path = self.root.join(&entry.annotations);
        let bytes = read(&path)?;
        annotations::parse_annotations(&bytes).map_err(|source| DatasetError::Annotation { path, source })
    }

    pub fn load_features(&self, entry: &ManifestEntry) -> Result<FeatureFile> {
        read_json(&self.root.join(&entry.features))
    }

    /// Loads one video, subsampled at `rate`, returning the (subsampled)
    /// annotation file alongside the model input.
    pub fn load_video(&self, entry: &ManifestEntry, rate: usize) -> Result<(AnnotationFile, VideoSample)> {
        let ann = annotations::subsample_frames(&self.load_annotations(entry)?, rate);
        let feats = self.load_features(entry)?.subsample(rate);
        let sample = build_sample(&ann, &feats)?;
        Ok((ann, sample))
    }
}
