//! ASPIRe-style annotation files: parsing, validation, canonical writing,
//! ground-truth span extraction and frame subsampling.
//!
//! A file carries a `data` list of per-frame records. Each record has
//! `segments_info` (identity: segment id, category, kind, `track_id`) and
//! `annotations` (box, opaque mask and the five interactivity descriptor
//! lists). Predicate ids are 0-based indices into the vocabulary block.
//! Fields this crate does not know about are kept and written back.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::classifier::{InteractivityCategory, VocabSizes};
use crate::graph::{BBox, SubjectKind};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} validation error(s); first: {}", .0.len(), .0[0])]
    Validation(Vec<Violation>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BBoxMode {
    #[default]
    Normalized,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: f64,
    pub height: f64,
}

/// Vocabulary header: object category count and predicate vocabulary size
/// per interactivity type, with optional display names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub objects: u32,
    pub appearances: usize,
    pub situations: usize,
    pub positions: usize,
    pub interactions: usize,
    pub relations: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub names: BTreeMap<String, Vec<String>>,
}

impl Vocabulary {
    pub fn new(objects: u32, sizes: VocabSizes) -> Self {
        Self {
            objects,
            appearances: sizes.appearances,
            situations: sizes.situations,
            positions: sizes.positions,
            interactions: sizes.interactions,
            relations: sizes.relations,
            names: BTreeMap::new(),
        }
    }

    pub fn sizes(&self) -> VocabSizes {
        VocabSizes {
            appearances: self.appearances,
            situations: self.situations,
            positions: self.positions,
            interactions: self.interactions,
            relations: self.relations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default)]
    pub bbox_mode: BBoxMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_size: Option<FrameSize>,
    pub vocabulary: Vocabulary,
    pub data: Vec<FrameRecord>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u32,
    pub segments_info: Vec<SegmentInfo>,
    pub annotations: Vec<RegionAnnotation>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub category_id: u32,
    pub kind: SubjectKind,
    pub track_id: u32,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// A double-actor descriptor entry: the target subject and the predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairLabel {
    pub track_id: u32,
    pub predicate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub id: u32,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Value>,
    #[serde(default)]
    pub appearances: Vec<u32>,
    #[serde(default)]
    pub situations: Vec<u32>,
    #[serde(default)]
    pub positions: Vec<PairLabel>,
    #[serde(default)]
    pub interactions: Vec<PairLabel>,
    #[serde(default)]
    pub relations: Vec<PairLabel>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl RegionAnnotation {
    pub fn single_actor(&self, category: InteractivityCategory) -> &[u32] {
        match category {
            InteractivityCategory::Appearance => &self.appearances,
            InteractivityCategory::Situation => &self.situations,
            _ => &[],
        }
    }

    pub fn double_actor(&self, category: InteractivityCategory) -> &[PairLabel] {
        match category {
            InteractivityCategory::Position => &self.positions,
            InteractivityCategory::Interaction => &self.interactions,
            InteractivityCategory::Relation => &self.relations,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyVideo,
    FrameOrder,
    FrameGap,
    DuplicateSegment,
    MissingAnnotation,
    UnknownSegment,
    DuplicateTrack,
    KindFlip,
    CategoryChange,
    OutOfVocabulary,
    BoxOrder,
    MissingFrameSize,
    UnknownTargetTrack,
    SelfTarget,
    InvalidFps,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::EmptyVideo => "empty video",
            Self::FrameOrder => "frame order",
            Self::FrameGap => "frame gap",
            Self::DuplicateSegment => "duplicate segment",
            Self::MissingAnnotation => "missing annotation",
            Self::UnknownSegment => "unknown segment",
            Self::DuplicateTrack => "duplicate track",
            Self::KindFlip => "kind flip",
            Self::CategoryChange => "category change",
            Self::OutOfVocabulary => "out of vocabulary",
            Self::BoxOrder => "box order",
            Self::MissingFrameSize => "missing frame size",
            Self::UnknownTargetTrack => "unknown target track",
            Self::SelfTarget => "self target",
            Self::InvalidFps => "invalid fps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u32>,
    pub field: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame {
            Some(frame) => write!(
                f,
                "frame {frame}: {}: {}: {}",
                self.field,
                self.kind.label(),
                self.detail
            ),
            None => write!(f, "{}: {}: {}", self.field, self.kind.label(), self.detail),
        }
    }
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = text
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(line.saturating_sub(2))
        .map_or(0, |(i, _)| i + 1);
    if line == 1 {
        column.saturating_sub(1)
    } else {
        line_start + column.saturating_sub(1)
    }
}

/// Deserialises without running the validator.
pub fn parse_unchecked(bytes: &[u8]) -> Result<AnnotationFile, AnnotationError> {
    serde_json::from_slice(bytes).map_err(|e| AnnotationError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Parses and validates an annotation file.
pub fn parse_annotations(bytes: &[u8]) -> Result<AnnotationFile, AnnotationError> {
    let file = parse_unchecked(bytes)?;
    let report = validate(&file);
    if report.is_empty() {
        Ok(file)
    } else {
        Err(AnnotationError::Validation(report))
    }
}

/// Serialises any value as canonical JSON: keys sorted, shortest
/// round-trip float formatting, two-space indent, trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let tree = serde_json::to_value(value).expect("serialising to a JSON tree cannot fail");
    let mut out = serde_json::to_vec_pretty(&tree).expect("JSON tree always serialises");
    out.push(b'\n');
    out
}

pub fn write_annotations(file: &AnnotationFile) -> Vec<u8> {
    canonical_json(file)
}

fn box_is_ordered(file: &AnnotationFile, b: &[f64; 4]) -> bool {
    let [x1, y1, x2, y2] = *b;
    if !b.iter().all(|v| v.is_finite()) || x1 < 0.0 || y1 < 0.0 || x1 >= x2 || y1 >= y2 {
        return false;
    }
    match (file.bbox_mode, file.frame_size) {
        (BBoxMode::Normalized, _) => x2 <= 1.0 && y2 <= 1.0,
        (BBoxMode::Pixel, Some(size)) => x2 <= size.width && y2 <= size.height,
        (BBoxMode::Pixel, None) => true,
    }
}

/// Checks every structural invariant and returns the violations found; an
/// empty list means the file is valid.
pub fn validate(file: &AnnotationFile) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, frame: Option<u32>, field: String, detail: String| {
        out.push(Violation {
            kind,
            frame,
            field,
            detail,
        })
    };

    if file.data.is_empty() {
        push(ViolationKind::EmptyVideo, None, "data".into(), "no frames".into());
    }
    if let Some(fps) = file.fps {
        if !(fps.is_finite() && fps > 0.0) {
            push(
                ViolationKind::InvalidFps,
                None,
                "fps".into(),
                format!("{fps} is not positive"),
            );
        }
    }
    if file.bbox_mode == BBoxMode::Pixel && file.frame_size.is_none() {
        push(
            ViolationKind::MissingFrameSize,
            None,
            "frame_size".into(),
            "pixel boxes need a frame size".into(),
        );
    }

    let vocab = file.vocabulary.sizes();
    let mut identity: HashMap<u32, (SubjectKind, u32, u32)> = HashMap::new();
    let mut previous: Option<u32> = None;

    for record in &file.data {
        let frame = Some(record.frame_index);
        if let Some(prev) = previous {
            if record.frame_index <= prev {
                push(
                    ViolationKind::FrameOrder,
                    frame,
                    "frame_index".into(),
                    format!("{} does not follow {prev}", record.frame_index),
                );
            } else if record.frame_index != prev + 1 {
                push(
                    ViolationKind::FrameGap,
                    frame,
                    "frame_index".into(),
                    format!("jump from {prev} to {}", record.frame_index),
                );
            }
        }
        previous = Some(record.frame_index);

        let mut segments: HashMap<u32, &SegmentInfo> = HashMap::new();
        let mut tracks: HashSet<u32> = HashSet::new();
        for (i, seg) in record.segments_info.iter().enumerate() {
            let field = format!("segments_info[{i}]");
            if segments.insert(seg.id, seg).is_some() {
                push(
                    ViolationKind::DuplicateSegment,
                    frame,
                    field.clone(),
                    format!("segment id {} repeated", seg.id),
                );
            }
            if !tracks.insert(seg.track_id) {
                push(
                    ViolationKind::DuplicateTrack,
                    frame,
                    field.clone(),
                    format!("track {} repeated", seg.track_id),
                );
            }
            if seg.category_id >= file.vocabulary.objects {
                push(
                    ViolationKind::OutOfVocabulary,
                    frame,
                    format!("{field}.category_id"),
                    format!("category {} >= {}", seg.category_id, file.vocabulary.objects),
                );
            }
            match identity.get(&seg.track_id) {
                Some(&(kind, category, first)) => {
                    if kind != seg.kind {
                        push(
                            ViolationKind::KindFlip,
                            frame,
                            format!("{field}.kind"),
                            format!(
                                "track {} was {kind:?} in frame {first}, now {:?}",
                                seg.track_id, seg.kind
                            ),
                        );
                    }
                    if category != seg.category_id {
                        push(
                            ViolationKind::CategoryChange,
                            frame,
                            format!("{field}.category_id"),
                            format!("track {} was category {category} in frame {first}", seg.track_id),
                        );
                    }
                }
                None => {
                    identity.insert(seg.track_id, (seg.kind, seg.category_id, record.frame_index));
                }
            }
        }

        let mut annotated: HashSet<u32> = HashSet::new();
        for (i, ann) in record.annotations.iter().enumerate() {
            let field = format!("annotations[{i}]");
            let Some(seg) = segments.get(&ann.id) else {
                push(
                    ViolationKind::UnknownSegment,
                    frame,
                    format!("{field}.id"),
                    format!("no segment {}", ann.id),
                );
                continue;
            };
            if !annotated.insert(ann.id) {
                push(
                    ViolationKind::DuplicateSegment,
                    frame,
                    format!("{field}.id"),
                    format!("segment {} annotated twice", ann.id),
                );
            }
            if !box_is_ordered(file, &ann.bbox) {
                push(
                    ViolationKind::BoxOrder,
                    frame,
                    format!("{field}.bbox"),
                    format!("{:?} is not a well-ordered box", ann.bbox),
                );
            }
            for category in InteractivityCategory::SINGLE_ACTOR {
                let limit = vocab.get(category);
                for (j, &p) in ann.single_actor(category).iter().enumerate() {
                    if p as usize >= limit {
                        push(
                            ViolationKind::OutOfVocabulary,
                            frame,
                            format!("{field}.{}[{j}]", category.descriptor_key()),
                            format!("predicate {p} >= {limit}"),
                        );
                    }
                }
            }
            for category in InteractivityCategory::DOUBLE_ACTOR {
                let limit = vocab.get(category);
                for (j, label) in ann.double_actor(category).iter().enumerate() {
                    let field = format!("{field}.{}[{j}]", category.descriptor_key());
                    if label.predicate as usize >= limit {
                        push(
                            ViolationKind::OutOfVocabulary,
                            frame,
                            field.clone(),
                            format!("predicate {} >= {limit}", label.predicate),
                        );
                    }
                    if label.track_id == seg.track_id {
                        push(
                            ViolationKind::SelfTarget,
                            frame,
                            field,
                            format!("track {} targets itself", label.track_id),
                        );
                    } else if !tracks.contains(&label.track_id) {
                        push(
                            ViolationKind::UnknownTargetTrack,
                            frame,
                            field,
                            format!("unknown target track {}", label.track_id),
                        );
                    }
                }
            }
        }
        for seg in &record.segments_info {
            if !annotated.contains(&seg.id) {
                push(
                    ViolationKind::MissingAnnotation,
                    frame,
                    "annotations".into(),
                    format!("segment {} has no annotation", seg.id),
                );
            }
        }
    }
    out
}

/// A ground-truth interactivity over the inclusive frame span
/// `[start, end]`, in the file's frame-index units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<u32>,
    pub category: InteractivityCategory,
    pub predicate: u32,
    pub start: u32,
    pub end: u32,
}

pub type LabelKey = (u32, Option<u32>, InteractivityCategory, u32);

impl Triplet {
    pub fn key(&self) -> LabelKey {
        (self.subject, self.object, self.category, self.predicate)
    }

    pub fn contains_window(&self, start: u32, end: u32) -> bool {
        self.start <= start && end <= self.end
    }
}

/// Every `(frame, label)` occurrence in the file.
pub fn per_frame_labels(file: &AnnotationFile) -> BTreeSet<(u32, LabelKey)> {
    let mut out = BTreeSet::new();
    for record in &file.data {
        let tracks: HashMap<u32, u32> = record.segments_info.iter().map(|s| (s.id, s.track_id)).collect();
        for ann in &record.annotations {
            let Some(&subject) = tracks.get(&ann.id) else {
                continue;
            };
            for c in InteractivityCategory::SINGLE_ACTOR {
                for &p in ann.single_actor(c) {
                    out.insert((record.frame_index, (subject, None, c, p)));
                }
            }
            for c in InteractivityCategory::DOUBLE_ACTOR {
                for l in ann.double_actor(c) {
                    out.insert((record.frame_index, (subject, Some(l.track_id), c, l.predicate)));
                }
            }
        }
    }
    out
}

/// Collapses per-frame labels into maximal runs of consecutive frames.
pub fn extract_ground_truth_triplets(file: &AnnotationFile) -> Vec<Triplet> {
    let mut frames_by_key: BTreeMap<LabelKey, Vec<u32>> = BTreeMap::new();
    for (frame, key) in per_frame_labels(file) {
        frames_by_key.entry(key).or_default().push(frame);
    }
    let mut out = Vec::new();
    for ((subject, object, category, predicate), frames) in frames_by_key {
        let mut run_start = frames[0];
        let mut last = frames[0];
        for &f in &frames[1..] {
            if f != last + 1 {
                out.push(Triplet {
                    subject,
                    object,
                    category,
                    predicate,
                    start: run_start,
                    end: last,
                });
                run_start = f;
            }
            last = f;
        }
        out.push(Triplet {
            subject,
            object,
            category,
            predicate,
            start: run_start,
            end: last,
        });
    }
    out.sort();
    out
}

/// Inverse of [`extract_ground_truth_triplets`].
pub fn expand_triplets(triplets: &[Triplet]) -> BTreeSet<(u32, LabelKey)> {
    triplets
        .iter()
        .flat_map(|t| (t.start..=t.end).map(move |f| (f, t.key())))
        .collect()
}

/// Keeps every `rate`-th frame, counted from the first, and renumbers the
/// survivors contiguously from the first frame index.
pub fn subsample_frames(file: &AnnotationFile, rate: usize) -> AnnotationFile {
    assert!(rate >= 1, "sampling rate must be at least 1");
    let mut out = file.clone();
    let Some(first) = file.data.first().map(|r| r.frame_index) else {
        return out;
    };
    out.data = file
        .data
        .iter()
        .filter(|r| ((r.frame_index - first) as usize).is_multiple_of(rate))
        .enumerate()
        .map(|(i, r)| FrameRecord {
            frame_index: first + i as u32,
            ..r.clone()
        })
        .collect();
    out
}

impl AnnotationFile {
    /// Converts an annotation box to the normalised form used by the graph.
    pub fn normalized_box(&self, b: &[f64; 4]) -> Option<BBox> {
        match (self.bbox_mode, self.frame_size) {
            (BBoxMode::Normalized, _) => BBox::new(b[0], b[1], b[2], b[3]),
            (BBoxMode::Pixel, Some(s)) => BBox::new(b[0] / s.width, b[1] / s.height, b[2] / s.width, b[3] / s.height),
            (BBoxMode::Pixel, None) => None,
        }
    }

    pub fn first_frame(&self) -> Option<u32> {
        self.data.first().map(|r| r.frame_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn minimal() -> AnnotationFile {
        let json = r#"{
            "video_id": "v0",
            "vocabulary": {"objects": 3, "appearances": 4, "situations": 4,
                           "positions": 4, "interactions": 4, "relations": 4},
            "data": [{
                "frame_index": 1,
                "segments_info": [{"id": 1, "category_id": 0, "kind": "person", "track_id": 7}],
                "annotations": [{"id": 1, "bbox": [0.1, 0.1, 0.5, 0.5]}]
            }]
        }"#;
        parse_annotations(json.as_bytes()).unwrap()
    }

    fn segment(id: u32, track_id: u32, kind: SubjectKind) -> SegmentInfo {
        SegmentInfo {
            id,
            category_id: 0,
            kind,
            track_id,
            extra: BTreeMap::new(),
        }
    }

    fn region(id: u32) -> RegionAnnotation {
        RegionAnnotation {
            id,
            bbox: [0.1, 0.1, 0.4, 0.4],
            mask: None,
            appearances: vec![],
            situations: vec![],
            positions: vec![],
            interactions: vec![],
            relations: vec![],
            extra: BTreeMap::new(),
        }
    }

    fn frame(index: u32, segments: Vec<SegmentInfo>, annotations: Vec<RegionAnnotation>) -> FrameRecord {
        FrameRecord {
            frame_index: index,
            segments_info: segments,
            annotations,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn minimal_file_parses_with_no_triplets() {
        let f = minimal();
        assert_eq!(f.data.len(), 1);
        assert!(extract_ground_truth_triplets(&f).is_empty());
        assert!(validate(&f).is_empty());
    }

    #[test]
    fn unknown_target_track_is_rejected() {
        let mut f = minimal();
        f.data[0].annotations[0].positions.push(PairLabel {
            track_id: 99,
            predicate: 0,
        });
        let bytes = write_annotations(&f);
        match parse_annotations(&bytes) {
            Err(AnnotationError::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].kind, ViolationKind::UnknownTargetTrack);
                assert!(v[0].to_string().contains("unknown target track"));
                assert!(v[0].to_string().contains("frame 1"));
                assert!(v[0].field.contains("positions[0]"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let text = b"{\n  \"video_id\": \"x\",\n  oops\n}";
        match parse_annotations(text) {
            Err(AnnotationError::Parse { offset, line, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(&text[offset..offset + 4], b"oops");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_and_masks_round_trip() {
        let json = r#"{
            "video_id": "v1", "source": "lasot",
            "vocabulary": {"objects": 2, "appearances": 2, "situations": 2,
                           "positions": 2, "interactions": 2, "relations": 2},
            "data": [{
                "frame_index": 4, "timestamp": 0.133,
                "segments_info": [{"id": 3, "category_id": 1, "kind": "object", "track_id": 2, "iscrowd": 0}],
                "annotations": [{"id": 3, "bbox": [0.0, 0.2, 1.0, 0.9],
                                 "mask": {"size": [4, 4], "counts": "0a1b2c"}, "area": 12}]
            }]
        }"#;
        let f = parse_annotations(json.as_bytes()).unwrap();
        assert_eq!(f.extra["source"], "lasot");
        assert_eq!(f.data[0].annotations[0].extra["area"], 12);
        let out = write_annotations(&f);
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.contains("\"counts\": \"0a1b2c\""));
        assert_eq!(parse_annotations(&out).unwrap(), f);
        assert_eq!(write_annotations(&parse_annotations(&out).unwrap()), out);
    }

    #[test]
    fn validate_kind_flip_and_vocab_boundary() {
        let mut f = minimal();
        f.data
            .push(frame(2, vec![segment(1, 7, SubjectKind::Object)], vec![region(1)]));
        let v = validate(&f);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::KindFlip);

        let mut f = minimal();
        f.data[0].annotations[0].appearances = vec![3, 4];
        let v = validate(&f);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::OutOfVocabulary);
        assert_eq!(v[0].field, "annotations[0].appearances[1]");
    }

    #[test]
    fn validate_structural_problems() {
        let mut f = minimal();
        f.data[0].annotations[0].bbox = [0.5, 0.1, 0.2, 0.3];
        f.data.push(frame(3, vec![], vec![region(8)]));
        f.data.push(frame(3, vec![], vec![]));
        let kinds: Vec<_> = validate(&f).into_iter().map(|v| v.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ViolationKind::BoxOrder,
                ViolationKind::FrameGap,
                ViolationKind::UnknownSegment,
                ViolationKind::FrameOrder
            ]
        );

        let mut f = minimal();
        f.data[0].segments_info.push(segment(2, 7, SubjectKind::Person));
        f.data[0].annotations[0].relations.push(PairLabel {
            track_id: 7,
            predicate: 0,
        });
        let kinds: Vec<_> = validate(&f).into_iter().map(|v| v.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ViolationKind::DuplicateTrack,
                ViolationKind::SelfTarget,
                ViolationKind::MissingAnnotation
            ]
        );

        let mut f = minimal();
        f.bbox_mode = BBoxMode::Pixel;
        assert_eq!(validate(&f)[0].kind, ViolationKind::MissingFrameSize);
        f.frame_size = Some(FrameSize {
            width: 640.0,
            height: 480.0,
        });
        assert!(validate(&f).is_empty());
        let b = f.normalized_box(&[64.0, 48.0, 320.0, 240.0]).unwrap();
        assert_eq!((b.x1, b.y2), (0.1, 0.5));

        let mut f = minimal();
        f.data.clear();
        assert_eq!(validate(&f)[0].kind, ViolationKind::EmptyVideo);
    }

    fn labelled(frames: &[u32]) -> AnnotationFile {
        let mut f = minimal();
        f.data.clear();
        for i in 1..=10 {
            let mut r = region(1);
            if frames.contains(&i) {
                r.appearances.push(2);
            }
            f.data.push(frame(i, vec![segment(1, 7, SubjectKind::Person)], vec![r]));
        }
        f
    }

    #[test]
    fn extraction_examples() {
        let spans = |frames: &[u32]| -> Vec<(u32, u32)> {
            extract_ground_truth_triplets(&labelled(frames))
                .iter()
                .map(|t| (t.start, t.end))
                .collect()
        };
        assert_eq!(spans(&[1, 2, 3, 4, 5]), vec![(1, 5)]);
        assert_eq!(spans(&[1, 2, 4]), vec![(1, 2), (4, 4)]);
        assert_eq!(spans(&[3, 4, 5, 8]), vec![(3, 5), (8, 8)]);
    }

    #[test]
    fn subsample_examples() {
        let f = labelled(&[1, 2, 3]);
        assert_eq!(subsample_frames(&f, 1), f);
        let half = subsample_frames(&f, 2);
        assert_eq!(half.data.len(), 5);
        assert_eq!(
            half.data.iter().map(|r| r.frame_index).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        let mut seven = f.clone();
        seven.data.truncate(7);
        assert_eq!(subsample_frames(&seven, 2).data.len(), 4);
        assert!(validate(&half).is_empty());
    }

    /// Brute-force run-length encoding over a dense frame/label grid.
    fn rle_oracle(grid: &[Vec<bool>]) -> Vec<(u32, u32, u32)> {
        let mut out = Vec::new();
        for (p, row) in grid.iter().enumerate() {
            let mut i = 0;
            while i < row.len() {
                if row[i] {
                    let s = i;
                    while i + 1 < row.len() && row[i + 1] {
                        i += 1;
                    }
                    out.push((p as u32, s as u32 + 1, i as u32 + 1));
                }
                i += 1;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn extraction_matches_rle(grid in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 3)) {
            let mut f = minimal();
            f.data.clear();
            for i in 0..12u32 {
                let mut r = region(1);
                for (p, row) in grid.iter().enumerate() {
                    if row[i as usize] {
                        r.situations.push(p as u32);
                    }
                }
                f.data.push(frame(i + 1, vec![segment(1, 7, SubjectKind::Person)], vec![r]));
            }
            let got: Vec<_> = extract_ground_truth_triplets(&f).iter().map(|t| (t.predicate, t.start, t.end)).collect();
            let mut want = rle_oracle(&grid);
            want.sort();
            prop_assert_eq!(got, want);
            prop_assert_eq!(expand_triplets(&extract_ground_truth_triplets(&f)), per_frame_labels(&f));
        }

        #[test]
        fn subsample_composes(n in 1usize..40, a in 1usize..5, b in 1usize..5) {
            let mut f = minimal();
            f.data = (0..n as u32).map(|i| {
                let mut r = region(1);
                r.appearances.push(i % 4);
                frame(i + 1, vec![segment(1, 7, SubjectKind::Person)], vec![r])
            }).collect();
            let two_step = subsample_frames(&subsample_frames(&f, a), b);
            let one_step = subsample_frames(&f, a * b);
            prop_assert_eq!(two_step, one_step);
        }
    }
}
