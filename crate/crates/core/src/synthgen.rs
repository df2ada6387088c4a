//! Planted-truth synthetic videos.
//!
//! Every subject is present in every frame. Its feature in a frame is the
//! embedding of its object category plus the embeddings of every predicate
//! active on it in that frame, plus Gaussian noise. Double-actor
//! predicates use separate embeddings for the subject and object roles.
//! Each `(subject, object, category, predicate)` key is scheduled over at
//! most one span, so the schedule is exactly what span extraction returns.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{
    self, AnnotationFile, BBoxMode, FrameRecord, PairLabel, RegionAnnotation, SegmentInfo, Triplet, Vocabulary,
};
use crate::classifier::{ApplicabilityMask, InteractivityCategory, VocabSizes};
use crate::dataset::{self, DatasetError, FeatureFile, FrameFeatures, Manifest, ManifestEntry, Split, TrackFeature};
use crate::graph::SubjectKind;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("scenario produces videos without subjects")]
    EmptyVideo,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub videos: usize,
    /// Frames per video.
    pub frames: usize,
    pub min_subjects: usize,
    pub max_subjects: usize,
    /// Probability that a subject is a person.
    pub person_ratio: f64,
    /// Object category count; category 0 is the person class.
    pub object_categories: u32,
    pub vocab: VocabSizes,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Expected spans per ordered subject pair and double-actor category.
    pub density: f64,
    /// Expected spans per subject and single-actor category.
    pub single_actor_density: f64,
    /// Shortest scheduled span, in frames.
    pub min_span: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub mask: ApplicabilityMask,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            videos: 10,
            frames: 16,
            min_subjects: 2,
            max_subjects: 5,
            person_ratio: 0.5,
            object_categories: 80,
            vocab: VocabSizes::default(),
            feature_dim: 32,
            noise_sigma: 0.1,
            density: 0.5,
            single_actor_density: 1.0,
            min_span: 2,
            val_fraction: 0.2,
            seed: 0,
            mask: ApplicabilityMask::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SynthError::InvalidConfig(m));
        if self.max_subjects == 0 {
            return Err(SynthError::EmptyVideo);
        }
        if self.min_subjects == 0 || self.min_subjects > self.max_subjects {
            return fail(format!(
                "subject range {}..={} must be non-empty and start at 1 or more",
                self.min_subjects, self.max_subjects
            ));
        }
        if self.videos == 0 {
            return fail("video count must be positive".into());
        }
        if self.frames == 0 {
            return fail("frames per video must be positive".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.min_span == 0 {
            return fail("min_span must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.person_ratio) {
            return fail(format!("person_ratio {} outside [0, 1]", self.person_ratio));
        }
        if self.object_categories == 0 || (self.person_ratio < 1.0 && self.object_categories < 2) {
            return fail("object subjects need at least 2 object categories (0 is the person class)".into());
        }
        for c in InteractivityCategory::ALL {
            if self.vocab.get(c) == 0 {
                return fail(format!("{c} vocabulary must be non-empty"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        for (name, d) in [
            ("density", self.density),
            ("single_actor_density", self.single_actor_density),
        ] {
            if !(d.is_finite() && d >= 0.0) {
                return fail(format!("{name} {d} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        self.mask.validate().map_err(SynthError::InvalidConfig)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.object_categories, self.vocab)
    }
}

/// Embedding tables drawn once per scenario seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub category: Vec<Vec<f64>>,
    /// Indexed by category index, then predicate. Single-actor categories
    /// and the subject role of double-actor categories.
    pub subject_role: Vec<Vec<Vec<f64>>>,
    /// Object role of double-actor categories; empty for single-actor ones.
    pub object_role: Vec<Vec<Vec<f64>>>,
}

impl Embeddings {
    pub fn new(config: &ScenarioConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let dim = config.feature_dim;
        let scale = 1.0 / (dim as f64).sqrt();
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        };
        let category = table(config.object_categories as usize);
        let mut subject_role = Vec::new();
        let mut object_role = Vec::new();
        for c in InteractivityCategory::ALL {
            subject_role.push(table(config.vocab.get(c)));
            object_role.push(if c.is_single_actor() {
                Vec::new()
            } else {
                table(config.vocab.get(c))
            });
        }
        Self {
            category,
            subject_role,
            object_role,
        }
    }
}

/// One generated video: annotations, features and the planted schedule
/// (sorted, in file frame units).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedVideo {
    pub annotations: AnnotationFile,
    pub features: FeatureFile,
    pub schedule: Vec<Triplet>,
}

#[derive(Debug, Clone)]
struct Subject {
    track_id: u32,
    kind: SubjectKind,
    category_id: u32,
}

fn sample_count(rng: &mut impl Rng, expected: f64) -> usize {
    let whole = expected.floor();
    whole as usize + usize::from(rng.random_bool(expected - whole))
}

fn sample_span(rng: &mut impl Rng, frames: usize, min_span: usize) -> (u32, u32) {
    let len = rng.random_range(min_span.min(frames)..=frames);
    let start = rng.random_range(1..=frames - len + 1);
    (start as u32, (start + len - 1) as u32)
}

/// Distinct predicates for one key, each with its own span.
fn schedule_key(
    rng: &mut impl Rng,
    config: &ScenarioConfig,
    expected: f64,
    category: InteractivityCategory,
    subject: u32,
    object: Option<u32>,
    out: &mut Vec<Triplet>,
) {
    let vocab = config.vocab.get(category);
    let count = sample_count(rng, expected).min(vocab);
    for predicate in rand::seq::index::sample(rng, vocab, count) {
        let (start, end) = sample_span(rng, config.frames, config.min_span);
        out.push(Triplet {
            subject,
            object,
            category,
            predicate: predicate as u32,
            start,
            end,
        });
    }
}

fn video_rng(config: &ScenarioConfig, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(seed.wrapping_add(1));
    rng
}

/// Generates one video. Embeddings come from `config.seed`; `seed` drives
/// everything video-specific.
pub fn generate_video(config: &ScenarioConfig, seed: u64) -> Result<GeneratedVideo> {
    config.validate()?;
    generate_with(config, &Embeddings::new(config), &format!("synth_{seed:05}"), seed)
}

fn generate_with(config: &ScenarioConfig, emb: &Embeddings, video_id: &str, seed: u64) -> Result<GeneratedVideo> {
    let mut rng = video_rng(config, seed);
    let n = rng.random_range(config.min_subjects..=config.max_subjects);
    if n == 0 {
        return Err(SynthError::EmptyVideo);
    }
    let subjects: Vec<Subject> = (0..n)
        .map(|i| {
            let person = rng.random_bool(config.person_ratio);
            Subject {
                track_id: i as u32 + 1,
                kind: if person {
                    SubjectKind::Person
                } else {
                    SubjectKind::Object
                },
                category_id: if person {
                    0
                } else {
                    rng.random_range(1..config.object_categories)
                },
            }
        })
        .collect();

    let mut schedule = Vec::new();
    for s in &subjects {
        for c in InteractivityCategory::SINGLE_ACTOR {
            schedule_key(
                &mut rng,
                config,
                config.single_actor_density,
                c,
                s.track_id,
                None,
                &mut schedule,
            );
        }
    }
    for s in &subjects {
        for o in &subjects {
            if s.track_id == o.track_id {
                continue;
            }
            for c in InteractivityCategory::DOUBLE_ACTOR {
                if config.mask.allows(c, s.kind, o.kind) {
                    schedule_key(
                        &mut rng,
                        config,
                        config.density,
                        c,
                        s.track_id,
                        Some(o.track_id),
                        &mut schedule,
                    );
                }
            }
        }
    }
    schedule.sort();

    let boxes = drift_boxes(&mut rng, n, config.frames);
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let dim = config.feature_dim;

    let mut data = Vec::with_capacity(config.frames);
    let mut feature_frames = Vec::with_capacity(config.frames);
    for f in 1..=config.frames as u32 {
        let active: Vec<&Triplet> = schedule.iter().filter(|t| t.start <= f && f <= t.end).collect();
        let mut segments_info = Vec::with_capacity(n);
        let mut regions = Vec::with_capacity(n);
        let mut tracks = Vec::with_capacity(n);
        for (i, s) in subjects.iter().enumerate() {
            let id = i as u32 + 1;
            segments_info.push(SegmentInfo {
                id,
                category_id: s.category_id,
                kind: s.kind,
                track_id: s.track_id,
                extra: BTreeMap::new(),
            });
            let mut region = RegionAnnotation {
                id,
                bbox: boxes[i][f as usize - 1],
                mask: None,
                appearances: Vec::new(),
                situations: Vec::new(),
                positions: Vec::new(),
                interactions: Vec::new(),
                relations: Vec::new(),
                extra: BTreeMap::new(),
            };
            let mut feature = emb.category[s.category_id as usize].clone();
            for t in &active {
                let ci = t.category.index();
                let p = t.predicate as usize;
                if t.subject == s.track_id {
                    add_into(&mut feature, &emb.subject_role[ci][p]);
                    let object = t.object;
                    match (t.category, object) {
                        (InteractivityCategory::Appearance, _) => region.appearances.push(t.predicate),
                        (InteractivityCategory::Situation, _) => region.situations.push(t.predicate),
                        (c, Some(o)) => {
                            let label = PairLabel {
                                track_id: o,
                                predicate: t.predicate,
                            };
                            match c {
                                InteractivityCategory::Position => region.positions.push(label),
                                InteractivityCategory::Interaction => region.interactions.push(label),
                                _ => region.relations.push(label),
                            }
                        }
                        (_, None) => unreachable!("double-actor triplet without object"),
                    }
                }
                if t.object == Some(s.track_id) {
                    add_into(&mut feature, &emb.object_role[ci][p]);
                }
            }
            region.appearances.sort_unstable();
            region.situations.sort_unstable();
            region.positions.sort_unstable();
            region.interactions.sort_unstable();
            region.relations.sort_unstable();
            if config.noise_sigma > 0.0 {
                for v in &mut feature {
                    *v += noise.sample(&mut rng);
                }
            }
            debug_assert_eq!(feature.len(), dim);
            regions.push(region);
            tracks.push(TrackFeature {
                track_id: s.track_id,
                feature,
            });
        }
        data.push(FrameRecord {
            frame_index: f,
            segments_info,
            annotations: regions,
            extra: BTreeMap::new(),
        });
        feature_frames.push(FrameFeatures { frame_index: f, tracks });
    }

    Ok(GeneratedVideo {
        annotations: AnnotationFile {
            video_id: video_id.to_string(),
            fps: None,
            bbox_mode: BBoxMode::Normalized,
            frame_size: None,
            vocabulary: config.vocabulary(),
            data,
            extra: BTreeMap::new(),
        },
        features: FeatureFile {
            video_id: video_id.to_string(),
            dim,
            frames: feature_frames,
        },
        schedule,
    })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Boxes of random size whose centres follow a slow random walk, kept
/// inside the unit square.
fn drift_boxes(rng: &mut impl Rng, subjects: usize, frames: usize) -> Vec<Vec<[f64; 4]>> {
    let step = Normal::new(0.0, 0.01).expect("constant sigma");
    (0..subjects)
        .map(|_| {
            let w: f64 = rng.random_range(0.1..0.3);
            let h: f64 = rng.random_range(0.1..0.3);
            let mut cx: f64 = rng.random_range(w / 2.0..1.0 - w / 2.0);
            let mut cy: f64 = rng.random_range(h / 2.0..1.0 - h / 2.0);
            (0..frames)
                .map(|i| {
                    if i > 0 {
                        cx = (cx + step.sample(rng)).clamp(w / 2.0, 1.0 - w / 2.0);
                        cy = (cy + step.sample(rng)).clamp(h / 2.0, 1.0 - h / 2.0);
                    }
                    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
                })
                .collect()
        })
        .collect()
}

pub fn video_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Validation videos are a seeded random subset of size
/// `round(videos * val_fraction)`.
fn assign_splits(config: &ScenarioConfig) -> Vec<Split> {
    let mut order: Vec<usize> = (0..config.videos).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let val = (config.videos as f64 * config.val_fraction).round() as usize;
    let mut splits = vec![Split::Train; config.videos];
    for &i in &order[..val.min(config.videos)] {
        splits[i] = Split::Val;
    }
    splits
}

/// Writes `manifest.json` and `videos/<id>.{annotations,features}.json`
/// under `out_dir`. Videos are generated in parallel from per-video
/// streams, so the output does not depend on the thread count.
pub fn generate_dataset(config: &ScenarioConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let emb = Embeddings::new(config);
    let splits = assign_splits(config);
    let entries = (0..config.videos)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let id = video_id(i);
            let video = generate_with(config, &emb, &id, i as u64)?;
            let ann_bytes = annotations::write_annotations(&video.annotations);
            let feat_bytes = annotations::canonical_json(&video.features);
            let ann_rel = format!("videos/{id}.annotations.json");
            let feat_rel = format!("videos/{id}.features.json");
            dataset::write(&out_dir.join(&ann_rel), &ann_bytes)?;
            dataset::write(&out_dir.join(&feat_rel), &feat_bytes)?;
            Ok(ManifestEntry {
                id,
                split: splits[i],
                frames: config.frames,
                annotations: ann_rel,
                features: feat_rel,
                sha256: dataset::sha256_hex(&[ann_bytes, feat_bytes].concat()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        schema_version: dataset::SCHEMA_VERSION,
        feature_dim: config.feature_dim,
        vocabulary: config.vocabulary(),
        scenario: Some(config.clone()),
        videos: entries,
    };
    dataset::write(
        &out_dir.join(dataset::MANIFEST_FILE),
        &annotations::canonical_json(&manifest),
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{extract_ground_truth_triplets, validate};

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            videos: 3,
            frames: 8,
            min_subjects: 2,
            max_subjects: 5,
            object_categories: 4,
            vocab: VocabSizes::uniform(5),
            feature_dim: 16,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = generate_video(&small(), 3).unwrap();
        let b = generate_video(&small(), 3).unwrap();
        assert_eq!(
            annotations::write_annotations(&a.annotations),
            annotations::write_annotations(&b.annotations)
        );
        assert_eq!(
            annotations::canonical_json(&a.features),
            annotations::canonical_json(&b.features)
        );
        let c = generate_video(&small(), 4).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn noiseless_single_subject_with_fixed_label_has_constant_features() {
        let cfg = ScenarioConfig {
            min_subjects: 1,
            max_subjects: 1,
            noise_sigma: 0.0,
            single_actor_density: 1.0,
            min_span: 8,
            vocab: VocabSizes {
                situations: 1,
                ..VocabSizes::uniform(1)
            },
            ..small()
        };
        let v = generate_video(&cfg, 0).unwrap();
        let first = &v.features.frames[0].tracks[0].feature;
        assert!(v.features.frames.iter().all(|f| &f.tracks[0].feature == first));
        assert!(v
            .annotations
            .data
            .iter()
            .all(|r| r.annotations[0].appearances == vec![0]));
    }

    #[test]
    fn zero_density_schedules_no_pairs() {
        let cfg = ScenarioConfig {
            density: 0.0,
            ..small()
        };
        for seed in 0..5 {
            let v = generate_video(&cfg, seed).unwrap();
            assert!(extract_ground_truth_triplets(&v.annotations)
                .iter()
                .all(|t| t.object.is_none()));
        }
    }

    #[test]
    fn zero_subjects_is_an_error() {
        let cfg = ScenarioConfig {
            min_subjects: 0,
            max_subjects: 0,
            ..small()
        };
        assert!(matches!(generate_video(&cfg, 0), Err(SynthError::EmptyVideo)));
    }

    #[test]
    fn files_validate_and_schedule_round_trips() {
        let cfg = ScenarioConfig {
            density: 1.3,
            single_actor_density: 1.5,
            ..small()
        };
        for seed in 0..20 {
            let v = generate_video(&cfg, seed).unwrap();
            assert!(validate(&v.annotations).is_empty());
            assert_eq!(extract_ground_truth_triplets(&v.annotations), v.schedule);
            for t in &v.schedule {
                if let Some(o) = t.object {
                    let kind = |id| {
                        v.annotations.data[0]
                            .segments_info
                            .iter()
                            .find(|s| s.track_id == id)
                            .unwrap()
                            .kind
                    };
                    assert!(cfg.mask.allows(t.category, kind(t.subject), kind(o)));
                }
            }
        }
    }

    #[test]
    fn dataset_manifest_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig { videos: 10, ..small() };
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.videos.len(), 10);
        let val = m.videos.iter().filter(|e| e.split == Split::Val).count();
        assert_eq!(val, 2);
        let bytes = std::fs::read(dir.path().join("manifest.json")).unwrap();

        let again = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, again.path()).unwrap();
        assert_eq!(bytes, std::fs::read(again.path().join("manifest.json")).unwrap());

        let ds = dataset::Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let train: Vec<_> = ds.entries(Some(Split::Train)).map(|e| e.id.clone()).collect();
        let valid: Vec<_> = ds.entries(Some(Split::Val)).map(|e| e.id.clone()).collect();
        assert!(train.iter().all(|id| !valid.contains(id)));
        assert_eq!(train.len() + valid.len(), 10);
    }
}
