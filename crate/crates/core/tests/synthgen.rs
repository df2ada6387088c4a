use std::collections::BTreeMap;

use hig_core::annotations::{self, AnnotationFile};
use hig_core::classifier::{InteractivityCategory, VocabSizes};
use hig_core::dataset::{build_sample, sha256_hex, Dataset, Split};
use hig_core::synthgen::{generate_dataset, generate_video, Embeddings, ScenarioConfig};

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (x, &y) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= f * y;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Least-squares coefficients of `target` over the dictionary columns.
fn decode(dictionary: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let gram = dictionary
        .iter()
        .map(|u| {
            dictionary
                .iter()
                .map(|v| u.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let rhs = dictionary
        .iter()
        .map(|u| u.iter().zip(target).map(|(a, b)| a * b).sum())
        .collect();
    solve(gram, rhs)
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Atom {
    Category(u32),
    Subject(InteractivityCategory, u32),
    Object(InteractivityCategory, u32),
}

/// Expected dictionary counts per `(frame, track)`, read from the annotation
/// labels alone.
fn expected_counts(file: &AnnotationFile) -> BTreeMap<(u32, u32), BTreeMap<Atom, u32>> {
    let mut out: BTreeMap<(u32, u32), BTreeMap<Atom, u32>> = BTreeMap::new();
    for record in &file.data {
        let f = record.frame_index;
        for seg in &record.segments_info {
            *out.entry((f, seg.track_id))
                .or_default()
                .entry(Atom::Category(seg.category_id))
                .or_default() += 1;
        }
        for region in &record.annotations {
            let track = record
                .segments_info
                .iter()
                .find(|s| s.id == region.id)
                .unwrap()
                .track_id;
            for c in InteractivityCategory::SINGLE_ACTOR {
                for &p in region.single_actor(c) {
                    *out.entry((f, track))
                        .or_default()
                        .entry(Atom::Subject(c, p))
                        .or_default() += 1;
                }
            }
            for c in InteractivityCategory::DOUBLE_ACTOR {
                for pair in region.double_actor(c) {
                    *out.entry((f, track))
                        .or_default()
                        .entry(Atom::Subject(c, pair.predicate))
                        .or_default() += 1;
                    *out.entry((f, pair.track_id))
                        .or_default()
                        .entry(Atom::Object(c, pair.predicate))
                        .or_default() += 1;
                }
            }
        }
    }
    out
}

#[test]
fn noiseless_features_decode_to_their_labels() {
    let config = ScenarioConfig {
        frames: 8,
        max_subjects: 4,
        object_categories: 4,
        vocab: VocabSizes::uniform(3),
        feature_dim: 64,
        noise_sigma: 0.0,
        density: 1.0,
        ..ScenarioConfig::default()
    };
    let emb = Embeddings::new(&config);
    let mut atoms = Vec::new();
    let mut dictionary = Vec::new();
    for (i, v) in emb.category.iter().enumerate() {
        atoms.push(Atom::Category(i as u32));
        dictionary.push(v.clone());
    }
    for c in InteractivityCategory::ALL {
        for (p, v) in emb.subject_role[c.index()].iter().enumerate() {
            atoms.push(Atom::Subject(c, p as u32));
            dictionary.push(v.clone());
        }
        for (p, v) in emb.object_role[c.index()].iter().enumerate() {
            atoms.push(Atom::Object(c, p as u32));
            dictionary.push(v.clone());
        }
    }
    assert!(dictionary.len() < config.feature_dim);

    let mut checked = 0;
    for seed in 0..5 {
        let video = generate_video(&config, seed).unwrap();
        let expected = expected_counts(&video.annotations);
        for frame in &video.features.frames {
            for track in &frame.tracks {
                let coeffs = decode(&dictionary, &track.feature);
                let want = &expected[&(frame.frame_index, track.track_id)];
                for (atom, c) in atoms.iter().zip(&coeffs) {
                    let n = want.get(atom).copied().unwrap_or(0);
                    assert!((c - f64::from(n)).abs() < 1e-6, "{atom:?}: {c} vs {n}");
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn dataset_files_load_back_exactly() {
    let config = ScenarioConfig {
        videos: 5,
        frames: 7,
        vocab: VocabSizes::uniform(4),
        object_categories: 3,
        feature_dim: 6,
        val_fraction: 0.4,
        seed: 21,
        ..ScenarioConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, manifest);
    assert_eq!(ds.entries(Some(Split::Val)).count(), 2);
    assert_eq!(ds.entries(None).count(), 5);
    assert_eq!(ds.manifest.scenario.as_ref(), Some(&config));

    for (i, entry) in ds.entries(None).enumerate() {
        let mut bytes = std::fs::read(dir.path().join(&entry.annotations)).unwrap();
        bytes.extend(std::fs::read(dir.path().join(&entry.features)).unwrap());
        assert_eq!(sha256_hex(&bytes), entry.sha256);

        let direct = generate_video(&config, i as u64).unwrap();
        let (ann, sample) = ds.load_video(entry, 1).unwrap();
        assert_eq!(ann, direct.annotations);
        assert_eq!(sample, build_sample(&direct.annotations, &direct.features).unwrap());
        assert!(annotations::validate(&ann).is_empty());
        assert_eq!(annotations::extract_ground_truth_triplets(&ann), direct.schedule);

        let (_, half) = ds.load_video(entry, 2).unwrap();
        assert_eq!(half.frame_count(), 4);
    }
}
