use std::collections::{BTreeSet, HashSet};

use hig_core::annotations::{self, Triplet};
use hig_core::classifier::{ApplicabilityMask, InteractivityCategory, VocabSizes};
use hig_core::dataset::{build_sample, VideoSample};
use hig_core::graph::{HierarchyConfig, WeightSharing};
use hig_core::model::HigModel;
use hig_core::synthgen::{generate_video, ScenarioConfig};
use hig_core::training::{
    focal_loss, focal_loss_with_grad, level_loss, Checkpoint, FocalLossParams, LabelIndex, TrainConfig, Trainer,
    UnfreezeSchedule,
};

fn scenario(sigma: f64) -> ScenarioConfig {
    ScenarioConfig {
        frames: 6,
        max_subjects: 4,
        object_categories: 3,
        vocab: VocabSizes::uniform(3),
        feature_dim: 8,
        noise_sigma: sigma,
        ..ScenarioConfig::default()
    }
}

fn samples(config: &ScenarioConfig, n: u64) -> Vec<VideoSample> {
    (0..n)
        .map(|seed| {
            let v = generate_video(config, seed).unwrap();
            build_sample(&v.annotations, &v.features).unwrap()
        })
        .collect()
}

fn hierarchy(levels: usize) -> HierarchyConfig {
    HierarchyConfig {
        levels,
        dims: vec![8; levels + 1],
        ..HierarchyConfig::default()
    }
}

fn trainer(config: &ScenarioConfig, train: TrainConfig) -> Trainer {
    let model = HigModel::new(hierarchy(3), config.vocab, config.mask.clone(), 1).unwrap();
    Trainer::new(model, train).unwrap()
}

fn fast() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs_per_stage: 2,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let sc = scenario(0.1);
    let data = samples(&sc, 3);
    let mut a = trainer(&sc, fast());
    let mut b = trainer(&sc, fast());
    for _ in 0..a.total_epochs() {
        assert_eq!(a.train_epoch(&data).unwrap(), b.train_epoch(&data).unwrap());
    }
    assert_eq!(a.model, b.model);
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let sc = scenario(0.1);
    let data = samples(&sc, 3);
    let mut straight = trainer(&sc, fast());
    for _ in 0..straight.total_epochs() {
        straight.train_epoch(&data).unwrap();
    }

    let mut first = trainer(&sc, fast());
    for _ in 0..3 {
        first.train_epoch(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap()).unwrap();
    while resumed.epoch < resumed.total_epochs() {
        resumed.train_epoch(&data).unwrap();
    }
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let sc = scenario(0.1);
    let data = samples(&sc, 2);
    let mut t = trainer(
        &sc,
        TrainConfig {
            learning_rate: 0.0,
            ..fast()
        },
    );
    let values = |m: &HigModel| -> Vec<Vec<f64>> { m.parameters().iter().map(|p| p.value.values().to_vec()).collect() };
    let before = values(&t.model);
    for _ in 0..3 {
        t.train_epoch(&data).unwrap();
    }
    assert_eq!(values(&t.model), before);
}

#[test]
fn noiseless_single_video_loss_decreases() {
    let sc = scenario(0.0);
    let data = samples(&sc, 1);
    let mut t = trainer(
        &sc,
        TrainConfig {
            learning_rate: 1e-2,
            schedule: Some(UnfreezeSchedule::single_stage(3, 50)),
            ..TrainConfig::default()
        },
    );
    let first = t.train_epoch(&data).unwrap().total_loss;
    let mut last = first;
    while t.epoch < t.total_epochs() {
        last = t.train_epoch(&data).unwrap().total_loss;
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn shared_weights_are_one_parameter_set() {
    let sc = scenario(0.1);
    let data = samples(&sc, 2);
    let config = HierarchyConfig {
        weight_sharing: WeightSharing::SharedAcrossLevels,
        ..hierarchy(3)
    };
    let model = HigModel::new(config, sc.vocab, sc.mask.clone(), 1).unwrap();
    let per_level = HigModel::new(hierarchy(3), sc.vocab, sc.mask.clone(), 1).unwrap();
    assert_eq!(model.levels.len(), 1);
    assert_eq!(3 * model.parameter_count(), per_level.parameter_count());
    assert!((1..=3).all(|l| model.slot(l) == 0));

    let mut t = Trainer::new(model, fast()).unwrap();
    let before = t.model.levels[0].clone();
    t.train_epoch(&data).unwrap();
    assert_eq!(t.model.levels.len(), 1);
    assert_ne!(t.model.levels[0], before);
}

/// Whether a ground-truth triplet of this key spans the whole window.
fn positive(gt: &[Triplet], key: (u32, Option<u32>, InteractivityCategory, u32), start: u32, end: u32) -> bool {
    gt.iter().any(|t| t.key() == key && t.start <= start && end <= t.end)
}

#[test]
fn level_loss_matches_brute_force() {
    let sc = scenario(0.1);
    let focal = FocalLossParams::default();
    for sample in samples(&sc, 3) {
        let model = HigModel::new(hierarchy(4), sc.vocab, ApplicabilityMask::default(), 2).unwrap();
        let out = model.forward(&sample.frames).unwrap();
        let index = LabelIndex::new(&sample.ground_truth);
        for level in 1..=out.hierarchy.level_count() {
            let (mean, grads) = level_loss(&out, level, &index, &focal);
            let mut entries = Vec::new();
            for (t0, (state, o)) in out
                .hierarchy
                .level(level)
                .iter()
                .zip(&out.outputs[level - 1])
                .enumerate()
            {
                let (start, end) = (t0 as u32 + 1, (t0 + level) as u32);
                let nodes = &state.cell.nodes;
                let keyed = nodes
                    .iter()
                    .zip(&o.node_logits)
                    .map(|(n, z)| (n.track_id, None, z))
                    .chain(
                        state
                            .cell
                            .edges
                            .iter()
                            .zip(&o.edge_logits)
                            .map(|(e, z)| (nodes[e.target].track_id, Some(nodes[e.source].track_id), z)),
                    );
                for (subject, object, logits) in keyed {
                    for c in InteractivityCategory::ALL {
                        for (p, &z) in logits[c.index()].iter().flatten().enumerate() {
                            let y = positive(&sample.ground_truth, (subject, object, c, p as u32), start, end);
                            entries.push((z, y));
                        }
                    }
                }
            }
            let n = entries.len() as f64;
            let expected: f64 = entries
                .iter()
                .map(|&(z, y)| focal_loss(1.0 / (1.0 + (-z).exp()), y, &focal))
                .sum::<f64>()
                / n;
            assert!(
                (mean - expected).abs() <= 1e-12 * expected.max(1.0),
                "level {level}: {mean} vs {expected}"
            );

            let flat: Vec<f64> = grads
                .iter()
                .flat_map(|g| g.node.iter().chain(&g.edge))
                .flat_map(|d| {
                    InteractivityCategory::ALL
                        .into_iter()
                        .flat_map(move |c| d[c.index()].iter().flatten().copied())
                })
                .collect();
            assert_eq!(flat.len(), entries.len());
            for (g, &(z, y)) in flat.iter().zip(&entries) {
                let want = focal_loss_with_grad(z, y, &focal).1 / n;
                assert!((g - want).abs() <= 1e-15, "{g} vs {want}");
            }
        }
    }
}

#[test]
fn level_one_labels_are_the_per_frame_labels() {
    let sc = ScenarioConfig {
        density: 1.5,
        ..scenario(0.1)
    };
    for seed in 0..5 {
        let v = generate_video(&sc, seed).unwrap();
        let sample = build_sample(&v.annotations, &v.features).unwrap();
        let index = LabelIndex::new(&sample.ground_truth);
        let labels = annotations::per_frame_labels(&v.annotations);
        let tracks: Vec<u32> = sample.frames[0].iter().map(|n| n.track_id).collect();
        for f in 1..=sample.frame_count() as u32 {
            let mut from_index = HashSet::new();
            for &s in &tracks {
                for object in std::iter::once(None).chain(tracks.iter().filter(|&&o| o != s).map(|&o| Some(o))) {
                    for (c, p) in index.positives(s, object, f, f) {
                        from_index.insert((s, object, c, p));
                    }
                }
            }
            let from_file: HashSet<_> = labels.iter().filter(|(g, _)| *g == f).map(|&(_, k)| k).collect();
            assert_eq!(from_index, from_file, "video {seed} frame {f}");
        }
    }
}

#[test]
fn unfreezing_schedule_gates_losses() {
    let sc = scenario(0.1);
    let data = samples(&sc, 2);
    let mut t = trainer(&sc, fast());
    let seen: Vec<BTreeSet<usize>> = (0..t.total_epochs())
        .map(|_| t.train_epoch(&data).unwrap().trainable)
        .collect();
    assert_eq!(
        seen,
        vec![
            BTreeSet::from([1]),
            BTreeSet::from([1]),
            BTreeSet::from([1, 2]),
            BTreeSet::from([1, 2]),
            BTreeSet::from([1, 2, 3]),
            BTreeSet::from([1, 2, 3]),
        ]
    );
}
