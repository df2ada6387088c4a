use std::collections::BTreeSet;

use hig_core::annotations::Triplet;
use hig_core::classifier::{ApplicabilityMask, InteractivityCategory, VocabSizes};
use hig_core::dataset::VideoSample;
use hig_core::graph::{BBox, HierarchyConfig, Nonlinearity, SubjectKind, SubjectNode};
use hig_core::model::HigModel;
use hig_core::numerics::{gradient_check, Matrix};
use hig_core::training::{total_loss, video_loss, FocalLossParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(t: usize, n: usize, dim: usize, seed: u64) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..t)
        .map(|_| {
            (0..n)
                .map(|i| SubjectNode {
                    track_id: i as u32 + 1,
                    kind: if i % 2 == 0 {
                        SubjectKind::Person
                    } else {
                        SubjectKind::Object
                    },
                    category_id: 0,
                    bbox: BBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
                    feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect()
        })
        .collect();
    let mut ground_truth = Vec::new();
    for _ in 0..12 {
        let subject = rng.random_range(1..=n as u32);
        let category = InteractivityCategory::ALL[rng.random_range(0..5)];
        let object = (!category.is_single_actor()).then(|| loop {
            let o = rng.random_range(1..=n as u32);
            if o != subject {
                break o;
            }
        });
        let start = rng.random_range(1..=t as u32);
        let end = rng.random_range(start..=t as u32);
        ground_truth.push(Triplet {
            subject,
            object,
            category,
            predicate: rng.random_range(0..3),
            start,
            end,
        });
    }
    VideoSample {
        video_id: "g".into(),
        first_frame: 1,
        frames,
        ground_truth,
    }
}

fn set_values(model: &mut HigModel, values: &[Matrix]) {
    for (p, v) in model.parameters_mut().into_iter().zip(values) {
        p.value = v.clone();
    }
}

fn check(config: HierarchyConfig, trainable: BTreeSet<usize>) -> f64 {
    let v = sample(6, 5, 8, 11);
    let mut model = HigModel::new(config, VocabSizes::uniform(3), ApplicabilityMask::allow_all(), 5).unwrap();
    let focal = FocalLossParams::default();
    let out = model.forward(&v.frames).unwrap();
    let loss = video_loss(&out, &v, &trainable, &focal).unwrap();
    model.zero_grad();
    model.backward(&out, &loss.grads).unwrap();
    let params: Vec<Matrix> = model.parameters().iter().map(|p| p.value.clone()).collect();
    let analytic: Vec<Matrix> = model.parameters().iter().map(|p| p.grad()).collect();
    let mut probe = model.clone();
    gradient_check(&params, &analytic, 1e-5, |values| {
        set_values(&mut probe, values);
        let out = probe.forward(&v.frames).unwrap();
        let l = video_loss(&out, &v, &trainable, &focal).unwrap();
        let counted: Vec<f64> = l
            .level_losses
            .iter()
            .enumerate()
            .filter(|(i, _)| trainable.contains(&(i + 1)))
            .map(|(_, &x)| x)
            .collect();
        Ok(total_loss(&counted))
    })
    .unwrap()
}

fn dims(levels: usize) -> HierarchyConfig {
    HierarchyConfig {
        levels,
        dims: vec![8; levels + 1],
        ..HierarchyConfig::default()
    }
}

#[test]
fn full_pipeline_gradient_with_root_weights() {
    let err = check(dims(6), (1..=6).collect());
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradient_without_root_weights_or_rectifier() {
    let cfg = HierarchyConfig {
        root_weight: false,
        nonlinearity: Nonlinearity::None,
        k: 2,
        ..dims(4)
    };
    let err = check(cfg, (1..=4).collect());
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradient_with_excluded_levels() {
    let err = check(dims(4), BTreeSet::from([1, 3]));
    assert!(err < 1e-4, "max relative error {err}");
}
