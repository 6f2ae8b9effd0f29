use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::image::GrayImage;
use crate::renderer::render_frame;
use crate::testutil::{tiny_cameras, tiny_scene_params};

fn tiny_dataset(with_masks: bool) -> Dataset {
    let (teacher, _) = tiny_scene_params(99);
    let cameras = tiny_cameras();
    let frames = cameras
        .iter()
        .enumerate()
        .map(|(t, c)| render_frame(&teacher, c, t, &RenderSettings::default(), 1).unwrap().color)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pseudo_masks = with_masks.then(|| {
        (0..3)
            .map(|t| {
                let values = GrayImage {
                    width: 6,
                    height: 5,
                    data: (0..30).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
                };
                MotionMask::new(values, t, 0.5).unwrap()
            })
            .collect()
    });
    Dataset {
        cameras,
        frames,
        pseudo_masks,
    }
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        learning_rate: 0.05,
        steps_per_epoch: 3,
        rays_per_step: 24,
        loss: LossConfig {
            render: RenderSettings {
                samples: 8,
                stratified: true,
                seed: 0,
            },
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut x = vec![3.0, -2.0];
    let mut adam = Adam::new(2);
    for _ in 0..2000 {
        let g = vec![2.0 * x[0], 4.0 * (x[1] - 1.0)];
        adam.update(&mut x, &g, 0.01, &[0..2]);
    }
    assert!(x[0].abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3, "{x:?}");
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1.0, 0, 11, 0.1), 1.0);
    assert!((cosine_lr(1.0, 10, 11, 0.1) - 0.1).abs() < 1e-15);
    assert!((cosine_lr(1.0, 5, 11, 0.0) - 0.5).abs() < 1e-15);
    let lrs: Vec<f64> = (0..11).map(|s| cosine_lr(2.0, s, 11, 0.0)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn neighbor_windows() {
    assert_eq!(neighbor_frames(10, 0, 60), vec![10]);
    assert_eq!(neighbor_frames(10, 2, 60), vec![8, 9, 10, 11, 12]);
    assert_eq!(neighbor_frames(1, 5, 60), (0..=6).collect::<Vec<_>>());
    assert_eq!(neighbor_frames(58, 3, 60), vec![55, 56, 57, 58, 59]);
    let brute: Vec<usize> = (0..60).filter(|&s| (s as i64 - 1).abs() <= 5).collect();
    assert_eq!(neighbor_frames(1, 5, 60), brute);
}

#[test]
fn refinement_sets() {
    assert_eq!(refinement_set(&[5], 0, 60).unwrap(), vec![5]);
    assert_eq!(refinement_set(&[5, 6], 1, 60).unwrap(), vec![4, 5, 6, 7]);
    assert_eq!(refinement_set(&[10], 2, 60).unwrap(), vec![8, 9, 10, 11, 12]);
    assert!(matches!(refinement_set(&[], 1, 60), Err(Error::Config(_))));
    assert!(refinement_set(&[60], 0, 60).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let frames = rng.gen_range(1..80);
        let n = rng.gen_range(0..10);
        let set: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..frames)).collect();
        let mut brute = BTreeSet::new();
        for s in 0..frames {
            if set.iter().any(|&t| (s as i64 - t as i64).unsigned_abs() as usize <= n) {
                brute.insert(s);
            }
        }
        assert_eq!(refinement_set(&set, n, frames).unwrap(), brute.into_iter().collect::<Vec<_>>());
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (p, _) = tiny_scene_params(1);
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_train_config()
    };
    let (q, log) = train(&p, &tiny_dataset(true), &cfg, |_| {}).unwrap();
    assert_eq!(p, q);
    assert!(log.is_empty());
}

#[test]
fn training_is_deterministic_and_worker_independent() {
    let (p, _) = tiny_scene_params(2);
    let data = tiny_dataset(true);
    let cfg = tiny_train_config();
    let (a, la) = train(&p, &data, &cfg, |_| {}).unwrap();
    let (b, lb) = train(&p, &data, &TrainConfig { workers: 3, ..cfg }, |_| {}).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(la, lb);
    assert_ne!(a.checksum(), p.checksum());
    assert_eq!(la.len(), 6);
    assert_eq!(la[5].epoch, 1);
}

#[test]
fn static_warmup_leaves_time_dependent_layers_alone() {
    let (p, _) = tiny_scene_params(3);
    let data = tiny_dataset(true);
    // 0.99 of six steps rounds to all six.
    let cfg = TrainConfig {
        static_warmup: 0.99,
        ..tiny_train_config()
    };
    let (q, _) = train(&p, &data, &cfg, |_| {}).unwrap();
    assert_ne!(q.partition_checksum(Layer::Static), p.partition_checksum(Layer::Static));
    assert_eq!(q.partition_checksum(Layer::SemiStatic), p.partition_checksum(Layer::SemiStatic));
    assert_eq!(q.partition_checksum(Layer::Dynamic), p.partition_checksum(Layer::Dynamic));

    let half = TrainConfig {
        static_warmup: 0.5,
        ..tiny_train_config()
    };
    let (r, _) = train(&p, &data, &half, |_| {}).unwrap();
    assert_ne!(r.partition_checksum(Layer::Dynamic), p.partition_checksum(Layer::Dynamic));
    let bad = TrainConfig {
        static_warmup: 1.0,
        ..tiny_train_config()
    };
    assert!(matches!(train(&p, &data, &bad, |_| {}), Err(Error::Config(_))));
}

#[test]
fn fusion_needs_pseudo_masks() {
    let (p, _) = tiny_scene_params(2);
    let e = train(&p, &tiny_dataset(false), &tiny_train_config(), |_| {});
    assert!(matches!(e, Err(Error::Config(_))));
    let rgb_only = TrainConfig {
        loss: LossConfig {
            toggles: LossToggles::RGB,
            ..tiny_train_config().loss
        },
        ..tiny_train_config()
    };
    assert!(train(&p, &tiny_dataset(false), &rgb_only, |_| {}).is_ok());
    let r = refine(&p, &tiny_dataset(false), &RefineConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn bad_learning_rate_is_rejected() {
    let (p, _) = tiny_scene_params(2);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..tiny_train_config()
    };
    assert!(matches!(train(&p, &tiny_dataset(true), &cfg, |_| {}), Err(Error::Config(_))));
}

fn tiny_refine(steps: usize) -> RefineConfig {
    RefineConfig {
        frames: vec![1],
        neighbors: 1,
        steps,
        learning_rate: 0.02,
        rays: 30,
        loss: LossConfig {
            render: RenderSettings {
                samples: 8,
                stratified: false,
                seed: 0,
            },
            ..LossConfig::default()
        },
        ..RefineConfig::default()
    }
}

#[test]
fn refine_freezes_static_partition() {
    let (p, _) = tiny_scene_params(4);
    let data = tiny_dataset(true);
    let zero = refine(&p, &data, &tiny_refine(0)).unwrap();
    assert_eq!(zero.params, p);

    let out = refine(&p, &data, &tiny_refine(8)).unwrap();
    assert_eq!(out.frames, vec![0, 1, 2]);
    assert_eq!(out.params.partition_checksum(Layer::Static), p.partition_checksum(Layer::Static));
    assert!(
        out.params.partition_checksum(Layer::SemiStatic) != p.partition_checksum(Layer::SemiStatic)
            || out.params.partition_checksum(Layer::Dynamic) != p.partition_checksum(Layer::Dynamic)
    );
    assert!(out.losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.losses);
    assert!(out.losses.last().unwrap() < &out.losses[0]);
}

#[test]
fn refine_guard_survives_huge_learning_rate() {
    let (p, _) = tiny_scene_params(5);
    let data = tiny_dataset(true);
    let cfg = RefineConfig {
        learning_rate: 50.0,
        ..tiny_refine(5)
    };
    let out = refine(&p, &data, &cfg).unwrap();
    assert!(out.losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.rejected_steps > 0);
}
