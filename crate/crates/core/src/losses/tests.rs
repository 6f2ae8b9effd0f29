use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fields::{CodeMode, FieldConfig};
use crate::testutil::{tiny_cameras, tiny_scene_params};

fn cfg(toggles: LossToggles) -> LossConfig {
    LossConfig {
        toggles,
        render: RenderSettings {
            samples: 8,
            stratified: false,
            seed: 0,
        },
        ..Default::default()
    }
}

fn random_batch(n: usize, seed: u64) -> Vec<RayTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RayTarget {
            frame: rng.gen_range(0..3),
            pixel: (rng.gen_range(0..6) as f64, rng.gen_range(0..5) as f64),
            color: [rng.gen(), rng.gen(), rng.gen()],
            mask: Some(if rng.gen_bool(0.5) { rng.gen_range(0.5..1.0) } else { rng.gen_range(0.0..0.5) }),
        })
        .collect()
}

fn with_mode(p: &LayeredFieldParams, mode: CodeMode, seed: u64) -> LayeredFieldParams {
    let c = FieldConfig {
        code_mode: mode,
        ..p.config().clone()
    };
    let mut q = LayeredFieldParams::zeros(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in q.values_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    q
}

#[test]
fn hand_values() {
    assert_eq!(rgb_loss(&[[0.3; 3]], &[[0.3; 3]], &[1.0]).unwrap(), 0.0);
    let l = rgb_loss(&[[1.0, 1.0, 0.0]], &[[0.0, 0.0, 0.0]], &[1.0]).unwrap();
    assert!((l - 1.0).abs() < 1e-15);
    assert!(matches!(rgb_loss(&[[0.0; 3]], &[[0.0; 3]], &[0.0]), Err(Error::Domain(_))));

    assert_eq!(pmf_loss(&[0.2, 0.7], &[0.2, 0.7], 1.1).unwrap(), 0.0);
    let l = pmf_loss(&[0.0; 10], &[1.0; 10], DEFAULT_LAMBDA_PMF).unwrap();
    assert!((l - 1.1).abs() < 1e-15);

    assert_eq!(nmf_loss(&[0.0, 0.4], &[true, false], 1.0).unwrap(), 0.0);
    assert_eq!(nmf_loss(&[0.3, 0.4], &[false, false], 1.0).unwrap(), 0.0);
    let l = nmf_loss(&[0.5, 0.5, 0.9], &[true, true, false], DEFAULT_LAMBDA_NMF).unwrap();
    assert!((l - 0.25).abs() < 1e-15);
}

#[test]
fn batch_losses_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 37;
    let pred: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let target: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
    let mut naive = 0.0;
    for i in 0..n {
        let mut r2 = 0.0;
        for ch in 0..3 {
            r2 += (pred[i][ch] - target[i][ch]).powi(2);
        }
        naive += r2 / (2.0 * b[i] * b[i]) + (b[i] * b[i]).ln();
    }
    assert!((rgb_loss(&pred, &target, &b).unwrap() - naive / n as f64).abs() < 1e-12);

    let m: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let mh: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let mut naive = 0.0;
    for i in 0..n {
        naive += (mh[i] - m[i]).powi(2);
    }
    assert!((pmf_loss(&mh, &m, 1.1).unwrap() - 1.1 * naive / n as f64).abs() < 1e-12);
}

/// The per-pixel robust term is minimised where `B² = ‖Î − I‖² / 2`
/// (setting the derivative `-r²/B³ + 2/B` to zero).
#[test]
fn uncertainty_stationary_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let pred: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let target: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let r2: f64 = (0..3).map(|c| (pred[c] - target[c]).powi(2)).sum();
        if r2 < 1e-4 {
            continue;
        }
        // Golden-section search on B.
        let f = |b: f64| rgb_term(&pred, &target, b);
        let (mut lo, mut hi) = (1e-4, 10.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let b = 0.5 * (lo + hi);
        assert!((b * b - r2 / 2.0).abs() < 1e-6 * r2.max(1.0), "{} vs {}", b * b, r2 / 2.0);
    }
}

#[test]
fn zero_density_pmf_with_empty_masks_has_zero_gradient() {
    let (mut p, _) = tiny_scene_params(1);
    p.values_mut().iter_mut().for_each(|v| *v = 0.0);
    for id in [BlockId::StaticGrid, BlockId::SemiBias, BlockId::DynBias] {
        let range = p.layout().range(id);
        let block = &mut p.values_mut()[range];
        for cell in block.chunks_mut(5) {
            cell[0] = -1e3;
        }
    }
    let mut batch = random_batch(10, 2);
    batch.iter_mut().for_each(|r| r.mask = Some(0.0));
    let (rep, g) =
        total_loss_and_gradients(&p, &tiny_cameras(), &batch, &cfg(LossToggles { rgb: false, pmf: true, nmf: false }), Trainable::ALL, 1)
            .unwrap();
    assert_eq!(rep.l_total, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic gradients against central differences on a sample of
/// coordinates from every block. Returns the worst relative error.
pub(crate) fn fd_check(p: &LayeredFieldParams, batch: &[RayTarget], c: &LossConfig, per_block: usize, seed: u64) -> f64 {
    let cams = tiny_cameras();
    let (_, g) = total_loss_and_gradients(p, &cams, batch, c, Trainable::ALL, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for id in BlockId::ALL {
        let range = p.layout().range(id);
        // Largest-gradient coordinates plus random ones.
        let mut idx: Vec<usize> = range.clone().collect();
        idx.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
        let mut chosen: Vec<usize> = idx.iter().take(per_block / 2).copied().collect();
        for _ in 0..per_block / 2 {
            chosen.push(rng.gen_range(range.clone()));
        }
        for i in chosen {
            let mut q = p.clone();
            q.values_mut()[i] += h;
            let up = total_loss(&q, &cams, batch, c, 1).unwrap().l_total;
            q.values_mut()[i] -= 2.0 * h;
            let down = total_loss(&q, &cams, batch, c, 1).unwrap().l_total;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(g[i], numeric);
            assert!(e < 1e-4, "{} [{}]: analytic {} numeric {}", id.name(), i - range.start, g[i], numeric);
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let (p, _) = tiny_scene_params(11);
    let batch = random_batch(12, 3);
    for toggles in [
        LossToggles::RGB,
        LossToggles { rgb: false, pmf: true, nmf: false },
        LossToggles { rgb: false, pmf: false, nmf: true },
        LossToggles::ALL,
    ] {
        fd_check(&p, &batch, &cfg(toggles), 12, 1);
    }
    let q = with_mode(&p, CodeMode::LearnedBasis, 12);
    fd_check(&q, &batch, &cfg(LossToggles::ALL), 12, 2);
}

#[test]
fn single_ray_two_samples_every_coordinate() {
    let (p, _) = tiny_scene_params(21);
    let batch = random_batch(1, 9);
    let mut c = cfg(LossToggles::ALL);
    c.render.samples = 2;
    let (_, g) = total_loss_and_gradients(&p, &tiny_cameras(), &batch, &c, Trainable::ALL, 1).unwrap();
    let nonzero: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
    assert!(!nonzero.is_empty());
    let cams = tiny_cameras();
    for i in nonzero {
        let mut q = p.clone();
        q.values_mut()[i] += 1e-5;
        let up = total_loss(&q, &cams, &batch, &c, 1).unwrap().l_total;
        q.values_mut()[i] -= 2e-5;
        let down = total_loss(&q, &cams, &batch, &c, 1).unwrap().l_total;
        assert!(relative_error(g[i], (up - down) / 2e-5) < 1e-4);
    }
}

#[test]
fn pmf_ignores_colour_parameters() {
    let (p, _) = tiny_scene_params(5);
    let batch = random_batch(16, 6);
    let c = cfg(LossToggles { rgb: false, pmf: true, nmf: true });
    let (_, g) = total_loss_and_gradients(&p, &tiny_cameras(), &batch, &c, Trainable::ALL, 1).unwrap();
    let grid = &g[p.layout().range(BlockId::StaticGrid)];
    for cell in grid.chunks(5) {
        assert_eq!(&cell[1..4], &[0.0; 3]);
        assert_eq!(cell[4], 0.0);
    }
    assert!(g[p.layout().range(BlockId::StaticView)].iter().all(|&v| v == 0.0));
    let f = p.config().shared_features;
    let head = &g[p.layout().range(BlockId::StaticHead)];
    assert!(head[f..4 * f].iter().all(|&v| v == 0.0));
    assert!(grid.chunks(5).any(|cell| cell[0] != 0.0));
}

#[test]
fn duplicated_batch_keeps_mean_loss_and_gradient() {
    let (p, _) = tiny_scene_params(6);
    let batch = random_batch(9, 7);
    let doubled: Vec<RayTarget> = batch.iter().chain(batch.iter()).copied().collect();
    let c = cfg(LossToggles::ALL);
    let cams = tiny_cameras();
    let (a, ga) = total_loss_and_gradients(&p, &cams, &batch, &c, Trainable::ALL, 1).unwrap();
    let (b, gb) = total_loss_and_gradients(&p, &cams, &doubled, &c, Trainable::ALL, 1).unwrap();
    assert!((a.l_total - b.l_total).abs() < 1e-12);
    for (x, y) in ga.iter().zip(&gb) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn small_nmf_step_does_not_increase_nmf() {
    let (mut p, _) = tiny_scene_params(8);
    let batch = random_batch(16, 8);
    let c = cfg(LossToggles { rgb: false, pmf: false, nmf: true });
    let cams = tiny_cameras();
    let (before, g) = total_loss_and_gradients(&p, &cams, &batch, &c, Trainable::ALL, 1).unwrap();
    assert!(before.l_nmf > 0.0);
    for (v, d) in p.values_mut().iter_mut().zip(&g) {
        *v -= 1e-4 * d;
    }
    let after = total_loss(&p, &cams, &batch, &c, 1).unwrap();
    assert!(after.l_nmf <= before.l_nmf);
}

#[test]
fn frozen_partitions_get_no_gradient_and_workers_do_not_matter() {
    let (p, _) = tiny_scene_params(9);
    let batch = random_batch(40, 10);
    let mut c = cfg(LossToggles::ALL);
    c.render.stratified = true;
    let cams = tiny_cameras();
    let (r1, g1) = total_loss_and_gradients(&p, &cams, &batch, &c, Trainable::TIME_DEPENDENT, 1).unwrap();
    let (r3, g3) = total_loss_and_gradients(&p, &cams, &batch, &c, Trainable::TIME_DEPENDENT, 3).unwrap();
    assert_eq!(r1, r3);
    assert_eq!(g1, g3);
    for id in BlockId::ALL.into_iter().filter(|b| b.layer() == Layer::Static) {
        assert!(g1[p.layout().range(id)].iter().all(|&v| v == 0.0));
    }
    assert_eq!(r1.grad_norms[0], 0.0);
    assert!(r1.grad_norms[1] > 0.0 && r1.grad_norms[2] > 0.0);
}

#[test]
fn report_totals_and_counts() {
    let (p, _) = tiny_scene_params(10);
    let batch = random_batch(20, 11);
    let (r, _) = total_loss_and_gradients(&p, &tiny_cameras(), &batch, &cfg(LossToggles::ALL), Trainable::ALL, 1).unwrap();
    assert!((r.l_total - (r.l_rgb + r.l_pmf + r.l_nmf)).abs() < 1e-12);
    assert_eq!(r.pixels, 20);
    assert_eq!(r.dynamic_pixels, batch.iter().filter(|t| t.mask.unwrap() >= 0.5).count());
    assert!(r.l_pmf >= 0.0 && r.l_nmf >= 0.0);
}

#[test]
fn fusion_without_masks_is_a_config_error() {
    let (p, _) = tiny_scene_params(10);
    let mut batch = random_batch(4, 1);
    batch[2].mask = None;
    let e = total_loss_and_gradients(&p, &tiny_cameras(), &batch, &cfg(LossToggles::ALL), Trainable::ALL, 1);
    assert!(matches!(e, Err(Error::Config(_))));
    assert!(total_loss_and_gradients(&p, &tiny_cameras(), &batch, &cfg(LossToggles::RGB), Trainable::ALL, 1).is_ok());
}

#[test]
fn toggles_parse() {
    assert_eq!(LossToggles::parse("rgb,pmf,nmf").unwrap(), LossToggles::ALL);
    assert_eq!(LossToggles::parse("rgb").unwrap(), LossToggles::RGB);
    assert!(LossToggles::parse("rgb,foo").is_err());
    assert!(LossToggles::parse("").is_err());
}
