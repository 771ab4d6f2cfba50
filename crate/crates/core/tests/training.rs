use ames_core::exec::Serial;
use ames_core::model::ModelConfig;
use ames_core::numerics::{l2_normalize, Matrix};
use ames_core::synth::{generate_dataset, Split, SynthConfig};
use ames_core::training::sampling::NEIGHBORS;
use ames_core::training::{
    batch_loss, cube_weights, fit, init_params, sample_lengths, CodecKind, DistillMode, DistillationSetup, PairSpec, TrainConfig, TrainImage, TrainSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn length_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let mut counts = [[0usize; 20]; 2];
    for _ in 0..n {
        let (x, q) = sample_lengths(10, 29, &mut rng);
        counts[0][x - 10] += 1;
        counts[1][q - 10] += 1;
    }
    let expected = n as f64 / 20.0;
    for c in counts {
        let chi2: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // upper 0.001 quantile of chi-square with 19 degrees of freedom
        assert!(chi2 < 43.82, "chi2 {chi2}");
    }
}

#[test]
fn length_draws_are_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws: Vec<(f64, f64)> = (0..100_000).map(|_| sample_lengths(10, 400, &mut rng)).map(|(a, b)| (a as f64, b as f64)).collect();
    let n = draws.len() as f64;
    let (mx, mq) = (draws.iter().map(|d| d.0).sum::<f64>() / n, draws.iter().map(|d| d.1).sum::<f64>() / n);
    let cov: f64 = draws.iter().map(|d| (d.0 - mx) * (d.1 - mq)).sum::<f64>();
    let vx: f64 = draws.iter().map(|d| (d.0 - mx).powi(2)).sum::<f64>();
    let vq: f64 = draws.iter().map(|d| (d.1 - mq).powi(2)).sum::<f64>();
    let rho = cov / (vx * vq).sqrt();
    assert!(rho.abs() < 0.02, "rho {rho}");
    let mut fixed = ChaCha8Rng::seed_from_u64(2);
    assert!((0..100).all(|_| sample_lengths(10, 10, &mut fixed) == (10, 10)));
}

fn image(id: u64, class: Option<u32>, global: &[f64]) -> TrainImage {
    let mut g = global.to_vec();
    l2_normalize(&mut g);
    TrainImage { id, class, locals: Matrix::zeros(3, 2), global: g }
}

#[test]
fn negatives_follow_cubed_similarity() {
    // anchor 0 and positive 1; negatives 2..5 at known similarities to the anchor
    let sims = [0.9, 0.6, 0.3, -0.2];
    let mut imgs = vec![image(0, Some(0), &[1.0, 0.0]), image(1, Some(0), &[0.0, 1.0])];
    for (k, s) in sims.iter().enumerate() {
        let c: f64 = *s;
        imgs.push(image(2 + k as u64, Some(1 + k as u32 / 2), &[c, (1.0 - c * c).sqrt()]));
    }
    let set = TrainSet::new(imgs, NEIGHBORS).unwrap();
    let weights = cube_weights(&sims);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 60_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let (p, neg) = set.sample_triplet(0, &mut rng).unwrap();
        assert_eq!(p, 1);
        counts[neg - 2] += 1;
    }
    assert_eq!(counts[3], 0);
    let chi2: f64 = (0..3).map(|k| (counts[k] as f64 - n as f64 * weights[k]).powi(2) / (n as f64 * weights[k])).sum();
    // upper 0.001 quantile with 2 degrees of freedom
    assert!(chi2 < 13.82, "chi2 {chi2} counts {counts:?}");
}

fn small_set(seed: u64) -> TrainSet {
    let ds = generate_dataset(&SynthConfig { classes: 4, images_per_class: 4, distractors: 8, dim: 16, l_max: 12, seed, ..Default::default() }).unwrap();
    let images = ds.split(Split::Train).map(|im| TrainImage { id: im.id, class: im.class, locals: im.locals.clone(), global: im.global.clone() }).collect();
    TrainSet::new(images, NEIGHBORS).unwrap()
}

fn config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { batch_triplets: 4, lr0: 1e-3, length_range: (2, 8), max_steps: Some(steps), seed, ..Default::default() }
}

#[test]
fn one_epoch_on_a_toy_set_is_finite() {
    let imgs = vec![
        TrainImage { id: 0, class: Some(0), locals: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), global: vec![1.0, 0.0] },
        TrainImage { id: 1, class: Some(0), locals: Matrix::from_rows(&[&[0.9, 0.1], &[0.1, 0.9]]).unwrap(), global: vec![0.8, 0.6] },
        TrainImage { id: 2, class: Some(1), locals: Matrix::from_rows(&[&[-1.0, 0.0], &[0.5, 0.5]]).unwrap(), global: vec![0.6, 0.8] },
        TrainImage { id: 3, class: Some(1), locals: Matrix::from_rows(&[&[-0.9, 0.2], &[0.4, 0.6]]).unwrap(), global: vec![0.0, 1.0] },
    ];
    let set = TrainSet::new(imgs, NEIGHBORS).unwrap();
    let init = init_params(ModelConfig::new(2, 4, 1, 2), CodecKind::Fp, &set, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_triplets: 2, length_range: (1, 2), ..Default::default() };
    let out = fit(&set, init, &cfg, None, &Serial).unwrap();
    assert_eq!(out.log.len(), 2);
    assert!(out.log.iter().all(|r| r.loss_bce.is_finite() && r.epoch == 0));
    assert!(out.params.is_finite());
}

#[test]
fn fit_is_reproducible_per_seed() {
    let set = small_set(1);
    let init = init_params(ModelConfig::new(16, 8, 1, 2), CodecKind::binary(), &set, 4).unwrap();
    let a = fit(&set, init.clone(), &config(6, 7), None, &Serial).unwrap();
    let b = fit(&set, init.clone(), &config(6, 7), None, &Serial).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    let c = fit(&set, init, &config(6, 8), None, &Serial).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn zero_beta_distillation_is_plain_training() {
    let set = small_set(2);
    let model = ModelConfig::new(16, 8, 1, 2);
    let teacher = init_params(model, CodecKind::Fp, &set, 1).unwrap();
    let student = init_params(model, CodecKind::binary(), &set, 2).unwrap();
    let setup = DistillationSetup::new(teacher, DistillMode::Tokens).unwrap();
    let cfg = TrainConfig { beta: 0.0, ..config(5, 3) };
    let plain = fit(&set, student.clone(), &cfg, None, &Serial).unwrap();
    let guided = fit(&set, student, &cfg, Some(&setup), &Serial).unwrap();
    assert_eq!(plain.log, guided.log);
    assert_eq!(plain.params, guided.params);
}

#[test]
fn teacher_is_left_untouched() {
    let set = small_set(3);
    let model = ModelConfig::new(16, 8, 1, 2);
    let teacher = init_params(model, CodecKind::Fp, &set, 1).unwrap();
    let before = teacher.to_flat();
    let setup = DistillationSetup::new(teacher, DistillMode::Tokens).unwrap();
    let student = init_params(model, CodecKind::binary(), &set, 2).unwrap();
    let out = fit(&set, student, &config(4, 5), Some(&setup), &Serial).unwrap();
    assert!(out.log.iter().all(|r| r.loss_dis > 0.0));
    let after = setup.teacher.to_flat();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn self_teacher_distillation_loss_is_zero() {
    let set = small_set(4);
    let p = init_params(ModelConfig::new(16, 8, 2, 2), CodecKind::Fp, &set, 6).unwrap();
    let setup = DistillationSetup::new(p.clone(), DistillMode::Tokens).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<PairSpec<'_>> = (0..6)
        .map(|k| {
            let (a, b) = (rng.random_range(0..set.len()), rng.random_range(0..set.len()));
            let (lx, lq) = (rng.random_range(1..=12), rng.random_range(1..=12));
            PairSpec { x: &set.image(a).locals, q: &set.image(b).locals, len_x: lx, len_q: lq, teacher_len_x: lx, teacher_len_q: lq, label: (k % 2) as f64 }
        })
        .collect();
    let loss = batch_loss(&p, &pairs, Some(&setup), 10.0).unwrap();
    assert_eq!(loss.dis, 0.0);
    assert_eq!(loss.total, loss.bce);
}
