use std::collections::BTreeSet;

use ames_core::eval::{ap_at_k, average_precision, map_at_k, mean_average_precision, memory_per_image, pair_auc, ApMode, GroundTruth, MemorySpec};
use ames_core::record::{GlobalEncoding, LocalEncoding};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Walks the ranking once, accumulating precision at every relevant rank.
fn brute_standard(ranked: &[u64], pos: &BTreeSet<u64>) -> f64 {
    let mut hits = 0;
    let mut sum = 0.0;
    for (k, id) in ranked.iter().enumerate() {
        if pos.contains(id) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / pos.len() as f64
}

/// Trapezoids under the (recall, precision) curve, starting from (0, 1).
fn brute_trapezoid(ranked: &[u64], pos: &BTreeSet<u64>) -> f64 {
    let n = pos.len() as f64;
    let mut curve = vec![(0.0, 1.0)];
    let mut hits = 0.0;
    for (k, id) in ranked.iter().enumerate() {
        if pos.contains(id) {
            hits += 1.0;
        }
        curve.push((hits / n, hits / (k + 1) as f64));
    }
    curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<u64>, BTreeSet<u64>) {
    let n = rng.random_range(1..60u64);
    let mut ranked: Vec<u64> = (0..n).collect();
    ranked.shuffle(rng);
    let mut pos: BTreeSet<u64> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
    // some positives are absent from the ranking
    if rng.random_bool(0.2) {
        pos.insert(n + 5);
    }
    if pos.is_empty() {
        pos.insert(ranked[rng.random_range(0..ranked.len())]);
    }
    (ranked, pos)
}

#[test]
fn average_precision_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (ranked, pos) = random_case(&mut rng);
        let s = average_precision(&ranked, &pos, ApMode::Standard).unwrap();
        let t = average_precision(&ranked, &pos, ApMode::Trapezoid).unwrap();
        assert!((s - brute_standard(&ranked, &pos)).abs() < 1e-12);
        assert!((t - brute_trapezoid(&ranked, &pos)).abs() < 1e-12);
    }
}

#[test]
fn map_is_the_mean_over_queries_with_positives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: Vec<_> = (0..50).map(|_| random_case(&mut rng)).collect();
    let lists: Vec<Vec<u64>> = cases.iter().map(|c| c.0.clone()).collect();
    let mut gts: Vec<GroundTruth> = cases.iter().map(|c| GroundTruth::new(c.1.iter().copied())).collect();
    gts[7] = GroundTruth::default();
    for mode in [ApMode::Standard, ApMode::Trapezoid] {
        let got = mean_average_precision(&lists, &gts, mode).unwrap();
        let oracle = if mode == ApMode::Standard { brute_standard } else { brute_trapezoid };
        let want: f64 = (0..50).filter(|&i| i != 7).map(|i| oracle(&lists[i], &cases[i].1)).sum::<f64>() / 49.0;
        assert!((got.map - want).abs() < 1e-12);
        assert_eq!(got.skipped(), 1);
    }
}

#[test]
fn ap_at_k_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let (ranked, pos) = random_case(&mut rng);
        let k = rng.random_range(1..80);
        let top = &ranked[..k.min(ranked.len())];
        let mut hits = 0;
        let mut sum = 0.0;
        for (r, id) in top.iter().enumerate() {
            if pos.contains(id) {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
            }
        }
        let want = sum / pos.len().min(k) as f64;
        let gt = GroundTruth::new(pos.iter().copied());
        assert!((ap_at_k(&ranked, &gt, k).unwrap() - want).abs() < 1e-12);
        let m = map_at_k(std::slice::from_ref(&ranked), &[gt], k).unwrap();
        assert!((m.map - want).abs() < 1e-12);
    }
}

#[test]
fn junk_is_removed_before_scoring() {
    let gt = GroundTruth { positives: [3, 4].into(), junk: [9].into() };
    let with = ames_core::eval::average_precision_gt(&[9, 3, 1, 4], &gt, ApMode::Standard).unwrap();
    let without = average_precision(&[3, 1, 4], &gt.positives, ApMode::Standard).unwrap();
    assert_eq!(with, without);
}

#[test]
fn pair_auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        // coarse values so ties occur
        let pos: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..10) as f64).collect();
        let neg: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..10) as f64).collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let want = wins / (pos.len() * neg.len()) as f64;
        assert!((pair_auc(&pos, &neg).unwrap() - want).abs() < 1e-12);
    }
}

fn kb(global: GlobalEncoding, local: LocalEncoding, len_x: usize) -> f64 {
    memory_per_image(&MemorySpec { global, local, len_x, dim: 128, global_dim: 2048 }).unwrap()
}

#[test]
fn memory_table_rows() {
    for (len_x, want) in [(48, 1.0), (112, 2.0), (176, 3.0)] {
        assert_eq!(kb(GlobalEncoding::Pq(8), LocalEncoding::Bin, len_x), want);
    }
    for (len_x, want) in [(32, 1.0), (96, 2.0), (160, 3.0)] {
        assert_eq!(kb(GlobalEncoding::Pq(4), LocalEncoding::Bin, len_x), want);
    }
}

#[test]
fn memory_tradeoff_points() {
    let lens = [10, 20, 50, 100, 200, 400, 600];
    let want = [0.40625, 0.5625, 1.03125, 1.8125, 3.375, 6.5, 9.625];
    for (l, w) in lens.iter().zip(want) {
        assert_eq!(kb(GlobalEncoding::Pq(8), LocalEncoding::Bin, *l), w);
    }
    assert_eq!(kb(GlobalEncoding::Pq(8), LocalEncoding::Fp16, 10), 2.75);
}

#[test]
fn memory_is_linear_in_the_descriptor_count() {
    for (g, l) in [(GlobalEncoding::Pq(8), LocalEncoding::Bin), (GlobalEncoding::Fp16, LocalEncoding::Fp16), (GlobalEncoding::Pq(1), LocalEncoding::Bin)] {
        let base = kb(g, l, 0);
        let slope = kb(g, l, 1) - base;
        for len_x in [2, 17, 600] {
            assert_eq!(kb(g, l, len_x), base + slope * len_x as f64);
        }
    }
}
