use ames_core::codec::{FpProjection, Projection};
use ames_core::model::{ames_forward, build_masks, forward_padded, AmesParams, BlockParams, ModelConfig};
use ames_core::numerics::{erf, masked_attention, AttentionMask, AttentionWeights, Linear, Matrix};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Dense = Vec<Vec<f64>>;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Initialised model with every tensor (norms included) perturbed.
fn model(dim: usize, depth: usize, heads: usize, seed: u64) -> AmesParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Projection::Fp(FpProjection::init(dim, dim, &mut rng));
    let mut p = AmesParams::init(ModelConfig::new(dim, dim, depth, heads), proj, &mut rng).unwrap();
    p.visit_mut(&mut |_, t| {
        for v in t.iter_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    });
    p
}

fn dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn linear(x: &Dense, l: &Linear) -> Dense {
    x.iter().map(|row| (0..l.weight.cols()).map(|o| l.bias[o] + row.iter().enumerate().map(|(i, v)| v * l.weight[(i, o)]).sum::<f64>()).collect()).collect()
}

fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn norm(x: &Dense, gain: &[f64], bias: &[f64]) -> Dense {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j]).collect()
        })
        .collect()
}

/// Full softmax over every column with the mask applied as an additive bias.
fn attention(x: &Dense, allowed: &dyn Fn(usize, usize) -> bool, w: &AttentionWeights, heads: usize) -> Dense {
    let (q, k, v) = (linear(x, &w.query), linear(x, &w.key), linear(x, &w.value));
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt();
                    s + if allowed(i, j) { 0.0 } else { -1e9 }
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(&ctx, &w.output)
}

/// 0 for X, 1 for Q, 2 for the matching token.
fn segment(i: usize, lx: usize, lq: usize) -> u8 {
    if i < lx {
        0
    } else if i < lx + lq {
        1
    } else {
        2
    }
}

fn mask_by_definition(i: usize, j: usize, lx: usize, lq: usize, same: bool) -> bool {
    let (a, b) = (segment(i, lx, lq), segment(j, lx, lq));
    i == j || a == 2 || b == 2 || (a == b) == same
}

fn block(z: &Dense, p: &BlockParams, heads: usize, lx: usize, lq: usize) -> Dense {
    let s = attention(&norm(z, &p.self_norm.gain, &p.self_norm.bias), &|i, j| mask_by_definition(i, j, lx, lq, true), &p.self_attn, heads);
    let z = add(z, &s);
    let c = attention(&norm(&z, &p.cross_norm.gain, &p.cross_norm.bias), &|i, j| mask_by_definition(i, j, lx, lq, false), &p.cross_attn, heads);
    let z = add(&z, &c);
    let mut h = linear(&norm(&z, &p.ffn_norm.gain, &p.ffn_norm.bias), &p.ffn.up);
    for v in h.iter_mut().flatten() {
        *v = 0.5 * *v * (1.0 + erf(*v / std::f64::consts::SQRT_2));
    }
    add(&z, &linear(&h, &p.ffn.down))
}

fn oracle_logit(x: &Matrix, q: &Matrix, p: &AmesParams) -> f64 {
    let mut z = dense(x);
    z.extend(dense(q));
    z.push(p.matching_token.clone());
    for b in &p.blocks {
        z = block(&z, b, p.heads(), x.rows(), q.rows());
    }
    z.last().unwrap().iter().zip(&p.classifier).map(|(a, b)| a * b).sum()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

#[test]
fn forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, &(dim, depth, heads, lx, lq)) in [(8, 2, 2, 3, 3), (8, 1, 1, 1, 1), (12, 3, 3, 5, 2), (16, 2, 4, 1, 7)].iter().enumerate() {
        let p = model(dim, depth, heads, k as u64);
        let x = random_matrix(lx, dim, &mut rng);
        let q = random_matrix(lq, dim, &mut rng);
        let got = ames_forward(&x, &q, &p).unwrap().logit;
        let want = oracle_logit(&x, &q, &p);
        assert!(close(got, want, 1e-10), "{dim}/{depth}/{heads}: {got} vs {want}");
    }
}

#[test]
fn masked_attention_matches_naive_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = model(8, 1, 2, 3);
    for n in [1, 2, 5, 9] {
        let allowed: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j || rng.random_bool(0.5)).collect()).collect();
        let mask = AttentionMask::from_fn(n, |i, j| allowed[i][j]);
        let x = random_matrix(n, 8, &mut rng);
        let got = masked_attention(&x, &mask, &p.blocks[0].self_attn, 2).unwrap();
        let want = attention(&dense(&x), &|i, j| allowed[i][j], &p.blocks[0].self_attn, 2);
        for (i, row) in want.iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn masks_match_their_definition_for_every_small_size() {
    for k in 3..=17 {
        for lx in 1..k - 1 {
            let lq = k - 1 - lx;
            let m = build_masks(lx, lq).unwrap();
            assert_eq!(m.size(), k);
            for i in 0..k {
                for j in 0..k {
                    assert_eq!(m.self_mask.get(i, j), mask_by_definition(i, j, lx, lq, true), "self {lx},{lq} ({i},{j})");
                    assert_eq!(m.cross_mask.get(i, j), mask_by_definition(i, j, lx, lq, false), "cross {lx},{lq} ({i},{j})");
                    // the two masks agree only on the diagonal and the matching token
                    let shared = i == j || i == k - 1 || j == k - 1;
                    assert_eq!(m.self_mask.get(i, j) && m.cross_mask.get(i, j), shared);
                    assert_eq!(m.self_mask.get(i, j), m.self_mask.get(j, i));
                }
            }
        }
    }
}

#[test]
fn logit_is_invariant_to_descriptor_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = model(8, 2, 2, 5);
    let x = random_matrix(6, 8, &mut rng);
    let q = random_matrix(5, 8, &mut rng);
    let base = ames_forward(&x, &q, &p).unwrap().logit;
    let mut px: Vec<usize> = (0..6).collect();
    let mut pq: Vec<usize> = (0..5).collect();
    for _ in 0..100 {
        px.shuffle(&mut rng);
        pq.shuffle(&mut rng);
        let l = ames_forward(&permute_rows(&x, &px), &permute_rows(&q, &pq), &p).unwrap().logit;
        assert!(close(l, base, 1e-6), "{l} vs {base}");
    }
}

#[test]
fn similarity_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = model(8, 2, 2, 7);
    for (lx, lq) in [(1, 1), (3, 7), (10, 2)] {
        let x = random_matrix(lx, 8, &mut rng);
        let q = random_matrix(lq, 8, &mut rng);
        let a = ames_forward(&x, &q, &p).unwrap().logit;
        let b = ames_forward(&q, &x, &p).unwrap().logit;
        assert!(close(a, b, 1e-6), "{a} vs {b}");
    }
}

#[test]
fn padded_forward_agrees_over_a_length_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = model(8, 2, 2, 9);
    for lx in [1, 5, 50] {
        for lq in [1, 5, 50] {
            let x = random_matrix(lx, 8, &mut rng);
            let q = random_matrix(lq, 8, &mut rng);
            let exact = ames_forward(&x, &q, &p).unwrap();
            let padded = forward_padded(&x, &q, 50, 50, &p).unwrap();
            assert!(close(padded.logit, exact.logit, 1e-5), "{lx},{lq}");
            for j in 0..lx {
                assert!(close(padded.importances[j], exact.importances[j], 1e-5));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permuted_and_swapped_inputs_score_alike(lx in 1usize..8, lq in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = model(8, 1, 2, seed);
        let x = random_matrix(lx, 8, &mut rng);
        let q = random_matrix(lq, 8, &mut rng);
        let base = ames_forward(&x, &q, &p).unwrap().logit;
        let mut px: Vec<usize> = (0..lx).collect();
        px.shuffle(&mut rng);
        let permuted = ames_forward(&permute_rows(&x, &px), &q, &p).unwrap().logit;
        prop_assert!(close(permuted, base, 1e-9));
        let swapped = ames_forward(&q, &x, &p).unwrap().logit;
        prop_assert!(close(swapped, base, 1e-9));
    }

    #[test]
    fn padding_never_changes_the_logit(lx in 1usize..6, lq in 1usize..6, extra_x in 0usize..4, extra_q in 0usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = model(8, 2, 2, seed);
        let x = random_matrix(lx, 8, &mut rng);
        let q = random_matrix(lq, 8, &mut rng);
        let exact = ames_forward(&x, &q, &p).unwrap().logit;
        let padded = forward_padded(&x, &q, lx + extra_x, lq + extra_q, &p).unwrap().logit;
        prop_assert!(close(padded, exact, 1e-9));
    }
}
