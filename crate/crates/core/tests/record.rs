use ames_core::codec::{BinaryCodec, Projection};
use ames_core::numerics::Matrix;
use ames_core::record::{slice_top, DescriptorRecord, RecordEncoder};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(binary: bool, rows: usize, seed: u64) -> DescriptorRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locals = Matrix::from_vec(rows, 8, (0..rows * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut strengths: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..2.0)).collect();
    strengths.sort_by(|a, b| b.total_cmp(a));
    let global: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Matrix::from_vec(8, 16, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let proj = Projection::Binary(BinaryCodec::new(w, 1e-3).unwrap());
    let enc = RecordEncoder { codebook: None, projection: if binary { Some(&proj) } else { None } };
    enc.encode(7, &global, &locals, &strengths).unwrap()
}

proptest! {
    #[test]
    fn prefixes_compose(binary: bool, rows in 1usize..20, a in 1usize..20, b in 1usize..20, seed: u64) {
        let r = record(binary, rows, seed);
        let (a, b) = (a.min(rows), b.min(rows));
        let (hi, lo) = (a.max(b), a.min(b));
        let outer = slice_top(&r, hi).unwrap();
        prop_assert_eq!(slice_top(&outer, lo).unwrap(), slice_top(&r, lo).unwrap());
        prop_assert_eq!(slice_top(&r, rows).unwrap(), r.clone());
        let top = slice_top(&r, lo).unwrap();
        prop_assert!(top.strengths.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(top.local_matrix(lo).unwrap(), r.local_matrix(hi).unwrap().slice_rows(0, lo));
        prop_assert!(slice_top(&r, 0).is_err());
        prop_assert!(slice_top(&r, rows + 1).is_err());
    }
}
