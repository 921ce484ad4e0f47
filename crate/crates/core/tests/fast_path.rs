mod common;

use polyformer::network::{forward_fast_trace, forward_trace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random model and input; inputs may leave the ball (off-diagonal
/// selections), and duplicated embedding rows or a zero input force ties.
fn check_case(d: usize, q: usize, n: usize, bound: f64, radius: f64, tie: u8, seed: u64) -> (bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = common::random_model(&mut rng, d, q, n, bound);
    if tie == 1 && n > 1 {
        let row = m.embedding_row(0).to_vec();
        m.embedding[d..2 * d].copy_from_slice(&row);
    }
    let x = if tie == 2 {
        vec![0.0; d]
    } else {
        common::ball_points(&mut rng, 1, d, radius).remove(0)
    };
    let reference = forward_trace(&m, &x).unwrap();
    let fast = forward_fast_trace(&m, &x).unwrap();
    let same_sel = reference.selections == fast.selections;
    let close = (reference.output - fast.output).abs() <= 1e-12;
    assert!(same_sel, "selections differ: {:?} vs {:?}", reference.selections, fast.selections);
    assert!(close, "outputs differ: {} vs {}", reference.output, fast.output);
    let off_diag = reference
        .selections
        .iter()
        .any(|s| s.iter().enumerate().any(|(i, &j)| i != j));
    (true, off_diag)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fast_matches_reference(
        d in 1usize..=3,
        q in 1usize..=4,
        n in 1usize..=6,
        bound in 0.5f64..3.0,
        reach in 0.0f64..4.0,
        tie in 0u8..4,
        seed in any::<u64>(),
    ) {
        check_case(d, q, n, bound, reach * bound, tie, seed);
    }
}

#[test]
fn fallback_scan_is_exercised() {
    let mut off = 0;
    for seed in 0..300 {
        let (_, o) = check_case(2, 3, 5, 0.5, 20.0, 0, seed);
        off += o as usize;
    }
    assert!(off > 0, "no off-diagonal selection was produced");
}
