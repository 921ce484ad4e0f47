mod common;

use polyformer::baselines::{Mlp, MlpSpec};
use polyformer::network::{backward, hardmax, hardmax_index};
use polyformer::polynomials::{dim_homogeneous, nonconstant_indices};
use polyformer::ridge::{expansion_matrix, generate_basis, reconstruct, ridge_decompose};
use polyformer::training::Regressor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ridge_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_polynomial(&mut rng, 3, 4);
        let basis = generate_basis(p.dim(), p.degree(), seed).unwrap();
        let c = ridge_decompose(&p, &basis).unwrap();
        let back = reconstruct(&c, &basis).unwrap();
        prop_assert!(back.max_coef_diff(&p) < 1e-8 * (1.0 + p.max_abs_coef()));
    }

    #[test]
    fn rank_certificate_matches_elimination(d in 1usize..=4, q in 1usize..=4, seed in any::<u64>()) {
        let basis = generate_basis(d, q, seed).unwrap();
        let n_q = basis.len();
        let rows = expansion_matrix(&basis);
        let idx = nonconstant_indices(d, q);
        let ranks = basis.block_ranks();
        for s in 1..=q {
            let block: Vec<Vec<f64>> = rows
                .iter()
                .zip(&idx)
                .filter(|(_, m)| m.degree() == s)
                .map(|(r, _)| r[(s - 1) * n_q..s * n_q].to_vec())
                .collect();
            let want = dim_homogeneous(d, s).unwrap() as usize;
            prop_assert_eq!(ranks[s - 1], want);
            prop_assert_eq!(common::gaussian_rank(block, 1e-10), want);
        }
    }

    /// Idempotence needs a non-negative maximum: hardmax(-1, -3) = (-1, 0),
    /// whose hardmax is (0, 0). Shifting by the negative part of the maximum
    /// keeps every other entry's order.
    #[test]
    fn hardmax_is_idempotent(raw in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v: Vec<f64> = raw.iter().map(|x| x - top.min(0.0)).collect();
        let once = hardmax(&v);
        prop_assert_eq!(hardmax(&once), once.clone());
        prop_assert_eq!(once.iter().filter(|&&x| x != 0.0).count() <= 1, true);
        let j = hardmax_index(&v);
        prop_assert!(v.iter().all(|&x| x <= v[j]));
        prop_assert!(v[..j].iter().all(|&x| x < v[j]));
    }
}

#[test]
fn hardmax_with_negative_maximum_is_not_idempotent() {
    let once = hardmax(&[-1.0, -3.0]);
    assert_eq!(once, vec![-1.0, 0.0]);
    assert_eq!(hardmax(&once), vec![0.0, 0.0]);
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = common::random_model(&mut rng, 3, 3, 10, 2.0);
    let xs = common::ball_points(&mut rng, 333, 3, 2.0);
    let ys: Vec<f64> = (0..333).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| backward(&m, &xs, &ys).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
}

/// Signs of every hidden pre-activation.
fn activation_pattern(mlp: &Mlp, x: &[f64]) -> Vec<bool> {
    let w = mlp.spec.widths();
    let mut act = x.to_vec();
    let mut pattern = Vec::new();
    for l in 0..w.len() - 2 {
        act = (0..w[l + 1])
            .map(|o| {
                let row = &mlp.params.weights[l][o * w[l]..(o + 1) * w[l]];
                let z = row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>() + mlp.params.biases[l][o];
                pattern.push(z > 0.0);
                z.max(0.0)
            })
            .collect();
    }
    pattern
}

#[test]
fn mlp_output_is_piecewise_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mlp = Mlp::new(MlpSpec::new(vec![2, 10, 10, 1]).unwrap(), 7);
    let mut checked = 0;
    while checked < 20 {
        let a = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let h = 0.05;
        let point = |t: f64| [a[0] + t * dir[0], a[1] + t * dir[1]];
        let pts = [point(0.0), point(h), point(2.0 * h)];
        let pattern = activation_pattern(&mlp, &pts[0]);
        // the segment must stay inside one linear region
        if (1..=20).any(|i| activation_pattern(&mlp, &point(2.0 * h * i as f64 / 20.0)) != pattern) {
            continue;
        }
        let y: Vec<f64> = pts.iter().map(|p| mlp.predict(p).unwrap()).collect();
        let second = y[2] - 2.0 * y[1] + y[0];
        assert!(second.abs() < 1e-9, "second difference {second}");
        checked += 1;
    }
}
