mod common;

use polyformer::baselines::{nn_depth_spec, nn_width_spec, MlpSpec};
use polyformer::polynomials::BuiltinTarget;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 20 {
        let d = rng.random_range(1..=3);
        let q = rng.random_range(1..=3);
        let n = rng.random_range(1..=4);
        let m = common::random_model(&mut rng, d, q, n, 2.0);
        let xs = common::ball_points(&mut rng, 4, d, 2.0);
        let ys: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        if let Some(err) = common::attention_fd_error(&m, &xs, &ys, H) {
            assert!(err < TOL, "relative error {err} (d={d} q={q} n={n})");
            checked += 1;
        }
    }
}

#[test]
fn attention_gradients_with_off_diagonal_selections() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 5 {
        let m = common::random_model(&mut rng, 2, 2, 4, 0.5);
        let xs = common::ball_points(&mut rng, 3, 2, 6.0);
        let ys = vec![1.0, -1.0, 0.5];
        if let Some(err) = common::attention_fd_error(&m, &xs, &ys, H) {
            assert!(err < TOL, "relative error {err}");
            checked += 1;
        }
    }
}

fn check_mlp(spec: &MlpSpec, seed: u64, coords: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = common::generic_mlp_params(&mut rng, spec);
    let d = spec.input_dim();
    let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys = vec![0.5, -1.0, 2.0];
    let total: usize = spec.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let idx: Vec<usize> = if coords >= total {
        (0..total).collect()
    } else {
        (0..coords).map(|_| rng.random_range(0..total)).collect()
    };
    let err = common::mlp_fd_error(spec, &p, &xs, &ys, H, Some(&idx));
    assert!(err < TOL, "{:?}: relative error {err}", spec.widths());
}

#[test]
fn mlp_gradients_small_shapes() {
    for (i, widths) in [vec![2, 4, 1], vec![3, 5, 2, 1], vec![1, 1]].into_iter().enumerate() {
        check_mlp(&MlpSpec::new(widths).unwrap(), i as u64, usize::MAX);
    }
}

#[test]
fn mlp_gradients_table_shapes() {
    for t in [BuiltinTarget::F1, BuiltinTarget::F2] {
        check_mlp(&nn_width_spec(t), 1, 400);
        check_mlp(&nn_depth_spec(t), 2, 400);
    }
}
