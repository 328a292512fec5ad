//! Standalone property suite: gradient and tangent checks against finite
//! differences, gram symmetry and positive-definiteness, rank-statistic
//! equivalence for the detection metric, and solver residuals.
//!
//! `cargo test -p predvar --test properties` runs the whole file in well
//! under five minutes.

use predvar::kernel_models::predict_lin;
use predvar::linalg::{dot, solve_spd, Matrix};
use predvar::metrics::{auroc, ScoreSet};
use predvar::nn::{self, Activation, MlpArchitecture, MlpParams, TrainConfig};
use predvar::ntk;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn gradients_match_finite_differences_across_architectures() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (d, h, depth, out) in [(3usize, 8usize, 2usize, 1usize), (5, 12, 3, 1), (4, 6, 2, 3)] {
        let arch = MlpArchitecture::mlp(d, h, depth, out, Activation::Softplus);
        let p = nn::init_params(&arch, rng.gen());
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for channel in 0..out {
            let g = nn::per_sample_grad(&p, &x, channel).unwrap();
            let flat = p.flatten();
            let eps = 1e-4;
            let step = flat.len() / 17 + 1;
            for idx in (0..flat.len()).step_by(step) {
                let eval = |sign: f64| {
                    let mut moved = flat.clone();
                    moved[idx] += sign * eps;
                    let (w, b) = p.unflatten(&moved).unwrap();
                    nn::forward_vec(&MlpParams { arch: arch.clone(), weights: w, biases: b, seed: 0 }, &x).unwrap()
                        [channel]
                };
                let fd = (eval(1.0) - eval(-1.0)) / (2.0 * eps);
                let rel = (fd - g[idx]).abs() / fd.abs().max(1e-6);
                assert!(rel <= 1e-4, "arch {d}-{h}x{depth}-{out} channel {channel} idx {idx}: rel {rel}");
            }
        }
    }
}

#[test]
fn tangents_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = MlpArchitecture::mlp(4, 10, 3, 2, Activation::Softplus);
    let p = nn::init_params(&arch, 7);
    let xs = random_matrix(&mut rng, 3, 4);
    let v: Vec<f64> = (0..p.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tangent = nn::jvp(&p, &xs, &v).unwrap();
    let flat = p.flatten();
    let eps = 1e-4;
    let eval = |sign: f64| {
        let moved: Vec<f64> = flat.iter().zip(&v).map(|(a, b)| a + sign * eps * b).collect();
        let (w, b) = p.unflatten(&moved).unwrap();
        nn::forward(&MlpParams { arch: arch.clone(), weights: w, biases: b, seed: 0 }, &xs).unwrap()
    };
    let (plus, minus) = (eval(1.0), eval(-1.0));
    for i in 0..3 {
        for k in 0..2 {
            let fd = (plus.get(i, k) - minus.get(i, k)) / (2.0 * eps);
            let rel = (fd - tangent.get(i, k)).abs() / fd.abs().max(1e-6);
            assert!(rel <= 1e-4, "point {i} channel {k}: rel {rel}");
        }
    }
}

#[test]
fn gram_symmetry_and_positive_definiteness() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..5 {
        let arch = MlpArchitecture::mlp(4, 24, 2, 1, if trial % 2 == 0 { Activation::Relu } else { Activation::Softplus });
        let p = nn::init_params(&arch, 100 + trial);
        let xs = random_matrix(&mut rng, 10, 4);
        let theta = ntk::empirical_ntk(&p, &xs, &xs).unwrap();
        // near-exact symmetry of the assembled gram
        for i in 0..10 {
            for j in 0..10 {
                let asym = (theta.get(i, j) - theta.get(j, i)).abs();
                assert!(asym <= 1e-10 * theta.get(i, i).abs().max(1.0), "asym {asym}");
            }
        }
        // PSD: smallest eigenvalue via deflated power iteration on c I - A
        let sym = theta.symmetrized();
        let c: f64 = sym.as_slice().iter().map(|v| v.abs()).sum();
        let shifted = Matrix::from_fn(10, 10, |i, j| if i == j { c - sym.get(i, j) } else { -sym.get(i, j) });
        let mut v: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..300 {
            let w = shifted.matvec(&v);
            let n = dot(&w, &w).sqrt();
            v = w.iter().map(|x| x / n).collect();
        }
        let lambda_min = c - dot(&v, &shifted.matvec(&v));
        assert!(lambda_min >= -1e-8, "trial {trial}: lambda_min {lambda_min}");
    }
}

#[test]
fn detection_metric_equals_pairwise_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n_in = rng.gen_range(1..40);
        let n_out = rng.gen_range(1..40);
        let ins: Vec<f64> = (0..n_in).map(|_| rng.gen_range(0..10) as f64).collect();
        let outs: Vec<f64> = (0..n_out).map(|_| rng.gen_range(0..10) as f64).collect();
        let fast = auroc(&ScoreSet {
            in_scores: ins.clone(),
            out_scores: outs.clone(),
            in_label: "i".into(),
            out_label: "o".into(),
        })
        .unwrap();
        let mut total = 0.0;
        for &o in &outs {
            for &i in &ins {
                total += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
            }
        }
        let slow = total / (ins.len() * outs.len()) as f64;
        assert!((fast - slow).abs() < 1e-12);
    }
}

#[test]
fn solver_residuals_stay_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [3usize, 8, 20, 50] {
        let m = random_matrix(&mut rng, n, n);
        let mut a = m.matmul_nt(&m);
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 0.5);
        }
        let a = a.symmetrized();
        let b = random_matrix(&mut rng, n, 3);
        let x = solve_spd(&a, &b, 0.0).unwrap();
        let r = a.matmul(&x).sub(&b).unwrap();
        let rel = r.frobenius_norm() / b.frobenius_norm();
        assert!(rel <= 1e-8, "n={n}: residual {rel}");
    }
}

#[test]
fn kernel_prediction_interpolates_after_jitter() {
    // end-to-end: empirical gram + solve reproduce the targets at train points
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = MlpArchitecture::mlp(6, 64, 2, 1, Activation::Softplus);
    let p = nn::init_params(&arch, 11);
    let xs = random_matrix(&mut rng, 12, 6);
    let y: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let bundle = &ntk::kernel_bundles(&p, &xs, &xs).unwrap()[0];
    let preds = predict_lin(bundle, &y, 1e-10).unwrap();
    for (i, (pred, target)) in preds.iter().zip(&y).enumerate() {
        assert!((pred - target).abs() <= 1e-6, "point {i}: {pred} vs {target}");
    }
}

#[test]
fn image_subset_training_reaches_target_mse() {
    // desk-scale check that momentum GD drives the train MSE below 0.01
    let root = predvar::data::data_root().unwrap();
    let raw = predvar::data::binary_filter(
        &predvar::data::load_named(&root, "mnist", predvar::data::Split::Train).unwrap(),
        0,
        1,
    );
    let train = predvar::data::subset(&raw, 100, 5, true)
        .unwrap()
        .into_dataset(2, predvar::data::TargetMode::BinaryPm1, "mnist-bin100")
        .unwrap();
    let arch = MlpArchitecture::mlp(train.xs.cols(), 512, 2, 1, Activation::Softplus);
    let params = nn::init_params(&arch, 3);
    let cfg = TrainConfig { max_steps: 3000, ..Default::default() };
    let out = nn::train(&params, &train.xs, &train.ys, &cfg).unwrap();
    assert!(out.converged, "final train MSE {}", out.final_mse);
    assert!(out.final_mse <= 0.01);
}
