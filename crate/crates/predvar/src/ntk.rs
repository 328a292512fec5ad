//! Empirical tangent-kernel gram matrices for single ensemble members and
//! Monte-Carlo mean kernels over random initializations.
//!
//! The gram entry `(i, j)` is the dot product of flattened per-sample
//! gradients. It is evaluated without materializing those gradients, through
//! the layerwise identity
//!
//! `Theta(x, x') = sum_l (sigma_w^2 / h_l * <a_l(x), a_l(x')> + 1) * <d_l(x), d_l(x')>`
//!
//! where `a_l` are layer inputs and `d_l` the backpropagated bias gradients.

use crate::linalg::Matrix;
use crate::nn::{self, MlpArchitecture, MlpParams, NnError};
use crate::par;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NtkError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Per-sample data needed for gram assembly against any other batch: layer
/// inputs and bias gradients for one output channel.
pub struct GramFeatures {
    acts: Vec<Matrix>,
    deltas: Vec<Matrix>,
    /// `sigma_w^2 / h_l` per layer.
    scales: Vec<f64>,
    /// Network outputs for the batch (all channels).
    pub outputs: Matrix,
}

/// Forward + backward pass producing everything gram assembly needs.
pub fn gram_features(params: &MlpParams, xs: &Matrix, channel: usize) -> Result<GramFeatures, NtkError> {
    let trace = nn::forward_trace(params, xs)?;
    let deltas = nn::bias_gradients(params, &trace, channel)?;
    let scales = (0..params.arch.depth())
        .map(|l| params.arch.sigma_w * params.arch.sigma_w / params.arch.layer_widths[l] as f64)
        .collect();
    Ok(GramFeatures { acts: trace.acts, deltas, scales, outputs: trace.output })
}

/// Gram block between two feature sets of the same member.
pub fn gram_from_features(a: &GramFeatures, b: &GramFeatures) -> Matrix {
    let rows = a.outputs.rows();
    let cols = b.outputs.rows();
    let mut total = Matrix::zeros(rows, cols);
    for l in 0..a.acts.len() {
        let input_gram = a.acts[l].matmul_nt(&b.acts[l]);
        let delta_gram = a.deltas[l].matmul_nt(&b.deltas[l]);
        let s = a.scales[l];
        for ((t, ig), dg) in total
            .as_mut_slice()
            .iter_mut()
            .zip(input_gram.as_slice())
            .zip(delta_gram.as_slice())
        {
            *t += (s * ig + 1.0) * dg;
        }
    }
    total
}

/// Empirical tangent-kernel gram between two input batches for a
/// scalar-output network.
pub fn empirical_ntk(params: &MlpParams, xs_a: &Matrix, xs_b: &Matrix) -> Result<Matrix, NtkError> {
    if params.arch.output_dim() != 1 {
        return Err(NtkError::DimensionMismatch(
            "empirical_ntk requires a scalar-output network; use empirical_ntk_channel".into(),
        ));
    }
    empirical_ntk_channel(params, xs_a, xs_b, 0)
}

/// As [`empirical_ntk`] for one output channel of a multi-output network.
/// Cross-channel entries are not represented; multi-output grams are
/// block-diagonal with one shared-input block per channel.
pub fn empirical_ntk_channel(
    params: &MlpParams,
    xs_a: &Matrix,
    xs_b: &Matrix,
    channel: usize,
) -> Result<Matrix, NtkError> {
    let fa = gram_features(params, xs_a, channel)?;
    let fb = gram_features(params, xs_b, channel)?;
    Ok(gram_from_features(&fa, &fb))
}

/// Empirical gram matrices and functional initialization of one member, for
/// one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBundle {
    /// `Theta(X, X)`, symmetrized (`N x N`).
    pub theta_train_train: Matrix,
    /// `Theta(X_eval, X)` (`P x N`).
    pub theta_eval_train: Matrix,
    /// `f(X, theta_0)` for this channel.
    pub f0_train: Vec<f64>,
    /// `f(X_eval, theta_0)` for this channel.
    pub f0_eval: Vec<f64>,
    pub member_seed: u64,
    pub channel: usize,
}

impl KernelBundle {
    pub fn n_train(&self) -> usize {
        self.theta_train_train.rows()
    }

    pub fn n_eval(&self) -> usize {
        self.theta_eval_train.rows()
    }
}

/// Builds the per-channel kernel bundles of one member in a single pass over
/// the train and eval batches.
pub fn kernel_bundles(params: &MlpParams, xs_train: &Matrix, xs_eval: &Matrix) -> Result<Vec<KernelBundle>, NtkError> {
    let h_out = params.arch.output_dim();
    let mut out = Vec::with_capacity(h_out);
    for k in 0..h_out {
        let ft = gram_features(params, xs_train, k)?;
        let fe = gram_features(params, xs_eval, k)?;
        let theta_tt = gram_from_features(&ft, &ft).symmetrized();
        let theta_et = gram_from_features(&fe, &ft);
        let f0_train = (0..xs_train.rows()).map(|i| ft.outputs.get(i, k)).collect();
        let f0_eval = (0..xs_eval.rows()).map(|i| fe.outputs.get(i, k)).collect();
        out.push(KernelBundle {
            theta_train_train: theta_tt,
            theta_eval_train: theta_et,
            f0_train,
            f0_eval,
            member_seed: params.seed,
            channel: k,
        });
    }
    Ok(out)
}

/// Monte-Carlo means of the tangent kernel and of the finite-width output
/// kernel `E[f f^T]` over random initializations, per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanKernels {
    pub theta_bar_train_train: Matrix,
    pub theta_bar_eval_train: Matrix,
    pub k_bar_train_train: Matrix,
    pub k_bar_eval_train: Matrix,
    pub k_bar_eval_diag: Vec<f64>,
    pub sample_count: usize,
    pub channel: usize,
}

/// How member initializations are drawn for kernel estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Standard,
    ZeroBias,
}

pub fn init_member(arch: &MlpArchitecture, seed: u64, kind: InitKind) -> MlpParams {
    match kind {
        InitKind::Standard => nn::init_params(arch, seed),
        InitKind::ZeroBias => nn::init_params_zero_bias(arch, seed),
    }
}

/// Estimates mean kernels from `m` fresh initializations whose seeds come
/// from `member_seeds` (one per member, a stream disjoint from ensemble
/// members). Members are evaluated in parallel; accumulation order is fixed.
pub fn mean_kernels(
    arch: &MlpArchitecture,
    xs_train: &Matrix,
    xs_eval: &Matrix,
    member_seeds: &[u64],
    kind: InitKind,
) -> Result<Vec<MeanKernels>, NtkError> {
    Ok(mean_kernels_with_samples(arch, xs_train, xs_eval, member_seeds, kind, 0)?.0)
}

/// As [`mean_kernels`], additionally returning the first `keep` members'
/// bundles (indexed `[sample][channel]`) for covariance-term estimation.
pub fn mean_kernels_with_samples(
    arch: &MlpArchitecture,
    xs_train: &Matrix,
    xs_eval: &Matrix,
    member_seeds: &[u64],
    kind: InitKind,
    keep: usize,
) -> Result<(Vec<MeanKernels>, Vec<Vec<KernelBundle>>), NtkError> {
    assert!(!member_seeds.is_empty(), "mean_kernels needs m >= 1");
    let h_out = arch.output_dim();
    let (n, p) = (xs_train.rows(), xs_eval.rows());
    let m = member_seeds.len();

    struct Acc {
        theta_tt: Matrix,
        theta_et: Matrix,
        k_tt: Matrix,
        k_et: Matrix,
        k_diag: Vec<f64>,
    }
    let mut accs: Vec<Acc> = (0..h_out)
        .map(|_| Acc {
            theta_tt: Matrix::zeros(n, n),
            theta_et: Matrix::zeros(p, n),
            k_tt: Matrix::zeros(n, n),
            k_et: Matrix::zeros(p, n),
            k_diag: vec![0.0; p],
        })
        .collect();
    let mut kept: Vec<Vec<KernelBundle>> = Vec::with_capacity(keep.min(m));

    // members are processed in fixed-size chunks: evaluation is parallel
    // inside a chunk, accumulation stays sequential and ordered
    const CHUNK: usize = 16;
    for chunk_start in (0..m).step_by(CHUNK) {
        let chunk_len = CHUNK.min(m - chunk_start);
        let evaluated: Vec<Result<Vec<KernelBundle>, NtkError>> = par::map_indexed(chunk_len, |i| {
            let params = init_member(arch, member_seeds[chunk_start + i], kind);
            kernel_bundles(&params, xs_train, xs_eval)
        });
        for bundles in evaluated {
            let bundles = bundles?;
            for (k, b) in bundles.iter().enumerate() {
                let acc = &mut accs[k];
                add_assign(&mut acc.theta_tt, &b.theta_train_train);
                add_assign(&mut acc.theta_et, &b.theta_eval_train);
                add_outer(&mut acc.k_tt, &b.f0_train, &b.f0_train);
                add_outer(&mut acc.k_et, &b.f0_eval, &b.f0_train);
                for (d, v) in acc.k_diag.iter_mut().zip(&b.f0_eval) {
                    *d += v * v;
                }
            }
            if kept.len() < keep {
                kept.push(bundles);
            }
        }
    }

    let inv = 1.0 / m as f64;
    let out = accs
        .into_iter()
        .enumerate()
        .map(|(k, mut acc)| {
            for v in acc.theta_tt.as_mut_slice() {
                *v *= inv;
            }
            for v in acc.theta_et.as_mut_slice() {
                *v *= inv;
            }
            for v in acc.k_tt.as_mut_slice() {
                *v *= inv;
            }
            for v in acc.k_et.as_mut_slice() {
                *v *= inv;
            }
            for v in acc.k_diag.iter_mut() {
                *v *= inv;
            }
            MeanKernels {
                theta_bar_train_train: acc.theta_tt.symmetrized(),
                theta_bar_eval_train: acc.theta_et,
                k_bar_train_train: acc.k_tt.symmetrized(),
                k_bar_eval_train: acc.k_et,
                k_bar_eval_diag: acc.k_diag,
                sample_count: m,
                channel: k,
            }
        })
        .collect();
    Ok((out, kept))
}

fn add_assign(acc: &mut Matrix, m: &Matrix) {
    for (a, v) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
        *a += v;
    }
}

fn add_outer(acc: &mut Matrix, a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (i, &ai) in a.iter().enumerate() {
        let row = &mut acc.as_mut_slice()[i * cols..(i + 1) * cols];
        for (r, &bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use crate::nn::{init_params, init_params_zero_bias, per_sample_grad, Activation};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::SQRT_2;

    fn random_inputs(rng: &mut impl Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_point_gram_is_grad_norm() {
        let arch = MlpArchitecture::mlp(3, 8, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 4);
        let x = Matrix::new(1, 3, vec![0.3, -0.7, 0.2]).unwrap();
        let theta = empirical_ntk(&p, &x, &x).unwrap();
        let g = per_sample_grad(&p, &[0.3, -0.7, 0.2], 0).unwrap();
        let norm = dot(&g, &g);
        assert!(theta.get(0, 0) >= 0.0);
        assert!((theta.get(0, 0) - norm).abs() < 1e-12 * norm.max(1.0));
    }

    #[test]
    fn hand_network_kernel_value() {
        // same network as the nn hand-backprop oracle: Theta(1, 1) = 6
        let arch = MlpArchitecture::new(vec![1, 2, 1], Activation::Relu, SQRT_2).unwrap();
        let p = MlpParams {
            arch,
            weights: vec![
                Matrix::new(2, 1, vec![1.0, -1.0]).unwrap(),
                Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
            ],
            biases: vec![vec![0.0, 0.0], vec![0.0]],
            seed: 0,
        };
        let x = Matrix::new(1, 1, vec![1.0]).unwrap();
        let theta = empirical_ntk(&p, &x, &x).unwrap();
        assert!((theta.get(0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gram_matches_explicit_gradient_dots() {
        let arch = MlpArchitecture::mlp(4, 7, 3, 1, Activation::Softplus);
        let p = init_params(&arch, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = random_inputs(&mut rng, 5, 4);
        let theta = empirical_ntk(&p, &xs, &xs).unwrap();
        let grads: Vec<Vec<f64>> = (0..5).map(|i| per_sample_grad(&p, xs.row(i), 0).unwrap()).collect();
        for i in 0..5 {
            for j in 0..5 {
                let expected = dot(&grads[i], &grads[j]);
                let got = theta.get(i, j);
                assert!(
                    (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                    "({i},{j}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn transpose_symmetry_is_exact() {
        let arch = MlpArchitecture::mlp(3, 9, 2, 1, Activation::Relu);
        let p = init_params(&arch, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_inputs(&mut rng, 4, 3);
        let b = random_inputs(&mut rng, 6, 3);
        let t_ab = empirical_ntk(&p, &a, &b).unwrap();
        let t_ba = empirical_ntk(&p, &b, &a).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(t_ab.get(i, j), t_ba.get(j, i));
            }
        }
    }

    #[test]
    fn gram_is_psd_by_power_iteration() {
        // smallest eigenvalue estimate via deflated power iterations stays >= -1e-8
        let arch = MlpArchitecture::mlp(3, 16, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = random_inputs(&mut rng, 10, 3);
        let theta = empirical_ntk(&p, &xs, &xs).unwrap().symmetrized();
        let n = theta.rows();
        // shift-invert free approach: largest eigenvalue lambda_max of (c I - A)
        // gives lambda_min(A) = c - lambda_max
        let c = theta.as_slice().iter().map(|v| v.abs()).sum::<f64>(); // crude upper bound
        let shifted = Matrix::from_fn(n, n, |i, j| {
            let base = if i == j { c } else { 0.0 };
            base - theta.get(i, j)
        });
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let w = shifted.matvec(&v);
            let norm = dot(&w, &w).sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        let lambda_max = dot(&v, &shifted.matvec(&v));
        let lambda_min = c - lambda_max;
        assert!(lambda_min >= -1e-8, "lambda_min {lambda_min}");
    }

    #[test]
    fn mean_kernels_m1_equals_single_member() {
        let arch = MlpArchitecture::mlp(3, 6, 2, 1, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs_t = random_inputs(&mut rng, 4, 3);
        let xs_e = random_inputs(&mut rng, 3, 3);
        let mk = mean_kernels(&arch, &xs_t, &xs_e, &[99], InitKind::Standard).unwrap();
        let p = init_params(&arch, 99);
        let b = &kernel_bundles(&p, &xs_t, &xs_e).unwrap()[0];
        let d = mk[0]
            .theta_bar_train_train
            .sub(&b.theta_train_train)
            .unwrap()
            .frobenius_norm();
        assert!(d < 1e-12, "theta_bar m=1 differs by {d}");
        let d = mk[0].theta_bar_eval_train.sub(&b.theta_eval_train).unwrap().frobenius_norm();
        assert!(d < 1e-12);
    }

    #[test]
    fn variance_of_gram_entries_decays_inversely_with_width() {
        // 1-hidden-layer entrywise variance halves (within [0.4, 0.7]) per width doubling
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_inputs(&mut rng, 2, 6);
        let m = 600;
        let mut vars = Vec::new();
        for &h in &[256usize, 512] {
            let arch = MlpArchitecture::mlp(6, h, 2, 1, Activation::Relu);
            let mut vals = Vec::with_capacity(m);
            for s in 0..m {
                let p = init_params(&arch, 10_000 + s as u64);
                vals.push(empirical_ntk(&p, &x, &x).unwrap().get(0, 1));
            }
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
            vars.push(var);
        }
        let ratio = vars[1] / vars[0];
        assert!((0.4..=0.7).contains(&ratio), "variance ratio per doubling {ratio}");
    }

    #[test]
    fn k_bar_diag_nonneg_and_psd_up_to_noise() {
        let arch = MlpArchitecture::mlp(4, 32, 2, 1, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs = random_inputs(&mut rng, 5, 4);
        let seeds: Vec<u64> = (0..400).map(|i| 40_000 + i as u64).collect();
        let mk = &mean_kernels(&arch, &xs, &xs, &seeds, InitKind::Standard).unwrap()[0];
        for i in 0..5 {
            assert!(mk.k_bar_train_train.get(i, i) >= 0.0);
        }
        // K_bar is a mean of PSD rank-1 terms; smallest eigenvalue of the
        // estimate must sit above a generous Monte-Carlo noise floor
        let k = &mk.k_bar_train_train;
        let n = k.rows();
        let c = k.as_slice().iter().map(|v| v.abs()).sum::<f64>();
        let shifted = Matrix::from_fn(n, n, |i, j| if i == j { c - k.get(i, j) } else { -k.get(i, j) });
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..300 {
            let w = shifted.matvec(&v);
            let norm = dot(&w, &w).sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        let lambda_min = c - dot(&v, &shifted.matvec(&v));
        assert!(lambda_min >= -5.0 * 0.1 / (400f64).sqrt(), "lambda_min {lambda_min}");
    }

    #[test]
    fn multi_channel_bundles_differ_per_channel() {
        let arch = MlpArchitecture::mlp(3, 8, 2, 3, Activation::Softplus);
        let p = init_params(&arch, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let xs = random_inputs(&mut rng, 4, 3);
        let bundles = kernel_bundles(&p, &xs, &xs).unwrap();
        assert_eq!(bundles.len(), 3);
        assert_ne!(bundles[0].theta_train_train, bundles[1].theta_train_train);
        // each channel gram still matches explicit gradient dots
        for (k, b) in bundles.iter().enumerate() {
            let g0 = per_sample_grad(&p, xs.row(0), k).unwrap();
            let g1 = per_sample_grad(&p, xs.row(1), k).unwrap();
            let expected = dot(&g0, &g1);
            assert!((b.theta_train_train.get(0, 1) - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn zero_bias_members_have_zero_bias_outputs_at_origin() {
        let arch = MlpArchitecture::mlp(3, 8, 2, 1, Activation::Relu);
        let p = init_params_zero_bias(&arch, 77);
        let x = Matrix::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let out = nn::forward(&p, &x).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
    }
}
