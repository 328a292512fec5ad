//! Closed-form predictions of the linearly trained model and its disentangled
//! variants, plus batched ensemble construction.
//!
//! For a member with gram bundle `Theta` and functional initialization `f0`:
//!
//! - plain:        `f0(x) + Theta(x,X) Theta(X,X)^-1 (Y - f0(X))`
//! - centered:     `Theta(x,X) Theta(X,X)^-1 Y`
//! - averaged:     `f0(x) + Qbar(x,X) (Y - f0(X))`
//! - interplay:    `g(x) + Qbar(x,X) (Y - g(X))`, `g = Theta(.,X) S^-1 f0(X)`
//! - decorrelated: functional terms from one member, kernel terms from an
//!   independent one.

use crate::linalg::{LinalgError, Matrix, SpdSolver};
use crate::ntk::{self, InitKind, KernelBundle, MeanKernels};
use crate::nn::MlpArchitecture;
use crate::par;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Ntk(#[from] ntk::NtkError),
    #[error("bundle/data mismatch: {0}")]
    Mismatch(String),
}

/// Which ensemble construction produced a prediction tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lin,
    LinC,
    LinA,
    LinI,
    LinD,
    Gd,
    GdC,
    GdA,
    GdI,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lin => "lin",
            Variant::LinC => "lin_c",
            Variant::LinA => "lin_a",
            Variant::LinI => "lin_i",
            Variant::LinD => "lin_d",
            Variant::Gd => "gd",
            Variant::GdC => "gd_c",
            Variant::GdA => "gd_a",
            Variant::GdI => "gd_i",
        }
    }
}

/// Per-member prediction tensor over evaluation points (`E x P x h_L`).
#[derive(Debug, Clone)]
pub struct EnsemblePredictions {
    pub variant: Variant,
    values: Vec<f64>,
    pub members: usize,
    pub points: usize,
    pub channels: usize,
    pub member_seeds: Vec<u64>,
}

impl EnsemblePredictions {
    pub fn new(variant: Variant, members: usize, points: usize, channels: usize, member_seeds: Vec<u64>) -> Self {
        Self {
            variant,
            values: vec![0.0; members * points * channels],
            members,
            points,
            channels,
            member_seeds,
        }
    }

    #[inline]
    pub fn get(&self, member: usize, point: usize, channel: usize) -> f64 {
        self.values[(member * self.points + point) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, member: usize, point: usize, channel: usize, v: f64) {
        self.values[(member * self.points + point) * self.channels + channel] = v;
    }

    /// One member's `P x h_L` block.
    pub fn member_block(&self, member: usize) -> &[f64] {
        let stride = self.points * self.channels;
        &self.values[member * stride..(member + 1) * stride]
    }

    pub fn member_block_mut(&mut self, member: usize) -> &mut [f64] {
        let stride = self.points * self.channels;
        &mut self.values[member * stride..(member + 1) * stride]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean over members (`P x h_L`).
    pub fn member_mean(&self) -> Matrix {
        let mut out = Matrix::zeros(self.points, self.channels);
        for m in 0..self.members {
            for p in 0..self.points {
                for k in 0..self.channels {
                    let v = out.get(p, k) + self.get(m, p, k);
                    out.set(p, k, v);
                }
            }
        }
        let inv = 1.0 / self.members as f64;
        for v in out.as_mut_slice() {
            *v *= inv;
        }
        out
    }
}

fn check_bundle(bundle: &KernelBundle, n_train: usize) -> Result<(), ModelError> {
    if bundle.n_train() != n_train {
        return Err(ModelError::Mismatch(format!(
            "bundle built on {} train points, dataset has {n_train}",
            bundle.n_train()
        )));
    }
    Ok(())
}

fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `f0(x) + Theta(x,X) Theta(X,X)^-1 (y - f0(X))` for one channel.
pub fn predict_lin(bundle: &KernelBundle, y: &[f64], jitter: f64) -> Result<Vec<f64>, ModelError> {
    check_bundle(bundle, y.len())?;
    let rhs = Matrix::column(sub_vec(y, &bundle.f0_train));
    let w = SpdSolver::new(&bundle.theta_train_train, jitter)?.solve(&rhs)?;
    let corr = bundle.theta_eval_train.matmul(&w);
    Ok(bundle
        .f0_eval
        .iter()
        .enumerate()
        .map(|(i, f0)| f0 + corr.get(i, 0))
        .collect())
}

/// `Theta(x,X) Theta(X,X)^-1 y`: functional terms dropped.
pub fn predict_lin_c(bundle: &KernelBundle, y: &[f64], jitter: f64) -> Result<Vec<f64>, ModelError> {
    check_bundle(bundle, y.len())?;
    let w = SpdSolver::new(&bundle.theta_train_train, jitter)?.solve(&Matrix::column(y.to_vec()))?;
    Ok(bundle.theta_eval_train.matmul(&w).into_vec())
}

/// `f0(x) + Qbar(x,X) (y - f0(X))`: member kernel replaced by the mean kernel.
pub fn predict_lin_a(bundle: &KernelBundle, mean: &MeanKernels, y: &[f64], jitter: f64) -> Result<Vec<f64>, ModelError> {
    check_bundle(bundle, y.len())?;
    predict_lin_a_from_functional(&bundle.f0_train, &bundle.f0_eval, mean, y, jitter)
}

/// [`predict_lin_a`] given only the functional initialization; the member
/// kernel never enters the averaged variant.
pub fn predict_lin_a_from_functional(
    f0_train: &[f64],
    f0_eval: &[f64],
    mean: &MeanKernels,
    y: &[f64],
    jitter: f64,
) -> Result<Vec<f64>, ModelError> {
    if mean.theta_bar_train_train.rows() != y.len() || f0_train.len() != y.len() {
        return Err(ModelError::Mismatch("mean kernels built on a different train set".into()));
    }
    let rhs = Matrix::column(sub_vec(y, f0_train));
    let w = SpdSolver::new(&mean.theta_bar_train_train, jitter)?.solve(&rhs)?;
    let corr = mean.theta_bar_eval_train.matmul(&w);
    Ok(f0_eval.iter().enumerate().map(|(i, f0)| f0 + corr.get(i, 0)).collect())
}

/// Custom functional prior `g(x) = Theta(x,X) S^-1 f0(X)` on train and eval
/// points, where `S` is the supplied inverse source (the mean kernel for the
/// linear variants, a shared member kernel for the trained ones).
pub fn custom_prior_g(
    bundle: &KernelBundle,
    inverse_source: &Matrix,
    jitter: f64,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if inverse_source.rows() != bundle.n_train() {
        return Err(ModelError::Mismatch("inverse source does not match train set".into()));
    }
    let w = SpdSolver::new(inverse_source, jitter)?.solve(&Matrix::column(bundle.f0_train.clone()))?;
    let g_train = bundle.theta_train_train.matmul(&w).into_vec();
    let g_eval = bundle.theta_eval_train.matmul(&w).into_vec();
    Ok((g_train, g_eval))
}

/// `g(x) + Qbar(x,X) (y - g(X))`: interplay variant.
pub fn predict_lin_i(bundle: &KernelBundle, mean: &MeanKernels, y: &[f64], jitter: f64) -> Result<Vec<f64>, ModelError> {
    check_bundle(bundle, y.len())?;
    let (g_train, g_eval) = custom_prior_g(bundle, &mean.theta_bar_train_train, jitter)?;
    let rhs = Matrix::column(sub_vec(y, &g_train));
    let w = SpdSolver::new(&mean.theta_bar_train_train, jitter)?.solve(&rhs)?;
    let corr = mean.theta_bar_eval_train.matmul(&w);
    Ok(g_eval.iter().enumerate().map(|(i, g)| g + corr.get(i, 0)).collect())
}

/// Functional terms from `bundle_f`, kernel terms from the independently
/// drawn `bundle_k`.
pub fn predict_lin_d(
    bundle_f: &KernelBundle,
    bundle_k: &KernelBundle,
    y: &[f64],
    jitter: f64,
) -> Result<Vec<f64>, ModelError> {
    check_bundle(bundle_f, y.len())?;
    check_bundle(bundle_k, y.len())?;
    let rhs = Matrix::column(sub_vec(y, &bundle_f.f0_train));
    let w = SpdSolver::new(&bundle_k.theta_train_train, jitter)?.solve(&rhs)?;
    let corr = bundle_k.theta_eval_train.matmul(&w);
    Ok(bundle_f
        .f0_eval
        .iter()
        .enumerate()
        .map(|(i, f0)| f0 + corr.get(i, 0))
        .collect())
}

/// Column `k` of a targets matrix.
fn target_channel(ys: &Matrix, k: usize) -> Vec<f64> {
    (0..ys.rows()).map(|i| ys.get(i, k)).collect()
}

/// Inputs shared by all kernel-ensemble constructions.
pub struct KernelEnsembleSpec<'a> {
    pub arch: &'a MlpArchitecture,
    pub xs_train: &'a Matrix,
    pub ys_train: &'a Matrix,
    pub xs_eval: &'a Matrix,
    /// Kernel-member seeds (one per member).
    pub member_seeds: &'a [u64],
    /// Independent functional-member seeds for the decorrelated variant.
    pub functional_seeds: &'a [u64],
    pub mean: Option<&'a [MeanKernels]>,
    pub jitter: f64,
    pub init: InitKind,
}

/// Builds one kernel-model ensemble. Members are evaluated in parallel; the
/// result layout is fixed by member index so the output is deterministic.
///
/// Member pairing: member `m`'s kernel terms come from `member_seeds[m]`
/// (plain and centered use that draw's functional terms too); the averaged,
/// interplay and decorrelated variants take their functional initialization
/// from `functional_seeds[m]`. With shared streams across variants, member
/// `m` of the decorrelated ensemble decomposes exactly into the paired
/// averaged/centered/interplay members, so the decomposition's cross terms
/// cancel instead of adding sampling noise.
pub fn build_kernel_ensemble(spec: &KernelEnsembleSpec, variant: Variant) -> Result<EnsemblePredictions, ModelError> {
    let e = spec.member_seeds.len();
    let channels = spec.arch.output_dim();
    let points = spec.xs_eval.rows();
    let needs_mean = matches!(variant, Variant::LinA | Variant::LinI);
    if needs_mean && spec.mean.is_none() {
        return Err(ModelError::Mismatch(format!("{} requires mean kernels", variant.as_str())));
    }

    let per_member: Vec<Result<Vec<f64>, ModelError>> = par::map_indexed(e, |m| {
        // the averaged variant never touches the member kernel
        let bundles = if matches!(variant, Variant::LinA) {
            Vec::new()
        } else {
            let params = ntk::init_member(spec.arch, spec.member_seeds[m], spec.init);
            ntk::kernel_bundles(&params, spec.xs_train, spec.xs_eval)?
        };
        // block layout: P x channels
        let mut block = vec![0.0; points * channels];
        for k in 0..channels {
            let y = target_channel(spec.ys_train, k);
            let preds = match variant {
                Variant::Lin => predict_lin(&bundles[k], &y, spec.jitter)?,
                Variant::LinC => predict_lin_c(&bundles[k], &y, spec.jitter)?,
                Variant::LinA => {
                    let f_params = ntk::init_member(spec.arch, spec.functional_seeds[m], spec.init);
                    let (f0_train, f0_eval) = functional_only(&f_params, spec.xs_train, spec.xs_eval, k)?;
                    predict_lin_a_from_functional(&f0_train, &f0_eval, &spec.mean.unwrap()[k], &y, spec.jitter)?
                }
                Variant::LinI => {
                    // functional terms mirror the decorrelated pairing
                    let f_params = ntk::init_member(spec.arch, spec.functional_seeds[m], spec.init);
                    let mut b = bundles[k].clone();
                    let f_bundles = functional_only(&f_params, spec.xs_train, spec.xs_eval, k)?;
                    b.f0_train = f_bundles.0;
                    b.f0_eval = f_bundles.1;
                    predict_lin_i(&b, &spec.mean.unwrap()[k], &y, spec.jitter)?
                }
                Variant::LinD => {
                    let f_params = ntk::init_member(spec.arch, spec.functional_seeds[m], spec.init);
                    let (f0_train, f0_eval) = functional_only(&f_params, spec.xs_train, spec.xs_eval, k)?;
                    let mut bf = bundles[k].clone();
                    bf.f0_train = f0_train;
                    bf.f0_eval = f0_eval;
                    predict_lin_d(&bf, &bundles[k], &y, spec.jitter)?
                }
                other => {
                    return Err(ModelError::Mismatch(format!(
                        "{} is a trained variant; use gd_models::build_gd_ensemble",
                        other.as_str()
                    )))
                }
            };
            for (p, v) in preds.iter().enumerate() {
                block[p * channels + k] = *v;
            }
        }
        Ok(block)
    });

    let mut out = EnsemblePredictions::new(variant, e, points, channels, spec.member_seeds.to_vec());
    for (m, r) in per_member.into_iter().enumerate() {
        out.member_block_mut(m).copy_from_slice(&r?);
    }
    Ok(out)
}

fn functional_only(
    params: &crate::nn::MlpParams,
    xs_train: &Matrix,
    xs_eval: &Matrix,
    channel: usize,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let ft = crate::nn::forward(params, xs_train).map_err(ntk::NtkError::from)?;
    let fe = crate::nn::forward(params, xs_eval).map_err(ntk::NtkError::from)?;
    Ok((
        (0..ft.rows()).map(|i| ft.get(i, channel)).collect(),
        (0..fe.rows()).map(|i| fe.get(i, channel)).collect(),
    ))
}
