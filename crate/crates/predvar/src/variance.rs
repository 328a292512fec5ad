//! Empirical variance estimation, the variance decomposition into averaged /
//! centered / interplay / covariance / residual terms, the linearization
//! ratio, and log-log slope fitting for width-scaling experiments.

use crate::kernel_models::EnsemblePredictions;
use crate::linalg::{dot, LinalgError, Matrix, SpdSolver};
use crate::ntk::{KernelBundle, MeanKernels};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VarianceError {
    #[error("need at least 2 ensemble members, got {0}")]
    TooFewMembers(usize),
    #[error("need at least {min} kernel samples for the covariance term, got {got}")]
    InsufficientSamples { min: usize, got: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("degenerate input for slope fit: {0}")]
    DegenerateInput(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Unbiased per-point, per-channel ensemble variance plus the channel-summed
/// view used as the scalar uncertainty score.
#[derive(Debug, Clone)]
pub struct PointVariances {
    pub per_channel: Matrix,
    pub channel_sum: Vec<f64>,
}

/// Unbiased (divide by `E - 1`) variance over members at every evaluation
/// point and output channel.
pub fn ensemble_variance(preds: &EnsemblePredictions) -> Result<PointVariances, VarianceError> {
    let e = preds.members;
    if e < 2 {
        return Err(VarianceError::TooFewMembers(e));
    }
    let (p, k) = (preds.points, preds.channels);
    let mut mean = vec![0.0; p * k];
    for m in 0..e {
        for (acc, v) in mean.iter_mut().zip(preds.member_block(m)) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= e as f64;
    }
    let mut var = vec![0.0; p * k];
    for m in 0..e {
        for ((acc, mu), v) in var.iter_mut().zip(&mean).zip(preds.member_block(m)) {
            let c = v - mu;
            *acc += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= (e - 1) as f64;
    }
    let per_channel = Matrix::new(p, k, var).expect("finite variances");
    let channel_sum = (0..p).map(|i| per_channel.row(i).iter().sum()).collect();
    Ok(PointVariances { per_channel, channel_sum })
}

/// Per-point variance decomposition report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Total: empirical variance of the decorrelated ensemble.
    pub v_total: Vec<f64>,
    /// Empirical variance of the averaged-kernel ensemble.
    pub v_a: Vec<f64>,
    /// Empirical variance of the centered ensemble.
    pub v_c: Vec<f64>,
    /// Empirical variance of the interplay ensemble.
    pub v_i: Vec<f64>,
    /// Monte-Carlo estimate of the covariance term.
    pub v_cor: Vec<f64>,
    /// `v_total - (v_a + v_c + v_i + v_cor)`, by definition.
    pub v_res: Vec<f64>,
    /// Closed-form cross-check of `v_a` from the mean kernels.
    pub v_a_formula: Vec<f64>,
    pub ensemble_size: usize,
    pub mean_kernel_samples: usize,
    pub kernel_sample_count: usize,
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub dataset: Option<String>,
}

const MIN_KERNEL_SAMPLES: usize = 10;

/// Assembles the decomposition from the disentangled ensembles, the mean
/// kernels, and independent kernel samples for the covariance term.
///
/// `kernel_samples` is indexed `[sample][channel]` and must come from a seed
/// stream disjoint from the ensemble members.
pub fn decompose(
    lin_a: &EnsemblePredictions,
    lin_c: &EnsemblePredictions,
    lin_i: &EnsemblePredictions,
    lin_d: &EnsemblePredictions,
    mean: &[MeanKernels],
    kernel_samples: &[Vec<KernelBundle>],
    jitter: f64,
) -> Result<VarianceReport, VarianceError> {
    if kernel_samples.len() < MIN_KERNEL_SAMPLES {
        return Err(VarianceError::InsufficientSamples {
            min: MIN_KERNEL_SAMPLES,
            got: kernel_samples.len(),
        });
    }
    let points = lin_d.points;
    for ens in [lin_a, lin_c, lin_i] {
        if ens.points != points || ens.channels != lin_d.channels {
            return Err(VarianceError::Mismatch("ensembles evaluated on different point sets".into()));
        }
    }

    let va = ensemble_variance(lin_a)?;
    let vc = ensemble_variance(lin_c)?;
    let vi = ensemble_variance(lin_i)?;
    let vd = ensemble_variance(lin_d)?;

    // formula route for v_a and the Monte-Carlo covariance term, per channel
    let mut v_a_formula = vec![0.0; points];
    let mut v_cor = vec![0.0; points];
    for mk in mean {
        let (fa, fc) = formula_terms(mk, kernel_samples, jitter)?;
        for i in 0..points {
            v_a_formula[i] += fa[i];
            v_cor[i] += fc[i];
        }
    }

    let v_res: Vec<f64> = (0..points)
        .map(|i| vd.channel_sum[i] - (va.channel_sum[i] + vc.channel_sum[i] + vi.channel_sum[i] + v_cor[i]))
        .collect();

    Ok(VarianceReport {
        v_total: vd.channel_sum,
        v_a: va.channel_sum,
        v_c: vc.channel_sum,
        v_i: vi.channel_sum,
        v_cor,
        v_res,
        v_a_formula,
        ensemble_size: lin_d.members,
        mean_kernel_samples: mean.first().map_or(0, |m| m.sample_count),
        kernel_sample_count: kernel_samples.len(),
        width: None,
        depth: None,
        dataset: None,
    })
}

/// Closed-form averaged-kernel variance and Monte-Carlo covariance term for
/// one output channel.
fn formula_terms(
    mk: &MeanKernels,
    kernel_samples: &[Vec<KernelBundle>],
    jitter: f64,
) -> Result<(Vec<f64>, Vec<f64>), VarianceError> {
    let n = mk.theta_bar_train_train.rows();
    let p = mk.theta_bar_eval_train.rows();
    let channel = mk.channel;
    let solver = SpdSolver::new(&mk.theta_bar_train_train, jitter)?;

    // Qbar rows: Theta_bar(x,X) Theta_bar(X,X)^-1, computed as a P x N matrix
    let qbar_t = solver.solve(&mk.theta_bar_eval_train.transpose())?; // N x P
    let qbar = qbar_t.transpose(); // P x N

    // v_a formula: Kbar(x,x) + q Kbar(X,X) q^T - 2 q Kbar(X,x)
    let qk = qbar.matmul(&mk.k_bar_train_train); // P x N
    let mut v_a = vec![0.0; p];
    for i in 0..p {
        let q = qbar.row(i);
        let quad = dot(qk.row(i), q);
        let cross = dot(q, mk.k_bar_eval_train.row(i));
        v_a[i] = mk.k_bar_eval_diag[i] + quad - 2.0 * cross;
    }

    // covariance term: 2 E[(Theta_s(x,X) - q Theta_s(X,X)) Tbar^-1 Theta_s Tbar^-1]
    //                  . (Kbar(X,x) - Kbar(X,X) q^T)
    let mut mean_row = Matrix::zeros(p, n);
    let mut used = 0usize;
    for sample in kernel_samples {
        let b = sample
            .iter()
            .find(|b| b.channel == channel)
            .ok_or_else(|| VarianceError::Mismatch(format!("kernel sample lacks channel {channel}")))?;
        if b.n_train() != n || b.n_eval() != p {
            return Err(VarianceError::Mismatch("kernel sample shape mismatch".into()));
        }
        // A_s = Tbar^-1 Theta_s Tbar^-1 (solved twice against symmetric input)
        let inner = solver.solve(&b.theta_train_train)?; // Tbar^-1 Theta_s
        let a_s = solver.solve(&inner.transpose())?; // Tbar^-1 Theta_s Tbar^-1 (symmetric up to roundoff)
        let centered = b.theta_eval_train.sub(&qbar.matmul(&b.theta_train_train))?;
        let row = centered.matmul(&a_s); // P x N
        for (acc, v) in mean_row.as_mut_slice().iter_mut().zip(row.as_slice()) {
            *acc += v;
        }
        used += 1;
    }
    let inv = 1.0 / used as f64;
    for v in mean_row.as_mut_slice() {
        *v *= inv;
    }
    let mut v_cor = vec![0.0; p];
    for i in 0..p {
        let c: Vec<f64> = mk
            .k_bar_eval_train
            .row(i)
            .iter()
            .zip(qk.row(i))
            .map(|(ket, kqv)| ket - kqv)
            .collect();
        v_cor[i] = 2.0 * dot(mean_row.row(i), &c);
    }
    Ok((v_a, v_cor))
}

/// Geometric mean over evaluation points of
/// `|v_lin - v_gd| / (v_c + v_i)`, both numerator and denominator floored at
/// `eps * mean(v_lin)` so the log stays finite.
pub fn linearization_ratio(
    v_lin: &[f64],
    v_gd: &[f64],
    v_c: &[f64],
    v_i: &[f64],
    eps: f64,
) -> Result<f64, VarianceError> {
    if v_lin.is_empty() {
        return Err(VarianceError::EmptyEvalSet);
    }
    if v_lin.len() != v_gd.len() || v_lin.len() != v_c.len() || v_lin.len() != v_i.len() {
        return Err(VarianceError::Mismatch("variance tables must align on eval points".into()));
    }
    let mean_lin = v_lin.iter().sum::<f64>() / v_lin.len() as f64;
    let floor = (eps * mean_lin).abs().max(f64::MIN_POSITIVE);
    let mut log_sum = 0.0;
    for i in 0..v_lin.len() {
        let num = (v_lin[i] - v_gd[i]).abs().max(floor);
        let den = (v_c[i] + v_i[i]).abs().max(floor);
        log_sum += (num / den).ln();
    }
    Ok((log_sum / v_lin.len() as f64).exp())
}

/// Default numerator/denominator floor for [`linearization_ratio`].
pub const RATIO_FLOOR: f64 = 1e-12;

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64, VarianceError> {
    if xs.len() != ys.len() {
        return Err(VarianceError::DegenerateInput("xs and ys lengths differ".into()));
    }
    if xs.len() < 2 {
        return Err(VarianceError::DegenerateInput("need at least 2 points".into()));
    }
    if xs.iter().chain(ys.iter()).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(VarianceError::DegenerateInput("all values must be positive".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(VarianceError::DegenerateInput("xs must contain at least 2 distinct values".into()));
    }
    Ok(sxy / sxx)
}
