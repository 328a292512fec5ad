//! Ensembles of non-linearly trained networks with initialization surgery:
//! plain, centered, shared-initialization (averaged) and custom-prior
//! variants, plus the relative kernel-change diagnostic.
//!
//! Functional offsets entering a member's loss are evaluated once at the
//! relevant initializations and held constant through training; recomputing
//! them per step would change the gradients.

use crate::kernel_models::{custom_prior_g, EnsemblePredictions, ModelError, Variant};
use crate::linalg::Matrix;
use crate::nn::{self, MlpArchitecture, MlpParams, NnError, TrainConfig};
use crate::ntk::{self, InitKind};
use crate::par;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GdError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ntk(#[from] ntk::NtkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("member {member} (seed {seed}) diverged: {source}")]
    MemberDiverged { member: usize, seed: u64, source: NnError },
    #[error("custom-prior variant needs a gram inversion of size N*h_L = {required}, above the budget {budget}")]
    GramRequired { required: usize, budget: usize },
    #[error("variant {0} requires a shared initialization seed distinct from every member seed")]
    SharedSeedRequired(&'static str),
}

/// Trained-ensemble variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdVariant {
    /// `f(x, theta_t)`.
    Gd,
    /// `f(x, theta_t) - f(x, theta_0)`, trained so the centered model fits
    /// the targets.
    GdC,
    /// All members start from the shared `theta_0^c`; each member's loss sees
    /// `f(x, theta) - f(x, theta_0^c) + f(x, theta_0^(m))` with an untrained
    /// per-member draw.
    GdA,
    /// As `GdA` with the custom prior
    /// `g(x) = Theta_m(x,X) Theta_c(X,X)^-1 f(X, theta_0^(m))` as the offset.
    GdI,
}

impl GdVariant {
    pub fn to_variant(self) -> Variant {
        match self {
            GdVariant::Gd => Variant::Gd,
            GdVariant::GdC => Variant::GdC,
            GdVariant::GdA => Variant::GdA,
            GdVariant::GdI => Variant::GdI,
        }
    }
}

/// Largest `N * h_L` for which the custom-prior gram inversion is attempted.
pub const GRAM_BUDGET: usize = 2000;

/// Construction recipe for one trained ensemble.
#[derive(Debug, Clone)]
pub struct GdVariantSpec {
    pub variant: GdVariant,
    /// Shared initialization for `GdA` / `GdI`.
    pub shared_seed: Option<u64>,
    pub member_seeds: Vec<u64>,
    pub train_cfg: TrainConfig,
    pub jitter: f64,
    pub init: InitKind,
}

/// Per-member training outcome, kept alongside the predictions so callers can
/// flag members that missed the target MSE.
#[derive(Debug, Clone)]
pub struct GdMemberReport {
    pub seed: u64,
    pub final_mse: f64,
    pub steps: usize,
    pub converged: bool,
}

#[derive(Debug)]
pub struct GdEnsemble {
    pub predictions: EnsemblePredictions,
    pub members: Vec<GdMemberReport>,
}

/// Trains every member of the requested variant and evaluates it on
/// `xs_eval`. Members run in parallel; results land in member order.
pub fn build_gd_ensemble(
    spec: &GdVariantSpec,
    arch: &MlpArchitecture,
    xs_train: &Matrix,
    ys_train: &Matrix,
    xs_eval: &Matrix,
) -> Result<GdEnsemble, GdError> {
    let e = spec.member_seeds.len();
    let channels = arch.output_dim();
    let needs_shared = matches!(spec.variant, GdVariant::GdA | GdVariant::GdI);
    let shared = if needs_shared {
        let s = spec.shared_seed.ok_or(GdError::SharedSeedRequired(match spec.variant {
            GdVariant::GdA => "gd_a",
            _ => "gd_i",
        }))?;
        if spec.member_seeds.contains(&s) {
            return Err(GdError::SharedSeedRequired("gd_a/gd_i (shared seed collides with a member seed)"));
        }
        Some(ntk::init_member(arch, s, spec.init))
    } else {
        None
    };

    if matches!(spec.variant, GdVariant::GdI) {
        let required = xs_train.rows() * channels;
        if required > GRAM_BUDGET {
            return Err(GdError::GramRequired { required, budget: GRAM_BUDGET });
        }
    }

    // shared precomputations for the surgery variants
    let shared_eval = match &shared {
        Some(p) => Some(nn::forward(p, xs_eval)?),
        None => None,
    };
    let shared_grams: Option<Vec<Matrix>> = match (&shared, spec.variant) {
        (Some(p), GdVariant::GdI) => Some(
            ntk::kernel_bundles(p, xs_train, xs_train)?
                .into_iter()
                .map(|b| b.theta_train_train)
                .collect(),
        ),
        _ => None,
    };

    let results: Vec<Result<(Vec<f64>, GdMemberReport), GdError>> = par::map_indexed(e, |m| {
        let seed = spec.member_seeds[m];
        member_predictions(spec, arch, xs_train, ys_train, xs_eval, seed, shared.as_ref(), shared_eval.as_ref(), shared_grams.as_deref())
            .map_err(|err| match err {
                GdError::Nn(src @ NnError::Diverged { .. }) => GdError::MemberDiverged { member: m, seed, source: src },
                other => other,
            })
    });

    let points = xs_eval.rows();
    let mut predictions = EnsemblePredictions::new(spec.variant.to_variant(), e, points, channels, spec.member_seeds.clone());
    let mut members = Vec::with_capacity(e);
    for (m, r) in results.into_iter().enumerate() {
        let (block, report) = r?;
        predictions.member_block_mut(m).copy_from_slice(&block);
        members.push(report);
    }
    Ok(GdEnsemble { predictions, members })
}

#[allow(clippy::too_many_arguments)]
fn member_predictions(
    spec: &GdVariantSpec,
    arch: &MlpArchitecture,
    xs_train: &Matrix,
    ys_train: &Matrix,
    xs_eval: &Matrix,
    seed: u64,
    shared: Option<&MlpParams>,
    shared_eval: Option<&Matrix>,
    shared_grams: Option<&[Matrix]>,
) -> Result<(Vec<f64>, GdMemberReport), GdError> {
    let cfg = &spec.train_cfg;
    let (outcome, eval_pred): (nn::TrainOutcome, Matrix) = match spec.variant {
        GdVariant::Gd => {
            let params = ntk::init_member(arch, seed, spec.init);
            let out = nn::train(&params, xs_train, ys_train, &TrainConfig { center_output: false, ..cfg.clone() })?;
            let pred = nn::forward(&out.params, xs_eval)?;
            (out, pred)
        }
        GdVariant::GdC => {
            let params = ntk::init_member(arch, seed, spec.init);
            let f0_eval = nn::forward(&params, xs_eval)?;
            let out = nn::train(&params, xs_train, ys_train, &TrainConfig { center_output: true, ..cfg.clone() })?;
            let pred = nn::forward(&out.params, xs_eval)?.sub(&f0_eval).expect("shapes match");
            (out, pred)
        }
        GdVariant::GdA => {
            let start = shared.expect("shared init prepared").clone();
            let member_draw = ntk::init_member(arch, seed, spec.init);
            let offset_train = nn::forward(&member_draw, xs_train)?;
            let offset_eval = nn::forward(&member_draw, xs_eval)?;
            let out = nn::train_with_offset(
                &start,
                xs_train,
                ys_train,
                &TrainConfig { center_output: true, ..cfg.clone() },
                Some(&offset_train),
            )?;
            let pred = nn::forward(&out.params, xs_eval)?
                .sub(shared_eval.expect("shared eval prepared"))
                .expect("shapes match")
                .add(&offset_eval)
                .expect("shapes match");
            (out, pred)
        }
        GdVariant::GdI => {
            let start = shared.expect("shared init prepared").clone();
            let member_draw = ntk::init_member(arch, seed, spec.init);
            let bundles = ntk::kernel_bundles(&member_draw, xs_train, xs_eval)?;
            let grams = shared_grams.expect("shared grams prepared");
            let channels = arch.output_dim();
            let mut offset_train = Matrix::zeros(xs_train.rows(), channels);
            let mut offset_eval = Matrix::zeros(xs_eval.rows(), channels);
            for k in 0..channels {
                let (g_train, g_eval) = custom_prior_g(&bundles[k], &grams[k], spec.jitter)?;
                for (i, v) in g_train.iter().enumerate() {
                    offset_train.set(i, k, *v);
                }
                for (i, v) in g_eval.iter().enumerate() {
                    offset_eval.set(i, k, *v);
                }
            }
            let out = nn::train_with_offset(
                &start,
                xs_train,
                ys_train,
                &TrainConfig { center_output: true, ..cfg.clone() },
                Some(&offset_train),
            )?;
            let pred = nn::forward(&out.params, xs_eval)?
                .sub(shared_eval.expect("shared eval prepared"))
                .expect("shapes match")
                .add(&offset_eval)
                .expect("shapes match");
            (out, pred)
        }
    };
    let report = GdMemberReport {
        seed,
        final_mse: outcome.final_mse,
        steps: outcome.steps,
        converged: outcome.converged,
    };
    Ok((eval_pred.into_vec(), report))
}

/// `||Theta_after - Theta_before||_F / ||Theta_before||_F` on the training
/// inputs, aggregated over the per-channel gram blocks.
pub fn relative_kernel_change(
    params_before: &MlpParams,
    params_after: &MlpParams,
    xs_train: &Matrix,
) -> Result<f64, GdError> {
    let channels = params_before.arch.output_dim();
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..channels {
        let before = ntk::empirical_ntk_channel(params_before, xs_train, xs_train, k)?;
        let after = ntk::empirical_ntk_channel(params_after, xs_train, xs_train, k)?;
        let diff = after.sub(&before).expect("same shapes");
        num += diff.frobenius_norm().powi(2);
        den += before.frobenius_norm().powi(2);
    }
    Ok((num / den).sqrt())
}
