//! Reproducible experiment drivers: the star toy problem, width-scaling of
//! the variance decomposition, out-of-distribution detection with trained
//! ensembles, the linearization ratio, and the closed-form moment validation.
//!
//! Every run is fully determined by its config and master seed. Member seeds
//! come from the disjoint role streams in [`crate::seeds`]; member `m` keeps
//! the same draws across variants and widths so paired comparisons cancel
//! sampling noise instead of accumulating it.

use crate::data::{self, Dataset, Split, TargetMode};
use crate::gd_models::{self, GdVariant, GdVariantSpec};
use crate::kernel_models::{build_kernel_ensemble, EnsemblePredictions, KernelEnsembleSpec, Variant};
use crate::linalg::Matrix;
use crate::metrics::{self, ScoreSet};
use crate::nn::{Activation, MlpArchitecture, TrainConfig};
use crate::ntk::{self, InitKind, KernelBundle, MeanKernels};
use crate::seeds;
use crate::variance::{self, VarianceReport};
use crate::{analytic, io};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] crate::kernel_models::ModelError),
    #[error(transparent)]
    Gd(#[from] gd_models::GdError),
    #[error(transparent)]
    Variance(#[from] variance::VarianceError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Ntk(#[from] ntk::NtkError),
    #[error(transparent)]
    Analytic(#[from] analytic::AnalyticError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error("config error: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, ExperimentError>;

pub const DEFAULT_JITTER: f64 = 1e-10;

fn default_train_cfg() -> TrainConfig {
    TrainConfig::default()
}

/// Optional on-disk cache for mean-kernel artifacts, keyed by content hash.
pub struct KernelCache {
    dir: PathBuf,
}

impl KernelCache {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("mk-{key}.bin"))
    }

    pub fn load(&self, key: &str) -> Option<Vec<MeanKernels>> {
        let path = self.path(key);
        if path.exists() {
            io::read_mean_kernels(&path).ok()
        } else {
            None
        }
    }

    pub fn store(&self, key: &str, mks: &[MeanKernels]) {
        let _ = io::write_mean_kernels(&self.path(key), mks);
    }
}

/// Content key for a mean-kernel computation.
pub fn mean_kernel_cache_key(
    arch: &MlpArchitecture,
    xs_train: &Matrix,
    xs_eval: &Matrix,
    member_seeds: &[u64],
    kind: InitKind,
) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&arch).expect("arch serializes"));
    for m in [xs_train, xs_eval] {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    for s in member_seeds {
        h.update(s.to_le_bytes());
    }
    h.update([matches!(kind, InitKind::ZeroBias) as u8]);
    let d = h.finalize();
    d[..12].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// toy star
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyStarConfig {
    pub arms: usize,
    pub radius: f64,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    pub ensemble_size: usize,
    /// 0 means `4 * ensemble_size`.
    pub mean_kernel_samples: usize,
    pub grid_n: usize,
    pub extent: f64,
    pub probe_radius: f64,
    pub probe_angles: usize,
    pub ray_count: usize,
    pub ray_radii: usize,
    pub jitter: f64,
    /// Zero-bias initialization matches the closed-form treatment of the toy
    /// problem, where the angle structure of the centered variance is exact.
    pub zero_bias: bool,
}

impl Default for ToyStarConfig {
    fn default() -> Self {
        Self {
            arms: 8,
            radius: 1.0,
            hidden: 512,
            depth: 2,
            activation: Activation::Relu,
            ensemble_size: 300,
            mean_kernel_samples: 0,
            grid_n: 41,
            extent: 4.0,
            probe_radius: 3.0,
            probe_angles: 72,
            ray_count: 16,
            ray_radii: 12,
            jitter: DEFAULT_JITTER,
            zero_bias: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub x1: f64,
    pub x2: f64,
    pub v_lin: f64,
    pub v_a: f64,
    pub v_c: f64,
    pub v_i: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyStarReport {
    pub grid: Vec<GridRow>,
    /// max/min of the centered-model variance over angles at the probe radius.
    pub angle_ratio_v_c: f64,
    /// Spearman correlation of the averaged-model variance with radius, per ray.
    pub ray_spearman_v_a: Vec<f64>,
    pub ray_spearman_mean: f64,
    pub ray_spearman_min: f64,
    pub dataset_fingerprint: String,
    pub ensemble_size: usize,
    pub mean_kernel_samples: usize,
    pub hidden: usize,
}

pub fn run_toy_star(cfg: &ToyStarConfig, master_seed: u64) -> Result<ToyStarReport> {
    let dataset = data::star_dataset(cfg.arms, cfg.radius, seeds::seed_for(master_seed, seeds::ROLE_DATA, 0))?;
    let arch = MlpArchitecture::mlp(2, cfg.hidden, cfg.depth, 1, cfg.activation);

    // evaluation points: grid, probe circle, rays
    let gn = cfg.grid_n;
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for i in 0..gn {
        for j in 0..gn {
            let x1 = -cfg.extent + 2.0 * cfg.extent * i as f64 / (gn - 1) as f64;
            let x2 = -cfg.extent + 2.0 * cfg.extent * j as f64 / (gn - 1) as f64;
            pts.push([x1, x2]);
        }
    }
    let circle_start = pts.len();
    for a in 0..cfg.probe_angles {
        let ang = 2.0 * std::f64::consts::PI * a as f64 / cfg.probe_angles as f64;
        pts.push([cfg.probe_radius * ang.cos(), cfg.probe_radius * ang.sin()]);
    }
    let rays_start = pts.len();
    let radii: Vec<f64> = (0..cfg.ray_radii)
        .map(|i| 0.5 + (cfg.extent - 0.5) * i as f64 / (cfg.ray_radii - 1) as f64)
        .collect();
    for r in 0..cfg.ray_count {
        let ang = 2.0 * std::f64::consts::PI * (r as f64 + 0.5) / cfg.ray_count as f64;
        for &rad in &radii {
            pts.push([rad * ang.cos(), rad * ang.sin()]);
        }
    }
    let mut xs_eval = Matrix::zeros(pts.len(), 2);
    for (i, p) in pts.iter().enumerate() {
        xs_eval.set(i, 0, p[0]);
        xs_eval.set(i, 1, p[1]);
    }

    let e = cfg.ensemble_size;
    let m = if cfg.mean_kernel_samples == 0 { 4 * e } else { cfg.mean_kernel_samples };
    let member_seeds = seeds::stream(master_seed, seeds::ROLE_ENSEMBLE, e);
    let functional_seeds = seeds::stream(master_seed, seeds::ROLE_FUNCTIONAL, e);
    let mk_seeds = seeds::stream(master_seed, seeds::ROLE_MEAN_KERNEL, m);
    let init = if cfg.zero_bias { InitKind::ZeroBias } else { InitKind::Standard };
    let mean = ntk::mean_kernels(&arch, &dataset.xs, &xs_eval, &mk_seeds, init)?;

    let spec = KernelEnsembleSpec {
        arch: &arch,
        xs_train: &dataset.xs,
        ys_train: &dataset.ys,
        xs_eval: &xs_eval,
        member_seeds: &member_seeds,
        functional_seeds: &functional_seeds,
        mean: Some(&mean),
        jitter: cfg.jitter,
        init,
    };
    let v_lin = variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::Lin)?)?.channel_sum;
    let v_a = variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinA)?)?.channel_sum;
    let v_c = variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinC)?)?.channel_sum;
    let v_i = variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinI)?)?.channel_sum;

    let grid = (0..gn * gn)
        .map(|i| GridRow {
            x1: pts[i][0],
            x2: pts[i][1],
            v_lin: v_lin[i],
            v_a: v_a[i],
            v_c: v_c[i],
            v_i: v_i[i],
        })
        .collect();

    let circle = &v_c[circle_start..circle_start + cfg.probe_angles];
    let max = circle.iter().cloned().fold(f64::MIN, f64::max);
    let min = circle.iter().cloned().fold(f64::MAX, f64::min);
    let angle_ratio_v_c = max / min.max(f64::MIN_POSITIVE);

    let mut ray_spearman_v_a = Vec::with_capacity(cfg.ray_count);
    for r in 0..cfg.ray_count {
        let start = rays_start + r * radii.len();
        let vals = &v_a[start..start + radii.len()];
        ray_spearman_v_a.push(metrics::spearman(&radii, vals)?);
    }
    let ray_spearman_mean = ray_spearman_v_a.iter().sum::<f64>() / ray_spearman_v_a.len() as f64;
    let ray_spearman_min = ray_spearman_v_a.iter().cloned().fold(f64::MAX, f64::min);

    Ok(ToyStarReport {
        grid,
        angle_ratio_v_c,
        ray_spearman_v_a,
        ray_spearman_mean,
        ray_spearman_min,
        dataset_fingerprint: dataset.fingerprint(),
        ensemble_size: e,
        mean_kernel_samples: m,
        hidden: cfg.hidden,
    })
}

// ---------------------------------------------------------------------------
// image-data assembly
// ---------------------------------------------------------------------------

/// Binary-task data: train set plus a concatenated evaluation batch with
/// named slices (in-distribution first).
struct BinarySetup {
    train: Dataset,
    xs_eval: Matrix,
}

fn binary_setup(
    dataset: &str,
    ood: &[String],
    n_train: usize,
    eval_in: usize,
    eval_ood: usize,
    master_seed: u64,
) -> Result<BinarySetup> {
    let root = data::data_root()?;
    let train_raw = data::binary_filter(&data::load_named(&root, dataset, Split::Train)?, 0, 1);
    let test_raw = data::binary_filter(&data::load_named(&root, dataset, Split::Test)?, 0, 1);
    let train = data::subset(&train_raw, n_train, seeds::seed_for(master_seed, seeds::ROLE_DATA, 0), true)?
        .into_dataset(2, TargetMode::BinaryPm1, &format!("{dataset}-bin{n_train}"))?;

    let test_sub = data::subset(&test_raw, eval_in, seeds::seed_for(master_seed, seeds::ROLE_DATA, 1), false)?;
    let mut blocks: Vec<(String, Matrix)> = vec![(dataset.to_string(), test_sub.images)];
    for (i, name) in ood.iter().enumerate() {
        let raw = data::load_named(&root, name, Split::Test)?;
        let sub = data::subset(&raw, eval_ood, seeds::seed_for(master_seed, seeds::ROLE_DATA, 2 + i as u64), false)?;
        blocks.push((name.clone(), sub.images));
    }
    let (xs_eval, _slices) = concat_blocks(&blocks);
    Ok(BinarySetup { train, xs_eval })
}

fn concat_blocks(blocks: &[(String, Matrix)]) -> (Matrix, Vec<(String, std::ops::Range<usize>)>) {
    let cols = blocks[0].1.cols();
    let total: usize = blocks.iter().map(|(_, m)| m.rows()).sum();
    let mut xs = Matrix::zeros(total, cols);
    let mut slices = Vec::new();
    let mut off = 0;
    for (name, m) in blocks {
        for i in 0..m.rows() {
            xs.row_mut(off + i).copy_from_slice(m.row(i));
        }
        slices.push((name.clone(), off..off + m.rows()));
        off += m.rows();
    }
    (xs, slices)
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub dataset: String,
    pub n_train: usize,
    pub widths: Vec<usize>,
    pub depth: usize,
    pub activation: Activation,
    pub ensemble_size: usize,
    /// 0 means `4 * ensemble_size`.
    pub mean_kernel_samples: usize,
    pub kernel_samples: usize,
    pub eval_points: usize,
    pub jitter: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            n_train: 100,
            widths: vec![64, 128, 256, 512, 1024],
            depth: 2,
            activation: Activation::Softplus,
            ensemble_size: 100,
            mean_kernel_samples: 400,
            kernel_samples: 40,
            eval_points: 300,
            jitter: DEFAULT_JITTER,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub width: usize,
    pub v_total: f64,
    pub v_a: f64,
    pub v_a_formula: f64,
    pub v_c: f64,
    pub v_i: f64,
    pub v_cor_abs: f64,
    pub v_res_abs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub slope_v_c: f64,
    pub slope_v_i: f64,
    pub slope_v_res: f64,
    pub slope_v_a: f64,
    /// Fits on fewer than 4 widths are flagged low confidence.
    pub low_confidence: bool,
    pub per_width_reports: Vec<VarianceReport>,
    pub dataset_fingerprint: String,
}

pub fn run_scaling(cfg: &ScalingConfig, master_seed: u64, cache: Option<&KernelCache>) -> Result<ScalingReport> {
    let setup = binary_setup(&cfg.dataset, &[], cfg.n_train, cfg.eval_points, 0, master_seed)?;
    let e = cfg.ensemble_size;
    let m = if cfg.mean_kernel_samples == 0 { 4 * e } else { cfg.mean_kernel_samples };
    let member_seeds = seeds::stream(master_seed, seeds::ROLE_ENSEMBLE, e);
    let functional_seeds = seeds::stream(master_seed, seeds::ROLE_FUNCTIONAL, e);
    let mk_seeds = seeds::stream(master_seed, seeds::ROLE_MEAN_KERNEL, m);

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &h in &cfg.widths {
        let arch = MlpArchitecture::mlp(setup.train.xs.cols(), h, cfg.depth, 1, cfg.activation);
        let (mean, samples) = mean_kernels_cached(
            &arch,
            &setup.train.xs,
            &setup.xs_eval,
            &mk_seeds,
            InitKind::Standard,
            cfg.kernel_samples,
            cache,
        )?;

        let spec = KernelEnsembleSpec {
            arch: &arch,
            xs_train: &setup.train.xs,
            ys_train: &setup.train.ys,
            xs_eval: &setup.xs_eval,
            member_seeds: &member_seeds,
            functional_seeds: &functional_seeds,
            mean: Some(&mean),
            jitter: cfg.jitter,
            init: InitKind::Standard,
        };
        let lin_a = build_kernel_ensemble(&spec, Variant::LinA)?;
        let lin_c = build_kernel_ensemble(&spec, Variant::LinC)?;
        let lin_i = build_kernel_ensemble(&spec, Variant::LinI)?;
        let lin_d = build_kernel_ensemble(&spec, Variant::LinD)?;

        let mut report = variance::decompose(&lin_a, &lin_c, &lin_i, &lin_d, &mean, &samples, cfg.jitter)?;
        report.width = Some(h);
        report.depth = Some(cfg.depth);
        report.dataset = Some(setup.train.name.clone());

        let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(ScalingRow {
            width: h,
            v_total: mean_of(&report.v_total),
            v_a: mean_of(&report.v_a),
            v_a_formula: mean_of(&report.v_a_formula),
            v_c: mean_of(&report.v_c),
            v_i: mean_of(&report.v_i),
            v_cor_abs: mean_of(&report.v_cor).abs(),
            v_res_abs: mean_of(&report.v_res).abs(),
        });
        reports.push(report);
    }

    let widths_f: Vec<f64> = rows.iter().map(|r| r.width as f64).collect();
    let fit = |sel: &dyn Fn(&ScalingRow) -> f64| -> Result<f64> {
        let ys: Vec<f64> = rows.iter().map(|r| sel(r).max(f64::MIN_POSITIVE)).collect();
        Ok(variance::loglog_slope(&widths_f, &ys)?)
    };
    Ok(ScalingReport {
        slope_v_c: fit(&|r| r.v_c)?,
        slope_v_i: fit(&|r| r.v_i)?,
        slope_v_res: fit(&|r| r.v_res_abs)?,
        slope_v_a: fit(&|r| r.v_a)?,
        low_confidence: rows.len() < 4,
        rows,
        per_width_reports: reports,
        dataset_fingerprint: setup.train.fingerprint(),
    })
}

#[allow(clippy::too_many_arguments)]
fn mean_kernels_cached(
    arch: &MlpArchitecture,
    xs_train: &Matrix,
    xs_eval: &Matrix,
    mk_seeds: &[u64],
    kind: InitKind,
    keep_samples: usize,
    cache: Option<&KernelCache>,
) -> Result<(Vec<MeanKernels>, Vec<Vec<KernelBundle>>)> {
    // sample bundles are cheap relative to the mean and are rebuilt; only the
    // mean kernels are cached
    let key = cache.map(|c| (c, mean_kernel_cache_key(arch, xs_train, xs_eval, mk_seeds, kind)));
    if let Some((c, k)) = &key {
        if let Some(mean) = c.load(k) {
            let samples = rebuild_samples(arch, xs_train, xs_eval, mk_seeds, kind, keep_samples)?;
            return Ok((mean, samples));
        }
    }
    let (mean, samples) = ntk::mean_kernels_with_samples(arch, xs_train, xs_eval, mk_seeds, kind, keep_samples)?;
    if let Some((c, k)) = &key {
        c.store(k, &mean);
    }
    Ok((mean, samples))
}

fn rebuild_samples(
    arch: &MlpArchitecture,
    xs_train: &Matrix,
    xs_eval: &Matrix,
    mk_seeds: &[u64],
    kind: InitKind,
    keep: usize,
) -> Result<Vec<Vec<KernelBundle>>> {
    let mut out = Vec::with_capacity(keep);
    for &s in mk_seeds.iter().take(keep) {
        let params = ntk::init_member(arch, s, kind);
        out.push(ntk::kernel_bundles(&params, xs_train, xs_eval)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// linearization ratio
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RatioConfig {
    pub dataset: String,
    pub ood: Vec<String>,
    pub n_train: usize,
    pub widths: Vec<usize>,
    pub depth: usize,
    pub activation: Activation,
    pub ensemble_size: usize,
    pub mean_kernel_samples: usize,
    pub eval_points: usize,
    pub ood_eval_points: usize,
    pub train: TrainConfig,
    pub jitter: f64,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            ood: vec!["fashion".into(), "kmnist".into()],
            n_train: 100,
            widths: vec![128, 256, 512, 1024],
            depth: 2,
            activation: Activation::Softplus,
            ensemble_size: 50,
            mean_kernel_samples: 0,
            eval_points: 100,
            ood_eval_points: 50,
            train: default_train_cfg(),
            jitter: DEFAULT_JITTER,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub width: usize,
    pub ratio: f64,
    pub unconverged_members: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
    /// `R(largest width) / R(smallest width)`.
    pub growth: f64,
    pub dataset_fingerprint: String,
}

pub fn run_ratio(cfg: &RatioConfig, master_seed: u64, cache: Option<&KernelCache>) -> Result<RatioReport> {
    let setup = binary_setup(
        &cfg.dataset,
        &cfg.ood,
        cfg.n_train,
        cfg.eval_points,
        cfg.ood_eval_points,
        master_seed,
    )?;
    let e = cfg.ensemble_size;
    let m = if cfg.mean_kernel_samples == 0 { 4 * e } else { cfg.mean_kernel_samples };
    let member_seeds = seeds::stream(master_seed, seeds::ROLE_ENSEMBLE, e);
    let functional_seeds = seeds::stream(master_seed, seeds::ROLE_FUNCTIONAL, e);
    let mk_seeds = seeds::stream(master_seed, seeds::ROLE_MEAN_KERNEL, m);

    let mut rows = Vec::new();
    for &h in &cfg.widths {
        let arch = MlpArchitecture::mlp(setup.train.xs.cols(), h, cfg.depth, 1, cfg.activation);
        let (mean, _) = mean_kernels_cached(&arch, &setup.train.xs, &setup.xs_eval, &mk_seeds, InitKind::Standard, 0, cache)?;
        let spec = KernelEnsembleSpec {
            arch: &arch,
            xs_train: &setup.train.xs,
            ys_train: &setup.train.ys,
            xs_eval: &setup.xs_eval,
            member_seeds: &member_seeds,
            functional_seeds: &functional_seeds,
            mean: Some(&mean),
            jitter: cfg.jitter,
            init: InitKind::Standard,
        };
        let v_lin = variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::Lin)?)?.channel_sum;
        let v_c = variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinC)?)?.channel_sum;
        let v_i = variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinI)?)?.channel_sum;

        let gd_spec = GdVariantSpec {
            variant: GdVariant::Gd,
            shared_seed: None,
            member_seeds: member_seeds.clone(),
            train_cfg: cfg.train.clone(),
            jitter: cfg.jitter,
            init: InitKind::Standard,
        };
        let gd = gd_models::build_gd_ensemble(&gd_spec, &arch, &setup.train.xs, &setup.train.ys, &setup.xs_eval)?;
        let v_gd = variance::ensemble_variance(&gd.predictions)?.channel_sum;
        let unconverged = gd.members.iter().filter(|r| !r.converged).count();

        let ratio = variance::linearization_ratio(&v_lin, &v_gd, &v_c, &v_i, variance::RATIO_FLOOR)?;
        rows.push(RatioRow { width: h, ratio, unconverged_members: unconverged });
    }
    let growth = rows.last().unwrap().ratio / rows.first().unwrap().ratio;
    Ok(RatioReport { rows, growth, dataset_fingerprint: setup.train.fingerprint() })
}

// ---------------------------------------------------------------------------
// relative kernel change
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelChangeConfig {
    pub dataset: String,
    pub n_train: usize,
    pub widths: Vec<usize>,
    pub depth: usize,
    pub activation: Activation,
    /// Trained members averaged per width.
    pub members: usize,
    pub train: TrainConfig,
}

impl Default for KernelChangeConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            n_train: 500,
            widths: vec![512, 1024, 2048, 4096],
            depth: 3,
            activation: Activation::Softplus,
            members: 1,
            train: default_train_cfg(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelChangeRow {
    pub width: usize,
    pub relative_change: f64,
    pub final_mse: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelChangeReport {
    pub rows: Vec<KernelChangeRow>,
    /// `change(2h) / change(h)` per width doubling.
    pub doubling_factors: Vec<f64>,
    pub monotone_decreasing: bool,
    pub dataset_fingerprint: String,
}

/// Trains members at each width and measures the relative Frobenius change of
/// the empirical tangent kernel on the training inputs.
pub fn run_kernel_change(cfg: &KernelChangeConfig, master_seed: u64) -> Result<KernelChangeReport> {
    let setup = binary_setup(&cfg.dataset, &[], cfg.n_train, 1, 0, master_seed)?;
    let member_seeds = seeds::stream(master_seed, seeds::ROLE_ENSEMBLE, cfg.members);
    let mut rows = Vec::new();
    for &h in &cfg.widths {
        let arch = MlpArchitecture::mlp(setup.train.xs.cols(), h, cfg.depth, 1, cfg.activation);
        let mut change = 0.0;
        let mut final_mse = 0.0f64;
        let mut converged = true;
        for &seed in &member_seeds {
            let params = ntk::init_member(&arch, seed, InitKind::Standard);
            let out = crate::nn::train(&params, &setup.train.xs, &setup.train.ys, &cfg.train)
                .map_err(|e| gd_models::GdError::Nn(e))?;
            change += gd_models::relative_kernel_change(&params, &out.params, &setup.train.xs)?;
            final_mse = final_mse.max(out.final_mse);
            converged &= out.converged;
        }
        rows.push(KernelChangeRow {
            width: h,
            relative_change: change / cfg.members as f64,
            final_mse,
            converged,
        });
    }
    let doubling_factors: Vec<f64> = rows.windows(2).map(|w| w[1].relative_change / w[0].relative_change).collect();
    let monotone_decreasing = rows.windows(2).all(|w| w[1].relative_change < w[0].relative_change);
    Ok(KernelChangeReport {
        rows,
        doubling_factors,
        monotone_decreasing,
        dataset_fingerprint: setup.train.fingerprint(),
    })
}

// ---------------------------------------------------------------------------
// out-of-distribution detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OodConfig {
    pub dataset: String,
    pub ood: Vec<String>,
    pub n_train: usize,
    pub classes: usize,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    pub ensemble_size: usize,
    pub eval_points: usize,
    pub train: TrainConfig,
    pub jitter: f64,
    /// Run the trained-vs-linearized correspondence block at this train size
    /// (0 disables it).
    pub correspondence_n: usize,
    pub correspondence_eval_points: usize,
    pub correspondence_mean_kernel_samples: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            ood: vec!["fashion".into(), "kmnist".into()],
            n_train: 1000,
            classes: 10,
            hidden: 512,
            depth: 3,
            activation: Activation::Softplus,
            ensemble_size: 10,
            eval_points: 1000,
            train: default_train_cfg(),
            jitter: DEFAULT_JITTER,
            correspondence_n: 200,
            correspondence_eval_points: 200,
            correspondence_mean_kernel_samples: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AurocRow {
    pub in_dataset: String,
    pub out_dataset: String,
    pub variant: String,
    pub auroc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub test_accuracy: f64,
    pub accuracy_ties: usize,
    pub mean_test_variance: f64,
    pub unconverged_members: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrespondenceRow {
    pub pair: String,
    pub pearson: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OodReport {
    pub variants: Vec<VariantSummary>,
    pub auroc: Vec<AurocRow>,
    pub correspondence: Vec<CorrespondenceRow>,
    pub dataset_fingerprint: String,
}

pub fn run_ood(cfg: &OodConfig, master_seed: u64) -> Result<OodReport> {
    let root = data::data_root()?;
    let train_raw = data::load_named(&root, &cfg.dataset, Split::Train)?;
    let test_raw = data::load_named(&root, &cfg.dataset, Split::Test)?;
    let train = data::subset(&train_raw, cfg.n_train, seeds::seed_for(master_seed, seeds::ROLE_DATA, 0), true)?
        .into_dataset(cfg.classes, TargetMode::CenteredOnehot, &format!("{}-{}", cfg.dataset, cfg.n_train))?;

    let test_sub = data::subset(&test_raw, cfg.eval_points, seeds::seed_for(master_seed, seeds::ROLE_DATA, 1), false)?;
    let test_labels = test_sub.labels.clone();
    let mut blocks: Vec<(String, Matrix)> = vec![(cfg.dataset.clone(), test_sub.images)];
    for (i, name) in cfg.ood.iter().enumerate() {
        let raw = data::load_named(&root, name, Split::Test)?;
        let sub = data::subset(&raw, cfg.eval_points, seeds::seed_for(master_seed, seeds::ROLE_DATA, 2 + i as u64), false)?;
        blocks.push((name.clone(), sub.images));
    }
    let (xs_eval, slices) = concat_blocks(&blocks);

    let arch = MlpArchitecture::mlp(train.xs.cols(), cfg.hidden, cfg.depth, cfg.classes, cfg.activation);
    let member_seeds = seeds::stream(master_seed, seeds::ROLE_ENSEMBLE, cfg.ensemble_size);
    let shared_seed = seeds::seed_for(master_seed, seeds::ROLE_SHARED, 0);

    let mut variants = Vec::new();
    let mut auroc_rows = Vec::new();
    let test_range = slices[0].1.clone();
    for variant in [GdVariant::Gd, GdVariant::GdC, GdVariant::GdA] {
        let spec = GdVariantSpec {
            variant,
            shared_seed: Some(shared_seed),
            member_seeds: member_seeds.clone(),
            train_cfg: cfg.train.clone(),
            jitter: cfg.jitter,
            init: InitKind::Standard,
        };
        let ens = gd_models::build_gd_ensemble(&spec, &arch, &train.xs, &train.ys, &xs_eval)?;
        let scores = variance::ensemble_variance(&ens.predictions)?.channel_sum;

        let test_scores = scores[test_range.clone()].to_vec();
        let acc = accuracy_on_slice(&ens.predictions, &test_range, &test_labels)?;
        variants.push(VariantSummary {
            variant: variant.to_variant().as_str().to_string(),
            test_accuracy: acc.accuracy,
            accuracy_ties: acc.ties,
            mean_test_variance: test_scores.iter().sum::<f64>() / test_scores.len() as f64,
            unconverged_members: ens.members.iter().filter(|r| !r.converged).count(),
        });
        for (name, range) in &slices[1..] {
            let value = metrics::auroc(&ScoreSet {
                in_scores: test_scores.clone(),
                out_scores: scores[range.clone()].to_vec(),
                in_label: cfg.dataset.clone(),
                out_label: name.clone(),
            })?;
            auroc_rows.push(AurocRow {
                in_dataset: cfg.dataset.clone(),
                out_dataset: name.clone(),
                variant: variant.to_variant().as_str().to_string(),
                auroc: value,
            });
        }
    }

    let correspondence = if cfg.correspondence_n > 0 {
        run_correspondence(cfg, master_seed, &root)?
    } else {
        Vec::new()
    };

    Ok(OodReport {
        variants,
        auroc: auroc_rows,
        correspondence,
        dataset_fingerprint: train.fingerprint(),
    })
}

fn accuracy_on_slice(
    preds: &EnsemblePredictions,
    range: &std::ops::Range<usize>,
    labels: &[u8],
) -> Result<metrics::AccuracyReport> {
    // restrict the tensor to the slice
    let mut sliced = EnsemblePredictions::new(
        preds.variant,
        preds.members,
        range.len(),
        preds.channels,
        preds.member_seeds.clone(),
    );
    for m in 0..preds.members {
        for (local, global) in range.clone().enumerate() {
            for k in 0..preds.channels {
                sliced.set(m, local, k, preds.get(m, global, k));
            }
        }
    }
    Ok(metrics::ensemble_accuracy(&sliced, labels)?)
}

/// Pearson correlation between per-point variance tables of trained and
/// kernel ensembles, for the plain / centered / averaged pairs.
fn run_correspondence(cfg: &OodConfig, master_seed: u64, root: &Path) -> Result<Vec<CorrespondenceRow>> {
    let train_raw = data::load_named(root, &cfg.dataset, Split::Train)?;
    let test_raw = data::load_named(root, &cfg.dataset, Split::Test)?;
    let train = data::subset(&train_raw, cfg.correspondence_n, seeds::seed_for(master_seed, seeds::ROLE_DATA, 10), true)?
        .into_dataset(cfg.classes, TargetMode::CenteredOnehot, &format!("{}-corr", cfg.dataset))?;
    let eval_sub = data::subset(&test_raw, cfg.correspondence_eval_points, seeds::seed_for(master_seed, seeds::ROLE_DATA, 11), false)?;
    let xs_eval = eval_sub.images;

    let arch = MlpArchitecture::mlp(train.xs.cols(), cfg.hidden, cfg.depth, cfg.classes, cfg.activation);
    let member_seeds = seeds::stream(master_seed, seeds::ROLE_ENSEMBLE, cfg.ensemble_size);
    let shared_seed = seeds::seed_for(master_seed, seeds::ROLE_SHARED, 0);
    let mk_seeds = seeds::stream(master_seed, seeds::ROLE_MEAN_KERNEL, cfg.correspondence_mean_kernel_samples);
    let mean = ntk::mean_kernels(&arch, &train.xs, &xs_eval, &mk_seeds, InitKind::Standard)?;

    // functional draws reuse the member stream so trained member m and
    // kernel member m share their initialization draw exactly
    let kspec = KernelEnsembleSpec {
        arch: &arch,
        xs_train: &train.xs,
        ys_train: &train.ys,
        xs_eval: &xs_eval,
        member_seeds: &member_seeds,
        functional_seeds: &member_seeds,
        mean: Some(&mean),
        jitter: cfg.jitter,
        init: InitKind::Standard,
    };

    let mut out = Vec::new();
    for (gd_variant, lin_variant, label) in [
        (GdVariant::Gd, Variant::Lin, "plain"),
        (GdVariant::GdC, Variant::LinC, "centered"),
        (GdVariant::GdA, Variant::LinA, "averaged"),
    ] {
        let spec = GdVariantSpec {
            variant: gd_variant,
            shared_seed: Some(shared_seed),
            member_seeds: member_seeds.clone(),
            train_cfg: cfg.train.clone(),
            jitter: cfg.jitter,
            init: InitKind::Standard,
        };
        let gd = gd_models::build_gd_ensemble(&spec, &arch, &train.xs, &train.ys, &xs_eval)?;
        let v_gd = variance::ensemble_variance(&gd.predictions)?.channel_sum;
        let lin = build_kernel_ensemble(&kspec, lin_variant)?;
        let v_lin = variance::ensemble_variance(&lin)?.channel_sum;
        out.push(CorrespondenceRow {
            pair: label.to_string(),
            pearson: metrics::pearson(&v_gd, &v_lin)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// analytic validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateConfig {
    pub triples: usize,
    pub draws: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self { triples: 20, draws: 1_000_000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCheckRow {
    pub triple: usize,
    pub d: usize,
    pub theta: f64,
    pub field: &'static str,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConventionReport {
    /// Mean tangent-kernel entry with the explicit finite-width scale factors.
    pub theta_mean_finite_sum: f64,
    /// The same entry without them.
    pub theta_mean_unscaled: f64,
    /// Monte-Carlo estimate of the mean tangent-kernel entry.
    pub theta_mean_mc: f64,
    pub theta_mean_mc_se: f64,
    /// Output-kernel entry, both conventions, against Monte Carlo.
    pub nngp_finite_sum: f64,
    pub nngp_unscaled: f64,
    pub nngp_mc: f64,
    pub nngp_mc_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateReport {
    pub rows: Vec<MomentCheckRow>,
    pub max_abs_z: f64,
    pub all_within_5_se: bool,
    pub convention: ConventionReport,
}

pub fn run_validate_analytic(cfg: &ValidateConfig, master_seed: u64) -> Result<ValidateReport> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeds::seed_for(master_seed, seeds::ROLE_DATA, 42));
    let dims = [2usize, 3, 4, 8, 16, 32];
    let mut rows = Vec::new();
    for t in 0..cfg.triples {
        let d = dims[t % dims.len()];
        let scale_x = rng.gen_range(0.5..1.5);
        let scale_xp = rng.gen_range(0.5..1.5);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xp: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let x: Vec<f64> = x.iter().map(|v| v / norm(&x) * scale_x).collect();
        let xp: Vec<f64> = xp.iter().map(|v| v / norm(&xp) * scale_xp).collect();

        let inp = analytic::ReluMomentInputs::new(&x, &xp)?;
        let closed = analytic::relu_moments(&inp);
        let mc = analytic::mc_relu_moments(&x, &xp, cfg.draws, seeds::seed_for(master_seed, seeds::ROLE_MEAN_KERNEL, t as u64))?;
        for (field, cf, est, se) in analytic::moment_comparison(&closed, &mc) {
            let z = (cf - est) / se.max(f64::MIN_POSITIVE);
            rows.push(MomentCheckRow {
                triple: t,
                d,
                theta: inp.theta,
                field,
                closed_form: cf,
                monte_carlo: est,
                std_error: se,
                z,
            });
        }
    }
    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0f64, f64::max);

    // width-level convention check: the mean tangent kernel and output kernel
    // of small zero-bias members against both bookkeeping conventions
    let convention = convention_check(master_seed)?;

    Ok(ValidateReport { rows, max_abs_z, all_within_5_se: max_abs_z <= 5.0, convention })
}

fn convention_check(master_seed: u64) -> Result<ConventionReport> {
    let sigma_w = std::f64::consts::SQRT_2;
    let x = vec![0.8, 0.3];
    let xp = vec![-0.2, 0.9];
    let h = 64;
    let m = 3000;
    let arch = MlpArchitecture::mlp(2, h, 2, 1, Activation::Relu);
    let mut xs = Matrix::zeros(2, 2);
    xs.row_mut(0).copy_from_slice(&x);
    xs.row_mut(1).copy_from_slice(&xp);
    let mut theta_vals = Vec::with_capacity(m);
    let mut k_vals = Vec::with_capacity(m);
    for i in 0..m {
        let params = ntk::init_member(&arch, seeds::seed_for(master_seed, seeds::ROLE_FUNCTIONAL, i as u64), InitKind::ZeroBias);
        let g = ntk::empirical_ntk(&params, &xs, &xs)?;
        theta_vals.push(g.get(0, 1));
        let f = crate::nn::forward(&params, &xs).map_err(ntk::NtkError::from)?;
        k_vals.push(f.get(0, 0) * f.get(1, 0));
    }
    let mean_se = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (theta_mc, theta_se) = mean_se(&theta_vals);
    let (k_mc, k_se) = mean_se(&k_vals);

    let inp = analytic::ReluMomentInputs::new(&x, &xp)?;
    let moments = analytic::relu_moments(&inp);
    let cross = 1.0 + sigma_w * sigma_w * (x[0] * xp[0] + x[1] * xp[1]) / 2.0;
    Ok(ConventionReport {
        theta_mean_finite_sum: analytic::theta_mean(&x, &xp, sigma_w)?,
        theta_mean_unscaled: 1.0 + moments.e_phiphi + cross * moments.e_dphidphi,
        theta_mean_mc: theta_mc,
        theta_mean_mc_se: theta_se,
        nngp_finite_sum: analytic::nngp_mean(&x, &xp, sigma_w)?,
        nngp_unscaled: analytic::nngp_mean_unscaled(&x, &xp, sigma_w)?,
        nngp_mc: k_mc,
        nngp_mc_se: k_se,
    })
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

pub fn fmt(v: f64) -> String {
    io::fmt_f64(v)
}

pub fn toy_star_csv(r: &ToyStarReport) -> String {
    let rows: Vec<Vec<String>> = r
        .grid
        .iter()
        .map(|g| vec![fmt(g.x1), fmt(g.x2), fmt(g.v_lin), fmt(g.v_a), fmt(g.v_c), fmt(g.v_i)])
        .collect();
    io::csv_table(&["x1", "x2", "v_lin", "v_a", "v_c", "v_i"], &rows)
}

pub fn scaling_csv(r: &ScalingReport) -> String {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|s| {
            vec![
                s.width.to_string(),
                fmt(s.v_total),
                fmt(s.v_a),
                fmt(s.v_a_formula),
                fmt(s.v_c),
                fmt(s.v_i),
                fmt(s.v_cor_abs),
                fmt(s.v_res_abs),
            ]
        })
        .collect();
    io::csv_table(
        &["width", "v_total", "v_a", "v_a_formula", "v_c", "v_i", "v_cor_abs", "v_res_abs"],
        &rows,
    )
}

pub fn variance_points_csv(r: &VarianceReport) -> String {
    let rows: Vec<Vec<String>> = (0..r.v_total.len())
        .map(|i| {
            vec![
                i.to_string(),
                fmt(r.v_total[i]),
                fmt(r.v_a[i]),
                fmt(r.v_c[i]),
                fmt(r.v_i[i]),
                fmt(r.v_cor[i]),
                fmt(r.v_res[i]),
            ]
        })
        .collect();
    io::csv_table(&["point_index", "v_total", "v_a", "v_c", "v_i", "v_cor", "v_res"], &rows)
}

pub fn auroc_csv(rows: &[AurocRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.in_dataset.clone(), r.out_dataset.clone(), r.variant.clone(), fmt(r.auroc)])
        .collect();
    io::csv_table(&["in_dataset", "out_dataset", "variant", "auroc"], &body)
}

pub fn ratio_csv(r: &RatioReport) -> String {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|s| vec![s.width.to_string(), fmt(s.ratio), s.unconverged_members.to_string()])
        .collect();
    io::csv_table(&["width", "ratio", "unconverged_members"], &rows)
}

pub fn validate_csv(r: &ValidateReport) -> String {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|s| {
            vec![
                s.triple.to_string(),
                s.d.to_string(),
                fmt(s.theta),
                s.field.to_string(),
                fmt(s.closed_form),
                fmt(s.monte_carlo),
                fmt(s.std_error),
                fmt(s.z),
            ]
        })
        .collect();
    io::csv_table(
        &["triple", "d", "theta", "field", "closed_form", "monte_carlo", "std_error", "z"],
        &rows,
    )
}

/// JSON summary with acceptance-window flags for the scaling experiment.
pub fn scaling_summary(r: &ScalingReport) -> serde_json::Value {
    serde_json::json!({
        "slope_v_c": r.slope_v_c,
        "slope_v_i": r.slope_v_i,
        "slope_v_res": r.slope_v_res,
        "slope_v_a": r.slope_v_a,
        "low_confidence": r.low_confidence,
        "dataset_fingerprint": r.dataset_fingerprint,
        "flags": {
            "v_c_slope_in_window": (-1.3..=-0.7).contains(&r.slope_v_c),
            "v_i_slope_in_window": (-1.3..=-0.7).contains(&r.slope_v_i),
            "v_res_slope_in_window": (-2.5..=-1.5).contains(&r.slope_v_res),
            "v_a_slope_small": r.slope_v_a.abs() <= 0.3,
        },
        "rows": r.rows.iter().map(|row| serde_json::json!({
            "width": row.width,
            "v_total": row.v_total,
            "v_a": row.v_a,
            "v_a_formula": row.v_a_formula,
            "v_c": row.v_c,
            "v_i": row.v_i,
            "v_cor_abs": row.v_cor_abs,
            "v_res_abs": row.v_res_abs,
        })).collect::<Vec<_>>(),
    })
}

/// Writes `name` under `dir`, creating the directory if needed.
pub fn write_text(dir: &Path, name: &str, content: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io::IoError::from)?;
    std::fs::write(dir.join(name), content).map_err(io::IoError::from)?;
    Ok(())
}

/// Stable map used in JSON summaries.
pub type JsonMap = BTreeMap<String, serde_json::Value>;
