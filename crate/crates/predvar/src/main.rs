//! Experiment runner: reproducible variance-decomposition experiments with
//! CSV/JSON reports and cached kernel artifacts.

use clap::{Parser, Subcommand};
use predvar::experiments::{self, KernelCache};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "predvar", version, about = "Deep-ensemble predictive-variance experiments")]
struct Cli {
    /// TOML config file; sections mirror the subcommand's config structure.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV/JSON reports and cached kernels.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Master seed; every run is fully determined by config + seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Variance fields of the kernel-model ensembles on the star problem.
    ToyStar,
    /// Width-scaling of the variance decomposition on an image subset.
    Scaling,
    /// OOD detection with trained ensembles, plus the trained-vs-kernel
    /// correspondence block.
    Ood,
    /// Linearization ratio across widths.
    Ratio,
    /// Closed-form kernel moments against Monte-Carlo estimates.
    ValidateAnalytic,
}

/// Top-level config file: one optional section per experiment.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(default)]
struct FileConfig {
    toy_star: Option<experiments::ToyStarConfig>,
    scaling: Option<experiments::ScalingConfig>,
    ood: Option<experiments::OodConfig>,
    ratio: Option<experiments::RatioConfig>,
    validate_analytic: Option<experiments::ValidateConfig>,
}

fn load_config(path: Option<&PathBuf>) -> Result<(FileConfig, String), String> {
    match path {
        None => Ok((FileConfig::default(), "default".into())),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            let cfg: FileConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
            let mut h = Sha256::new();
            h.update(text.as_bytes());
            let digest = h.finalize();
            let hash: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
            Ok((cfg, hash))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<(), String> {
    let (file_cfg, config_hash) = load_config(cli.config.as_ref())?;
    let out = &cli.out;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let cache = KernelCache::new(&out.join("cache")).map_err(|e| e.to_string())?;
    let seed = cli.seed;
    let err = |e: experiments::ExperimentError| e.to_string();

    let meta = |extra: serde_json::Value| {
        serde_json::json!({
            "master_seed": seed,
            "config_hash": config_hash,
            "report": extra,
        })
    };

    match &cli.command {
        Command::ToyStar => {
            let cfg = file_cfg.toy_star.unwrap_or_default();
            let report = experiments::run_toy_star(&cfg, seed).map_err(err)?;
            experiments::write_text(out, "toy-star-grid.csv", &experiments::toy_star_csv(&report)).map_err(err)?;
            let summary = meta(serde_json::json!({
                "angle_ratio_v_c": report.angle_ratio_v_c,
                "ray_spearman_mean": report.ray_spearman_mean,
                "ray_spearman_min": report.ray_spearman_min,
                "dataset_fingerprint": report.dataset_fingerprint,
                "ensemble_size": report.ensemble_size,
                "mean_kernel_samples": report.mean_kernel_samples,
                "flags": {
                    "angle_ratio_at_least_2": report.angle_ratio_v_c >= 2.0,
                    "v_a_monotone_along_rays": report.ray_spearman_mean >= 0.9,
                },
            }));
            experiments::write_text(out, "toy-star-summary.json", &pretty(&summary)).map_err(err)?;
            println!("toy-star: angle ratio {:.3}, ray spearman mean {:.3}", report.angle_ratio_v_c, report.ray_spearman_mean);
        }
        Command::Scaling => {
            let cfg = file_cfg.scaling.unwrap_or_default();
            let report = experiments::run_scaling(&cfg, seed, Some(&cache)).map_err(err)?;
            experiments::write_text(out, "scaling.csv", &experiments::scaling_csv(&report)).map_err(err)?;
            for r in &report.per_width_reports {
                let name = format!("variance-points-w{}.csv", r.width.unwrap_or(0));
                experiments::write_text(out, &name, &experiments::variance_points_csv(r)).map_err(err)?;
            }
            let summary = meta(experiments::scaling_summary(&report));
            experiments::write_text(out, "scaling-summary.json", &pretty(&summary)).map_err(err)?;
            println!(
                "scaling: slopes v_c {:.3} v_i {:.3} v_res {:.3} v_a {:.3}",
                report.slope_v_c, report.slope_v_i, report.slope_v_res, report.slope_v_a
            );
        }
        Command::Ood => {
            let cfg = file_cfg.ood.unwrap_or_default();
            let report = experiments::run_ood(&cfg, seed).map_err(err)?;
            experiments::write_text(out, "auroc.csv", &experiments::auroc_csv(&report.auroc)).map_err(err)?;
            let summary = meta(serde_json::json!({
                "variants": report.variants,
                "correspondence": report.correspondence,
                "dataset_fingerprint": report.dataset_fingerprint,
            }));
            experiments::write_text(out, "ood-summary.json", &pretty(&summary)).map_err(err)?;
            for v in &report.variants {
                println!("ood: {} accuracy {:.4} mean test variance {:.4e}", v.variant, v.test_accuracy, v.mean_test_variance);
            }
            for row in &report.auroc {
                println!("ood: auroc {} vs {} [{}] = {:.4}", row.in_dataset, row.out_dataset, row.variant, row.auroc);
            }
        }
        Command::Ratio => {
            let cfg = file_cfg.ratio.unwrap_or_default();
            let report = experiments::run_ratio(&cfg, seed, Some(&cache)).map_err(err)?;
            experiments::write_text(out, "ratio.csv", &experiments::ratio_csv(&report)).map_err(err)?;
            let summary = meta(serde_json::json!({
                "rows": report.rows,
                "growth": report.growth,
                "bounded": report.growth <= 2.0,
                "dataset_fingerprint": report.dataset_fingerprint,
            }));
            experiments::write_text(out, "ratio-summary.json", &pretty(&summary)).map_err(err)?;
            for r in &report.rows {
                println!("ratio: width {} R {:.4}", r.width, r.ratio);
            }
        }
        Command::ValidateAnalytic => {
            let cfg = file_cfg.validate_analytic.unwrap_or_default();
            let report = experiments::run_validate_analytic(&cfg, seed).map_err(err)?;
            experiments::write_text(out, "validate-analytic.csv", &experiments::validate_csv(&report)).map_err(err)?;
            let summary = meta(serde_json::json!({
                "max_abs_z": report.max_abs_z,
                "all_within_5_se": report.all_within_5_se,
                "convention": report.convention,
            }));
            experiments::write_text(out, "validate-analytic-summary.json", &pretty(&summary)).map_err(err)?;
            println!(
                "validate-analytic: {} checks, max |z| {:.3}, all within 5 se: {}",
                report.rows.len(),
                report.max_abs_z,
                report.all_within_5_se
            );
        }
    }
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes")
}
