//! Browser demo: interactive variance fields of kernel-model ensembles and
//! closed-form single-point variance maps, computed in WebAssembly.
//!
//! Build with `wasm-pack build --target web crates/predvar-wasm` and serve
//! `crates/predvar-wasm/www/` next to the generated `pkg/` directory.

use predvar::analytic;
use predvar::data;
use predvar::kernel_models::{build_kernel_ensemble, KernelEnsembleSpec, Variant};
use predvar::linalg::Matrix;
use predvar::nn::{Activation, MlpArchitecture};
use predvar::ntk::{self, InitKind};
use predvar::seeds;
use predvar::variance;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn err_to_js<E: std::fmt::Display>(e: E) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Closed-form variance fields for a single training point at `(r, 0)` with
/// target `+1`, evaluated on a `grid_n x grid_n` window of half-width
/// `extent`. Returns three concatenated row-major grids: `v_a`, `v_c`, `v_i`.
#[wasm_bindgen]
pub fn analytic_field(radius: f64, hidden: usize, grid_n: usize, extent: f64) -> Result<Vec<f64>, JsValue> {
    if grid_n < 2 {
        return Err(JsValue::from_str("grid_n must be at least 2"));
    }
    let x_train = [radius, 0.0];
    let sigma_w = std::f64::consts::SQRT_2;
    let mut out = vec![0.0; 3 * grid_n * grid_n];
    let (va, rest) = out.split_at_mut(grid_n * grid_n);
    let (vc, vi) = rest.split_at_mut(grid_n * grid_n);
    for i in 0..grid_n {
        for j in 0..grid_n {
            let x2 = -extent + 2.0 * extent * i as f64 / (grid_n - 1) as f64;
            let x1 = -extent + 2.0 * extent * j as f64 / (grid_n - 1) as f64;
            // nudge exact zeros so the angle is defined
            let q = [if x1 == 0.0 && x2 == 0.0 { 1e-9 } else { x1 }, x2];
            let v = analytic::analytic_variance_terms(&x_train, &q, hidden, sigma_w).map_err(err_to_js)?;
            let idx = i * grid_n + j;
            va[idx] = v.v_a;
            vc[idx] = v.v_c;
            vi[idx] = v.v_i;
        }
    }
    Ok(out)
}

/// Empirical variance field of one kernel-model ensemble on the star problem.
/// `variant` is one of `lin`, `lin_a`, `lin_c`, `lin_i`. Returns a row-major
/// `grid_n x grid_n` grid of the per-point ensemble variance.
#[wasm_bindgen]
pub fn star_field(
    arms: usize,
    radius: f64,
    hidden: usize,
    ensemble: usize,
    grid_n: usize,
    extent: f64,
    seed: u64,
    variant: &str,
) -> Result<Vec<f64>, JsValue> {
    let variant = match variant {
        "lin" => Variant::Lin,
        "lin_a" => Variant::LinA,
        "lin_c" => Variant::LinC,
        "lin_i" => Variant::LinI,
        other => return Err(JsValue::from_str(&format!("unknown variant {other}"))),
    };
    let dataset = data::star_dataset(arms, radius, seed).map_err(err_to_js)?;
    let arch = MlpArchitecture::mlp(2, hidden, 2, 1, Activation::Relu);
    let mut xs_eval = Matrix::zeros(grid_n * grid_n, 2);
    for i in 0..grid_n {
        for j in 0..grid_n {
            let x2 = -extent + 2.0 * extent * i as f64 / (grid_n - 1) as f64;
            let x1 = -extent + 2.0 * extent * j as f64 / (grid_n - 1) as f64;
            xs_eval.set(i * grid_n + j, 0, x1);
            xs_eval.set(i * grid_n + j, 1, x2);
        }
    }
    let member_seeds = seeds::stream(seed, seeds::ROLE_ENSEMBLE, ensemble);
    let functional_seeds = seeds::stream(seed, seeds::ROLE_FUNCTIONAL, ensemble);
    let needs_mean = matches!(variant, Variant::LinA | Variant::LinI);
    let mean = if needs_mean {
        let mk_seeds = seeds::stream(seed, seeds::ROLE_MEAN_KERNEL, 2 * ensemble);
        Some(ntk::mean_kernels(&arch, &dataset.xs, &xs_eval, &mk_seeds, InitKind::ZeroBias).map_err(err_to_js)?)
    } else {
        None
    };
    let spec = KernelEnsembleSpec {
        arch: &arch,
        xs_train: &dataset.xs,
        ys_train: &dataset.ys,
        xs_eval: &xs_eval,
        member_seeds: &member_seeds,
        functional_seeds: &functional_seeds,
        mean: mean.as_deref(),
        jitter: 1e-10,
        init: InitKind::ZeroBias,
    };
    let ens = build_kernel_ensemble(&spec, variant).map_err(err_to_js)?;
    let v = variance::ensemble_variance(&ens).map_err(err_to_js)?;
    Ok(v.channel_sum)
}

#[derive(Serialize)]
struct ScalingPoint {
    width: usize,
    v_c: f64,
    v_i: f64,
    v_a: f64,
}

#[derive(Serialize)]
struct ScalingCurve {
    points: Vec<ScalingPoint>,
    slope_v_c: f64,
    slope_v_i: f64,
    slope_v_a: f64,
}

/// Width-scaling of the disentangled variance terms on the star problem,
/// averaged over a small probe circle. Returns JSON with per-width means and
/// fitted log-log slopes.
#[wasm_bindgen]
pub fn scaling_curve(
    arms: usize,
    radius: f64,
    ensemble: usize,
    seed: u64,
    min_width_log2: usize,
    max_width_log2: usize,
) -> Result<String, JsValue> {
    if min_width_log2 >= max_width_log2 || max_width_log2 > 11 {
        return Err(JsValue::from_str("widths must satisfy min < max <= 11 (2048)"));
    }
    let dataset = data::star_dataset(arms, radius, seed).map_err(err_to_js)?;
    // probe circle between data radius and twice the data radius
    let probe = 24usize;
    let mut xs_eval = Matrix::zeros(probe, 2);
    for a in 0..probe {
        let ang = 2.0 * std::f64::consts::PI * a as f64 / probe as f64;
        xs_eval.set(a, 0, 1.5 * radius * ang.cos());
        xs_eval.set(a, 1, 1.5 * radius * ang.sin());
    }
    let member_seeds = seeds::stream(seed, seeds::ROLE_ENSEMBLE, ensemble);
    let functional_seeds = seeds::stream(seed, seeds::ROLE_FUNCTIONAL, ensemble);
    let mk_seeds = seeds::stream(seed, seeds::ROLE_MEAN_KERNEL, 2 * ensemble);

    let mut points = Vec::new();
    for lw in min_width_log2..=max_width_log2 {
        let h = 1usize << lw;
        let arch = MlpArchitecture::mlp(2, h, 2, 1, Activation::Relu);
        let mean = ntk::mean_kernels(&arch, &dataset.xs, &xs_eval, &mk_seeds, InitKind::ZeroBias).map_err(err_to_js)?;
        let spec = KernelEnsembleSpec {
            arch: &arch,
            xs_train: &dataset.xs,
            ys_train: &dataset.ys,
            xs_eval: &xs_eval,
            member_seeds: &member_seeds,
            functional_seeds: &functional_seeds,
            mean: Some(&mean),
            jitter: 1e-10,
            init: InitKind::ZeroBias,
        };
        let mean_of = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let v_c = mean_of(
            variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinC).map_err(err_to_js)?)
                .map_err(err_to_js)?
                .channel_sum,
        );
        let v_i = mean_of(
            variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinI).map_err(err_to_js)?)
                .map_err(err_to_js)?
                .channel_sum,
        );
        let v_a = mean_of(
            variance::ensemble_variance(&build_kernel_ensemble(&spec, Variant::LinA).map_err(err_to_js)?)
                .map_err(err_to_js)?
                .channel_sum,
        );
        points.push(ScalingPoint { width: h, v_c, v_i, v_a });
    }
    let widths: Vec<f64> = points.iter().map(|p| p.width as f64).collect();
    let fit = |sel: &dyn Fn(&ScalingPoint) -> f64| {
        let ys: Vec<f64> = points.iter().map(|p| sel(p).max(f64::MIN_POSITIVE)).collect();
        variance::loglog_slope(&widths, &ys).map_err(err_to_js)
    };
    let curve = ScalingCurve {
        slope_v_c: fit(&|p| p.v_c)?,
        slope_v_i: fit(&|p| p.v_i)?,
        slope_v_a: fit(&|p| p.v_a)?,
        points,
    };
    serde_json::to_string(&curve).map_err(err_to_js)
}
