//! Closed-form moments of the one-hidden-layer ReLU tangent kernel and the
//! analytic variance terms for the single-training-point case. These are the
//! independent oracle the Monte-Carlo pipeline is validated against.
//!
//! Conventions: biases are zero at initialization, and the raw moment
//! formulas in [`ReluMoments`] are stated for `sigma_w = sqrt(2)` (the hidden
//! pre-activation is `z = sqrt(2/d) w^T x` with `w` standard normal). The
//! kernel-level functions rescale them for general `sigma_w`; the resulting
//! bookkeeping keeps the explicit `sigma_w^2` factor of the finite-width sum
//! on the output kernel, which the Monte-Carlo checks arbitrate. Both
//! conventions are exposed via [`nngp_mean`] / [`nngp_mean_unscaled`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticError {
    #[error("input dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("inputs must have nonzero norm")]
    ZeroNorm,
    #[error("inputs must share dimension {0}, got {1}")]
    DimensionMismatch(usize, usize),
}

/// Geometry of an input pair: norms, angle, and the unit-sphere constants
/// `C_d = 2/d`, `C'_d = 8/(2d + d^2)`.
#[derive(Debug, Clone)]
pub struct ReluMomentInputs {
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub d: usize,
    pub norm_x: f64,
    pub norm_x_prime: f64,
    /// Angle between the vectors, clamped into `[0, pi]`.
    pub theta: f64,
    pub c_d: f64,
    pub c_prime_d: f64,
}

impl ReluMomentInputs {
    pub fn new(x: &[f64], x_prime: &[f64]) -> Result<Self, AnalyticError> {
        let d = x.len();
        if d < 2 {
            return Err(AnalyticError::DimensionTooSmall(d));
        }
        if x_prime.len() != d {
            return Err(AnalyticError::DimensionMismatch(d, x_prime.len()));
        }
        let norm_x = norm(x);
        let norm_x_prime = norm(x_prime);
        if norm_x == 0.0 || norm_x_prime == 0.0 {
            return Err(AnalyticError::ZeroNorm);
        }
        let cosine = (dot(x, x_prime) / (norm_x * norm_x_prime)).clamp(-1.0, 1.0);
        let theta = cosine.acos();
        let df = d as f64;
        Ok(Self {
            x: x.to_vec(),
            x_prime: x_prime.to_vec(),
            d,
            norm_x,
            norm_x_prime,
            theta,
            c_d: 2.0 / df,
            c_prime_d: 8.0 / (2.0 * df + df * df),
        })
    }
}

/// First and second moments of `phi(z) phi(z')`, `phi'(z) phi'(z')` and their
/// covariances for ReLU, `z = sqrt(2/d) w^T x`, zero bias.
///
/// The two squared-factor covariances (`*_phi2`, `phi2_*`, `*_dphi2`) place
/// the squared pre-activation at `x` (the first input), so those fields are
/// not symmetric under swapping the pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluMoments {
    /// `E[phi(z) phi(z')]`
    pub e_phiphi: f64,
    /// `V[phi(z) phi(z')]`
    pub v_phiphi: f64,
    /// `E[phi'(z) phi'(z')] = (pi - theta) / (2 pi)`
    pub e_dphidphi: f64,
    /// `V[phi'(z) phi'(z')] = p (1 - p)`
    pub v_dphidphi: f64,
    /// `Cov[phi(z) phi(z'), phi'(z) phi'(z')]`
    pub cov_phiphi_dphidphi: f64,
    /// `Cov[phi(z) phi(z'), phi(z)^2]`
    pub cov_phiphi_phi2: f64,
    /// `Cov[phi(z)^2, phi'(z) phi'(z')]`
    pub cov_phi2_dphidphi: f64,
    /// `Cov[phi'(z) phi'(z'), phi'(z)^2] = (pi - theta) / (4 pi)`
    pub cov_dphidphi_dphi2: f64,
}

/// Evaluates every closed-form moment for the pair.
pub fn relu_moments(inp: &ReluMomentInputs) -> ReluMoments {
    let t = inp.theta;
    let (nx, nxp) = (inp.norm_x, inp.norm_x_prime);
    let d = inp.d as f64;
    let (c_d, c_pd) = (inp.c_d, inp.c_prime_d);

    let j0 = (PI - t) * t.cos() + t.sin();
    let e_phiphi = nx * nxp * c_d / (2.0 * PI) * j0;

    let second = nx * nx * nxp * nxp / (d * d) * (2.0 * d + d * d) * c_pd / (4.0 * PI)
        * (1.5 * (2.0 * t).sin() + (PI - t) * ((2.0 * t).cos() + 2.0));
    let v_phiphi = second - nx * nx * nxp * nxp * c_d * c_d / (4.0 * PI * PI) * j0 * j0;

    let p = (PI - t) / (2.0 * PI);
    let e_dphidphi = p;
    let v_dphidphi = p * (1.0 - p);

    let cov_phiphi_dphidphi = e_phiphi * (1.0 - p);

    let cov_phiphi_phi2 = (2.0 * d + d * d) / (16.0 * d * d * PI)
        * nx.powi(3)
        * nxp
        * c_pd
        * ((3.0 * t).sin() + 9.0 * t.sin() + 12.0 * (PI - t) * t.cos())
        - nx.powi(3) * nxp * c_d * c_d / (4.0 * PI) * j0;

    let cov_phi2_dphidphi = nx * nx * c_d / (4.0 * PI) * ((PI - t) + (2.0 * t).sin());

    let cov_dphidphi_dphi2 = (PI - t) / (4.0 * PI);

    ReluMoments {
        e_phiphi,
        v_phiphi,
        e_dphidphi,
        v_dphidphi,
        cov_phiphi_dphidphi,
        cov_phiphi_phi2,
        cov_phi2_dphidphi,
        cov_dphidphi_dphi2,
    }
}

/// Rescales the `sqrt(2)`-convention moments to a general `sigma_w`:
/// `phi(z)`-type factors pick up `sigma_w^2 / 2` each, indicator factors are
/// scale free.
fn scaled(m: &ReluMoments, sigma_w: f64) -> ReluMoments {
    let s2 = sigma_w * sigma_w / 2.0;
    let s4 = s2 * s2;
    ReluMoments {
        e_phiphi: s2 * m.e_phiphi,
        v_phiphi: s4 * m.v_phiphi,
        e_dphidphi: m.e_dphidphi,
        v_dphidphi: m.v_dphidphi,
        cov_phiphi_dphidphi: s2 * m.cov_phiphi_dphidphi,
        cov_phiphi_phi2: s4 * m.cov_phiphi_phi2,
        cov_phi2_dphidphi: s2 * m.cov_phi2_dphidphi,
        cov_dphidphi_dphi2: m.cov_dphidphi_dphi2,
    }
}

fn cross_factor(x: &[f64], x_prime: &[f64], sigma_w: f64) -> f64 {
    1.0 + sigma_w * sigma_w * dot(x, x_prime) / x.len() as f64
}

/// Mean tangent-kernel entry `E[Theta(x, x')]` for a one-hidden-layer ReLU
/// network with zero bias initialization (width independent).
pub fn theta_mean(x: &[f64], x_prime: &[f64], sigma_w: f64) -> Result<f64, AnalyticError> {
    let inp = ReluMomentInputs::new(x, x_prime)?;
    let m = scaled(&relu_moments(&inp), sigma_w);
    let s2w = sigma_w * sigma_w;
    Ok(1.0 + s2w * m.e_phiphi + cross_factor(x, x_prime, sigma_w) * s2w * m.e_dphidphi)
}

/// Variance of the tangent-kernel entry at width `h`; carries the single
/// `1/h` factor.
pub fn theta_var(x: &[f64], x_prime: &[f64], h: usize, sigma_w: f64) -> Result<f64, AnalyticError> {
    let inp = ReluMomentInputs::new(x, x_prime)?;
    let m = scaled(&relu_moments(&inp), sigma_w);
    let c = cross_factor(x, x_prime, sigma_w);
    let s4w = sigma_w.powi(4);
    Ok(s4w / h as f64
        * (m.v_phiphi
            + c * c * (3.0 * m.v_dphidphi + 2.0 * m.e_dphidphi * m.e_dphidphi)
            + 2.0 * c * m.cov_phiphi_dphidphi))
}

/// `Cov[Theta(x_query, x_train), Theta(x_train, x_train)]` at width `h`.
pub fn theta_cov_with_diag(x_train: &[f64], x_query: &[f64], h: usize, sigma_w: f64) -> Result<f64, AnalyticError> {
    let inp = ReluMomentInputs::new(x_train, x_query)?;
    let m = scaled(&relu_moments(&inp), sigma_w);
    let c_qt = cross_factor(x_train, x_query, sigma_w);
    let c_tt = cross_factor(x_train, x_train, sigma_w);
    // Cov[phi phi', dphi(z_train)^2]: phi phi' is nonzero only when z_train > 0
    let cov_phiphi_dphi2 = 0.5 * m.e_phiphi;
    let s4w = sigma_w.powi(4);
    Ok(s4w / h as f64
        * (m.cov_phiphi_phi2
            + c_qt * c_tt * (3.0 * m.cov_dphidphi_dphi2 + m.e_dphidphi)
            + c_qt * m.cov_phi2_dphidphi
            + c_tt * cov_phiphi_dphi2))
}

/// Mean finite-width output kernel `E[f(x) f(x')]`, zero bias: the
/// finite-width sum carries `sigma_w^2` on the hidden-unit average.
pub fn nngp_mean(x: &[f64], x_prime: &[f64], sigma_w: f64) -> Result<f64, AnalyticError> {
    Ok(sigma_w * sigma_w * nngp_mean_unscaled(x, x_prime, sigma_w)?)
}

/// `E[phi(z) phi(z')]` alone, the convention without the outer `sigma_w^2`
/// factor; reported alongside [`nngp_mean`] when arbitrating conventions.
pub fn nngp_mean_unscaled(x: &[f64], x_prime: &[f64], sigma_w: f64) -> Result<f64, AnalyticError> {
    let inp = ReluMomentInputs::new(x, x_prime)?;
    Ok(scaled(&relu_moments(&inp), sigma_w).e_phiphi)
}

/// Analytic `(V^a, V^c, V^i)` for a single training point with target `+1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticVariances {
    pub v_a: f64,
    pub v_c: f64,
    pub v_i: f64,
    /// `E[f(x_train)^2]`, the exact ratio `v_i / v_c`.
    pub k_bar_train: f64,
}

/// Variance terms of the kernel-model ensembles trained on the single point
/// `x_train` with target `+1`, evaluated at `x_query`.
pub fn analytic_variance_terms(
    x_train: &[f64],
    x_query: &[f64],
    h: usize,
    sigma_w: f64,
) -> Result<AnalyticVariances, AnalyticError> {
    let tm_tt = theta_mean(x_train, x_train, sigma_w)?;
    let tm_qt = theta_mean(x_query, x_train, sigma_w)?;
    let q = tm_qt / tm_tt;

    let k_qq = nngp_mean(x_query, x_query, sigma_w)?;
    let k_qt = nngp_mean(x_query, x_train, sigma_w)?;
    let k_tt = nngp_mean(x_train, x_train, sigma_w)?;
    let v_a = k_qq - 2.0 * q * k_qt + q * q * k_tt;

    let var_qt = theta_var(x_query, x_train, h, sigma_w)?;
    let var_tt = theta_var(x_train, x_train, h, sigma_w)?;
    let cov = theta_cov_with_diag(x_train, x_query, h, sigma_w)?;
    let v_c = var_qt / (tm_tt * tm_tt) + tm_qt * tm_qt / tm_tt.powi(4) * var_tt
        - 2.0 * tm_qt / tm_tt.powi(3) * cov;

    let v_i = k_tt * v_c;
    Ok(AnalyticVariances { v_a, v_c, v_i, k_bar_train: k_tt })
}

/// Monte-Carlo estimates of every [`ReluMoments`] field with matching
/// standard errors, from `draws` weight vectors (`sigma_w = sqrt(2)`, zero
/// bias, matching the closed forms).
#[derive(Debug, Clone, Copy)]
pub struct McMoments {
    pub estimate: ReluMoments,
    pub std_error: ReluMoments,
}

pub fn mc_relu_moments(x: &[f64], x_prime: &[f64], draws: usize, seed: u64) -> Result<McMoments, AnalyticError> {
    let d = x.len();
    if d < 2 {
        return Err(AnalyticError::DimensionTooSmall(d));
    }
    if x_prime.len() != d {
        return Err(AnalyticError::DimensionMismatch(d, x_prime.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let scale = (2.0 / d as f64).sqrt();

    // samples: a = phi(z) phi(z'), b = phi'(z) phi'(z'), a2 = phi(z)^2, b2 = phi'(z)^2
    let n = draws;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut a2 = Vec::with_capacity(n);
    let mut b2 = Vec::with_capacity(n);
    let mut w = vec![0.0; d];
    for _ in 0..n {
        for wi in w.iter_mut() {
            *wi = normal.sample(&mut rng);
        }
        let z = scale * dot(&w, x);
        let zp = scale * dot(&w, x_prime);
        let (pz, pzp) = (z.max(0.0), zp.max(0.0));
        let (dz, dzp) = (if z > 0.0 { 1.0 } else { 0.0 }, if zp > 0.0 { 1.0 } else { 0.0 });
        a.push(pz * pzp);
        b.push(dz * dzp);
        a2.push(pz * pz);
        b2.push(dz);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (ma, mb, ma2, mb2) = (mean(&a), mean(&b), mean(&a2), mean(&b2));

    let mean_se = |v: &[f64], m: f64| {
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };

    // variance estimate with SE from the fourth central moment
    let var_with_se = |v: &[f64], m: f64| {
        let mut s2 = 0.0;
        let mut s4 = 0.0;
        for x in v {
            let c = x - m;
            s2 += c * c;
            s4 += c * c * c * c;
        }
        let var = s2 / (n - 1) as f64;
        let m4 = s4 / n as f64;
        let se = ((m4 - var * var).max(0.0) / n as f64).sqrt();
        (var, se)
    };

    // covariance estimate with asymptotic SE sqrt((E[(u-mu)^2 (v-mv)^2] - cov^2) / n)
    let cov_with_se = |u: &[f64], mu: f64, v: &[f64], mv: f64| {
        let mut s11 = 0.0;
        let mut s22 = 0.0;
        for (x, y) in u.iter().zip(v.iter()) {
            let (cu, cv) = (x - mu, y - mv);
            s11 += cu * cv;
            s22 += cu * cu * cv * cv;
        }
        let cov = s11 / (n - 1) as f64;
        let se = ((s22 / n as f64 - cov * cov).max(0.0) / n as f64).sqrt();
        (cov, se)
    };

    let (v_a, v_a_se) = var_with_se(&a, ma);
    let (v_b, v_b_se) = var_with_se(&b, mb);
    let (c_ab, c_ab_se) = cov_with_se(&a, ma, &b, mb);
    let (c_aa2, c_aa2_se) = cov_with_se(&a, ma, &a2, ma2);
    let (c_a2b, c_a2b_se) = cov_with_se(&a2, ma2, &b, mb);
    let (c_bb2, c_bb2_se) = cov_with_se(&b, mb, &b2, mb2);

    Ok(McMoments {
        estimate: ReluMoments {
            e_phiphi: ma,
            v_phiphi: v_a,
            e_dphidphi: mb,
            v_dphidphi: v_b,
            cov_phiphi_dphidphi: c_ab,
            cov_phiphi_phi2: c_aa2,
            cov_phi2_dphidphi: c_a2b,
            cov_dphidphi_dphi2: c_bb2,
        },
        std_error: ReluMoments {
            e_phiphi: mean_se(&a, ma),
            v_phiphi: v_a_se,
            e_dphidphi: mean_se(&b, mb),
            v_dphidphi: v_b_se,
            cov_phiphi_dphidphi: c_ab_se,
            cov_phiphi_phi2: c_aa2_se,
            cov_phi2_dphidphi: c_a2b_se,
            cov_dphidphi_dphi2: c_bb2_se,
        },
    })
}

/// Field-by-field `(name, closed_form, mc_estimate, std_error)` table.
pub fn moment_comparison(closed: &ReluMoments, mc: &McMoments) -> Vec<(&'static str, f64, f64, f64)> {
    vec![
        ("e_phiphi", closed.e_phiphi, mc.estimate.e_phiphi, mc.std_error.e_phiphi),
        ("v_phiphi", closed.v_phiphi, mc.estimate.v_phiphi, mc.std_error.v_phiphi),
        ("e_dphidphi", closed.e_dphidphi, mc.estimate.e_dphidphi, mc.std_error.e_dphidphi),
        ("v_dphidphi", closed.v_dphidphi, mc.estimate.v_dphidphi, mc.std_error.v_dphidphi),
        (
            "cov_phiphi_dphidphi",
            closed.cov_phiphi_dphidphi,
            mc.estimate.cov_phiphi_dphidphi,
            mc.std_error.cov_phiphi_dphidphi,
        ),
        (
            "cov_phiphi_phi2",
            closed.cov_phiphi_phi2,
            mc.estimate.cov_phiphi_phi2,
            mc.std_error.cov_phiphi_phi2,
        ),
        (
            "cov_phi2_dphidphi",
            closed.cov_phi2_dphidphi,
            mc.estimate.cov_phi2_dphidphi,
            mc.std_error.cov_phi2_dphidphi,
        ),
        (
            "cov_dphidphi_dphi2",
            closed.cov_dphidphi_dphi2,
            mc.estimate.cov_dphidphi_dphi2,
            mc.std_error.cov_dphidphi_dphi2,
        ),
    ]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_inputs_give_half_activation_probability() {
        let inp = ReluMomentInputs::new(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
        let m = relu_moments(&inp);
        assert!((m.e_dphidphi - 0.5).abs() < 1e-15);
    }

    #[test]
    fn opposite_inputs_never_coactivate() {
        let inp = ReluMomentInputs::new(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]).unwrap();
        let m = relu_moments(&inp);
        assert!(m.e_phiphi.abs() < 1e-15);
        assert!(m.e_dphidphi.abs() < 1e-15);
    }

    #[test]
    fn orthogonal_unit_pair_in_2d() {
        let inp = ReluMomentInputs::new(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        let m = relu_moments(&inp);
        assert!((m.e_phiphi - 1.0 / (2.0 * PI)).abs() < 1e-15, "got {}", m.e_phiphi);
    }

    #[test]
    fn bernoulli_variance_identity() {
        let inp = ReluMomentInputs::new(&[1.0, 0.2, -0.4], &[0.5, 0.7, 0.1]).unwrap();
        let m = relu_moments(&inp);
        let p = m.e_dphidphi;
        assert_eq!(m.v_dphidphi, p * (1.0 - p));
        assert!((0.0..=0.5).contains(&p));
    }

    #[test]
    fn symmetric_fields_swap_invariant() {
        let a = vec![0.9, -0.3, 0.5];
        let b = vec![0.1, 0.8, -0.2];
        let m1 = relu_moments(&ReluMomentInputs::new(&a, &b).unwrap());
        let m2 = relu_moments(&ReluMomentInputs::new(&b, &a).unwrap());
        assert!((m1.e_phiphi - m2.e_phiphi).abs() < 1e-14);
        assert!((m1.e_dphidphi - m2.e_dphidphi).abs() < 1e-14);
        assert!((m1.v_phiphi - m2.v_phiphi).abs() < 1e-14);
        assert!((m1.v_dphidphi - m2.v_dphidphi).abs() < 1e-14);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert_eq!(
            ReluMomentInputs::new(&[1.0], &[1.0]).unwrap_err(),
            AnalyticError::DimensionTooSmall(1)
        );
        assert_eq!(
            ReluMomentInputs::new(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err(),
            AnalyticError::ZeroNorm
        );
    }

    #[test]
    fn monte_carlo_agrees_with_every_field() {
        let pairs: [(&[f64], &[f64]); 3] = [
            (&[1.0, 0.0], &[0.0, 1.0]),
            (&[0.8, 0.3, -0.2, 0.5], &[-0.1, 0.9, 0.4, 0.2]),
            (&[1.3, 0.2, 0.1], &[1.1, 0.4, 0.0]),
        ];
        for (i, (x, xp)) in pairs.iter().enumerate() {
            let inp = ReluMomentInputs::new(x, xp).unwrap();
            let closed = relu_moments(&inp);
            let mc = mc_relu_moments(x, xp, 200_000, 1000 + i as u64).unwrap();
            for (name, cf, est, se) in moment_comparison(&closed, &mc) {
                let tol = 5.0 * se + 1e-12;
                assert!(
                    (cf - est).abs() <= tol,
                    "pair {i} field {name}: closed {cf} vs mc {est} +- {se}"
                );
            }
        }
    }

    #[test]
    fn variance_terms_vanish_at_training_point() {
        let x = vec![0.6, -0.8];
        let v = analytic_variance_terms(&x, &x, 512, std::f64::consts::SQRT_2).unwrap();
        assert!(v.v_a.abs() < 1e-12, "v_a {}", v.v_a);
        assert!(v.v_c.abs() < 1e-14, "v_c {}", v.v_c);
        assert!(v.v_i.abs() < 1e-14);
    }

    #[test]
    fn interplay_is_kernel_scaled_pure_kernel_noise() {
        let xt = vec![1.0, 0.0, 0.4];
        let xq = vec![0.2, 0.9, -0.3];
        let v = analytic_variance_terms(&xt, &xq, 256, std::f64::consts::SQRT_2).unwrap();
        assert!((v.v_i - v.k_bar_train * v.v_c).abs() <= 1e-15 * v.v_i.abs().max(1.0));
        let k_tt = nngp_mean(&xt, &xt, std::f64::consts::SQRT_2).unwrap();
        assert_eq!(v.k_bar_train, k_tt);
    }

    #[test]
    fn pure_kernel_noise_carries_exactly_one_inverse_width() {
        let xt = vec![0.7, 0.1];
        let xq = vec![-0.2, 0.5];
        let mut scaled_values = Vec::new();
        for &h in &[64usize, 256, 1024] {
            let v = analytic_variance_terms(&xt, &xq, h, std::f64::consts::SQRT_2).unwrap();
            scaled_values.push(v.v_c * h as f64);
        }
        for w in scaled_values.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12 * w[0].abs().max(1e-30), "{scaled_values:?}");
        }
    }

    #[test]
    fn small_norm_kernel_noise_depends_on_angle_alone() {
        // two pairs with equal angle, different orientation, |x| = 0.1, d = 100
        let d = 100;
        let r = 0.1;
        let theta: f64 = 0.9;
        let mut x1 = vec![0.0; d];
        let mut q1 = vec![0.0; d];
        x1[0] = r;
        q1[0] = r * theta.cos();
        q1[1] = r * theta.sin();
        let mut x2 = vec![0.0; d];
        let mut q2 = vec![0.0; d];
        x2[7] = r;
        q2[7] = r * theta.cos();
        q2[12] = r * theta.sin();
        // different norms of the query to confirm near-invariance too
        let v1 = analytic_variance_terms(&x1, &q1, 512, std::f64::consts::SQRT_2).unwrap();
        let v2 = analytic_variance_terms(&x2, &q2, 512, std::f64::consts::SQRT_2).unwrap();
        let rel = (v1.v_c - v2.v_c).abs() / v1.v_c.abs().max(1e-30);
        assert!(rel <= 1e-2, "relative difference {rel}");
    }
}
