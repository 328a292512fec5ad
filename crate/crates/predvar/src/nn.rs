//! Finite-width MLPs with the `sigma_w / sqrt(h_l)` forward scaling, per-sample
//! gradients, Jacobian-vector products and (optionally linearized) momentum
//! gradient-descent training on the MSE loss.
//!
//! Parameter vectors are flattened in a fixed order that is shared by
//! [`per_sample_grad`], [`jvp`] and the initialization draw: layer 1..L, each
//! layer's weight matrix in row-major order followed by its bias vector.

use crate::linalg::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("training diverged (train MSE {mse:.3e} > 1e6); lower the learning rate")]
    Diverged { mse: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            // subgradient at 0 fixed to 0
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

/// Layer widths `h_0..h_L`, the pointwise non-linearity and the weight scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub sigma_w: f64,
}

impl MlpArchitecture {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, sigma_w: f64) -> Result<Self, NnError> {
        if layer_widths.len() < 3 {
            return Err(NnError::InvalidArchitecture(
                "need at least one hidden layer (input, hidden.., output)".into(),
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidArchitecture("all widths must be >= 1".into()));
        }
        if !(sigma_w > 0.0) {
            return Err(NnError::InvalidArchitecture("sigma_w must be positive".into()));
        }
        Ok(Self { layer_widths, activation, sigma_w })
    }

    /// `d`-in, `depth` layers of width `h`, scalar-or-`k`-way output,
    /// `sigma_w = sqrt(2)`.
    pub fn mlp(d: usize, hidden: usize, depth: usize, out: usize, activation: Activation) -> Self {
        assert!(depth >= 2, "depth counts layers and must be >= 2");
        let mut widths = vec![d];
        widths.extend(std::iter::repeat(hidden).take(depth - 1));
        widths.push(out);
        Self { layer_widths: widths, activation, sigma_w: std::f64::consts::SQRT_2 }
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        (0..self.depth())
            .map(|l| self.layer_widths[l] * self.layer_widths[l + 1] + self.layer_widths[l + 1])
            .sum()
    }
}

/// Weight matrices `W^l` (`h_l x h_{l-1}`) and bias vectors, plus the seed the
/// record was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: MlpArchitecture,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Draws every weight and bias entry from a unit normal, deterministically in
/// `seed`.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> MlpParams {
    init_params_custom(arch, seed, false)
}

/// As [`init_params`] but with biases set to zero. The bias draws are still
/// consumed from the RNG stream, so the weights match [`init_params`] for the
/// same seed.
pub fn init_params_zero_bias(arch: &MlpArchitecture, seed: u64) -> MlpParams {
    init_params_custom(arch, seed, true)
}

fn init_params_custom(arch: &MlpArchitecture, seed: u64, zero_bias: bool) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut weights = Vec::with_capacity(arch.depth());
    let mut biases = Vec::with_capacity(arch.depth());
    for l in 0..arch.depth() {
        let (fan_in, fan_out) = (arch.layer_widths[l], arch.layer_widths[l + 1]);
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        weights.push(Matrix::new(fan_out, fan_in, data).expect("finite normal draws"));
        let b: Vec<f64> = (0..fan_out)
            .map(|_| {
                let v: f64 = normal.sample(&mut rng);
                if zero_bias {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        biases.push(b);
    }
    MlpParams { arch: arch.clone(), weights, biases, seed }
}

impl MlpParams {
    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Flattens parameters in the documented order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in 0..self.arch.depth() {
            v.extend_from_slice(self.weights[l].as_slice());
            v.extend_from_slice(&self.biases[l]);
        }
        v
    }

    /// Splits a flat vector into per-layer `(weight, bias)` blocks in the
    /// documented order.
    pub fn unflatten(&self, flat: &[f64]) -> Result<(Vec<Matrix>, Vec<Vec<f64>>), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::DimensionMismatch(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut off = 0;
        for l in 0..self.arch.depth() {
            let (fan_in, fan_out) = (self.arch.layer_widths[l], self.arch.layer_widths[l + 1]);
            let w = Matrix::new(fan_out, fan_in, flat[off..off + fan_in * fan_out].to_vec())
                .map_err(|e| NnError::DimensionMismatch(e.to_string()))?;
            off += fan_in * fan_out;
            weights.push(w);
            biases.push(flat[off..off + fan_out].to_vec());
            off += fan_out;
        }
        Ok((weights, biases))
    }
}

/// Forward activations and pre-activations for a batch, kept for backprop.
pub struct ForwardTrace {
    /// `acts[l]`: layer inputs, `acts[0]` is the batch itself (`n x h_l`).
    pub acts: Vec<Matrix>,
    /// `preacts[l]`: `z^{l+1}` in the recursion (`n x h_{l+1}`).
    pub preacts: Vec<Matrix>,
    /// Network output (`n x h_L`), no activation on the last layer.
    pub output: Matrix,
}

fn layer_scale(arch: &MlpArchitecture, l: usize) -> f64 {
    arch.sigma_w / (arch.layer_widths[l] as f64).sqrt()
}

fn affine(params: &MlpParams, l: usize, input: &Matrix) -> Matrix {
    let mut z = input.matmul_nt(&params.weights[l]);
    let s = layer_scale(&params.arch, l);
    let b = &params.biases[l];
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = s * *v + b[j];
        }
    }
    z
}

/// Runs the forward recursion, returning all intermediates.
pub fn forward_trace(params: &MlpParams, xs: &Matrix) -> Result<ForwardTrace, NnError> {
    if xs.cols() != params.arch.input_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "input dim {} vs architecture h_0 = {}",
            xs.cols(),
            params.arch.input_dim()
        )));
    }
    let depth = params.arch.depth();
    let act = params.arch.activation;
    let mut acts = Vec::with_capacity(depth);
    let mut preacts = Vec::with_capacity(depth);
    let mut cur = xs.clone();
    for l in 0..depth {
        let z = affine(params, l, &cur);
        if l + 1 < depth {
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = act.apply(*v);
            }
            acts.push(std::mem::replace(&mut cur, a));
            preacts.push(z);
        } else {
            acts.push(cur.clone());
            preacts.push(z.clone());
            return Ok(ForwardTrace { acts, preacts, output: z });
        }
    }
    unreachable!("depth >= 2 guaranteed by MlpArchitecture")
}

/// Batched network evaluation (`n x h_L`).
pub fn forward(params: &MlpParams, xs: &Matrix) -> Result<Matrix, NnError> {
    Ok(forward_trace(params, xs)?.output)
}

/// Single-input evaluation.
pub fn forward_vec(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>, NnError> {
    let xs = Matrix::new(1, x.len(), x.to_vec()).map_err(|e| NnError::DimensionMismatch(e.to_string()))?;
    Ok(forward(params, &xs)?.into_vec())
}

/// Backpropagated `d f_k / d z^l` for every sample, one matrix per layer.
///
/// Together with the forward activations these carry everything a tangent
/// kernel contraction needs.
pub fn bias_gradients(params: &MlpParams, trace: &ForwardTrace, channel: usize) -> Result<Vec<Matrix>, NnError> {
    let h_out = params.arch.output_dim();
    if channel >= h_out {
        return Err(NnError::DimensionMismatch(format!(
            "channel {channel} out of range for output dim {h_out}"
        )));
    }
    let n = trace.output.rows();
    let mut seed = Matrix::zeros(n, h_out);
    for i in 0..n {
        seed.set(i, channel, 1.0);
    }
    Ok(backprop_deltas(params, trace, seed))
}

/// Propagates an output cotangent back through the trace; returns
/// `d (sum_k seed_k f_k) / d z^l` per layer.
fn backprop_deltas(params: &MlpParams, trace: &ForwardTrace, seed: Matrix) -> Vec<Matrix> {
    let depth = params.arch.depth();
    let act = params.arch.activation;
    let mut deltas = vec![Matrix::zeros(0, 0); depth];
    deltas[depth - 1] = seed;
    for l in (1..depth).rev() {
        let mut d = deltas[l].matmul(&params.weights[l]);
        let s = layer_scale(&params.arch, l);
        let z = &trace.preacts[l - 1];
        for (v, zv) in d.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *v = *v * s * act.derivative(*zv);
        }
        deltas[l - 1] = d;
    }
    deltas
}

/// Gradient of output `channel` at a single input, flattened in the documented
/// order.
pub fn per_sample_grad(params: &MlpParams, x: &[f64], channel: usize) -> Result<Vec<f64>, NnError> {
    let xs = Matrix::new(1, x.len(), x.to_vec()).map_err(|e| NnError::DimensionMismatch(e.to_string()))?;
    let trace = forward_trace(params, &xs)?;
    let deltas = bias_gradients(params, &trace, channel)?;
    let mut g = Vec::with_capacity(params.param_count());
    for l in 0..params.arch.depth() {
        let s = layer_scale(&params.arch, l);
        let delta = deltas[l].row(0);
        let input = trace.acts[l].row(0);
        for &dj in delta {
            for &xi in input {
                g.push(s * dj * xi);
            }
        }
        g.extend_from_slice(delta);
    }
    Ok(g)
}

/// Directional derivative of the outputs along a flat tangent vector, by
/// tangent forward propagation. Linear in `v`.
pub fn jvp(params: &MlpParams, xs: &Matrix, v: &[f64]) -> Result<Matrix, NnError> {
    let trace = forward_trace(params, xs)?;
    let (vw, vb) = params.unflatten(v)?;
    Ok(jvp_traced(params, &trace, &vw, &vb))
}

/// As [`jvp`] with the base-point trace and layered tangent precomputed; the
/// fast path for linearized training.
pub fn jvp_traced(params: &MlpParams, trace: &ForwardTrace, vw: &[Matrix], vb: &[Vec<f64>]) -> Matrix {
    let depth = params.arch.depth();
    let act = params.arch.activation;
    let n = trace.acts[0].rows();
    let mut tangent = Matrix::zeros(n, params.arch.input_dim());
    for l in 0..depth {
        let s = layer_scale(&params.arch, l);
        // s_l = scale * (acts_l Vw^T + tangent W^T) + vb
        let mut sl = trace.acts[l].matmul_nt(&vw[l]);
        let tw = tangent.matmul_nt(&params.weights[l]);
        let b = &vb[l];
        for i in 0..sl.rows() {
            let r = sl.row_mut(i);
            let t = tw.row(i);
            for j in 0..r.len() {
                r[j] = s * (r[j] + t[j]) + b[j];
            }
        }
        if l + 1 < depth {
            let z = &trace.preacts[l];
            for (v, zv) in sl.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *v *= act.derivative(*zv);
            }
        }
        tangent = sl;
    }
    tangent
}

/// Training configuration; defaults mirror the experimental setup (momentum
/// GD, `eta = 0.1`, momentum `0.9`, stop at train MSE `<= 0.01`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_steps: usize,
    pub target_mse: f64,
    /// `None` = full batch.
    pub batch_size: Option<usize>,
    /// Train the centered model `f(x, theta) - f(x, theta_init)` against the
    /// raw targets; the subtracted initial function is evaluated once.
    pub center_output: bool,
    /// Optimize the first-order surrogate
    /// `f(x, theta_0) + J(theta_0) (omega - theta_0)` over `omega`.
    pub linearized: bool,
    /// Full-dataset MSE is checked for stopping every this many steps.
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            max_steps: 5000,
            target_mse: 0.01,
            batch_size: None,
            center_output: false,
            linearized: false,
            check_every: 10,
        }
    }
}

const DIVERGENCE_MSE: f64 = 1e6;

/// Result of a training run.
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Train MSE at every stopping check (step 0 first).
    pub history: Vec<f64>,
    pub final_mse: f64,
    pub steps: usize,
    /// Whether `target_mse` was reached before `max_steps`.
    pub converged: bool,
}

/// Trains on the MSE loss with momentum gradient descent.
///
/// The optimized loss is `1/(2n) * sum_i ||model(x_i) - y_i||^2` over the
/// batch; the reported MSE is the mean over all `n * h_L` entries. The model
/// is `f(x, theta)` minus the cached initial function when
/// `cfg.center_output`, plus `offset` rows when supplied (a per-point constant
/// through training).
pub fn train(params: &MlpParams, xs: &Matrix, ys: &Matrix, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    train_with_offset(params, xs, ys, cfg, None)
}

pub fn train_with_offset(
    params: &MlpParams,
    xs: &Matrix,
    ys: &Matrix,
    cfg: &TrainConfig,
    offset: Option<&Matrix>,
) -> Result<TrainOutcome, NnError> {
    let n = xs.rows();
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    if ys.rows() != n || ys.cols() != params.arch.output_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "targets {}x{} vs expected {}x{}",
            ys.rows(),
            ys.cols(),
            n,
            params.arch.output_dim()
        )));
    }
    if let Some(o) = offset {
        if o.rows() != n || o.cols() != ys.cols() {
            return Err(NnError::DimensionMismatch("offset shape must match targets".into()));
        }
    }
    if let Some(b) = cfg.batch_size {
        if b == 0 || b > n {
            return Err(NnError::DimensionMismatch(format!("batch size {b} vs dataset size {n}")));
        }
    }

    // Effective targets: the network itself must fit
    // ys - offset + (center ? f(X, theta_init) : 0).
    let mut eff = ys.clone();
    if let Some(o) = offset {
        eff = eff.sub(o).map_err(|e| NnError::DimensionMismatch(e.to_string()))?;
    }
    if cfg.center_output {
        let f0 = forward(params, xs)?;
        eff = eff.add(&f0).map_err(|e| NnError::DimensionMismatch(e.to_string()))?;
    }

    if cfg.linearized {
        train_linearized(params, xs, &eff, cfg)
    } else {
        train_direct(params, xs, &eff, cfg)
    }
}

struct Momentum {
    w: Vec<Matrix>,
    b: Vec<Vec<f64>>,
}

impl Momentum {
    fn zeros(params: &MlpParams) -> Self {
        Self {
            w: params.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            b: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// Loss gradient per layer from a residual cotangent (`residual / n` rows).
fn loss_gradients(
    params: &MlpParams,
    trace: &ForwardTrace,
    scaled_residual: Matrix,
) -> (Vec<Matrix>, Vec<Vec<f64>>) {
    let deltas = backprop_deltas(params, trace, scaled_residual);
    let depth = params.arch.depth();
    let mut gw = Vec::with_capacity(depth);
    let mut gb = Vec::with_capacity(depth);
    for l in 0..depth {
        let s = layer_scale(&params.arch, l);
        gw.push(deltas[l].matmul_tn(&trace.acts[l]).scale(s));
        let mut b = vec![0.0; deltas[l].cols()];
        for i in 0..deltas[l].rows() {
            for (acc, v) in b.iter_mut().zip(deltas[l].row(i)) {
                *acc += v;
            }
        }
        gb.push(b);
    }
    (gw, gb)
}

fn apply_update(params: &mut MlpParams, mom: &mut Momentum, gw: &[Matrix], gb: &[Vec<f64>], cfg: &TrainConfig) {
    for l in 0..params.arch.depth() {
        let (mw, w, g) = (&mut mom.w[l], &mut params.weights[l], &gw[l]);
        for ((m, wv), gv) in mw.as_mut_slice().iter_mut().zip(w.as_mut_slice()).zip(g.as_slice()) {
            *m = cfg.momentum * *m + gv;
            *wv -= cfg.learning_rate * *m;
        }
        for ((m, bv), gv) in mom.b[l].iter_mut().zip(params.biases[l].iter_mut()).zip(gb[l].iter()) {
            *m = cfg.momentum * *m + gv;
            *bv -= cfg.learning_rate * *m;
        }
    }
}

fn mse(residual: &Matrix) -> f64 {
    let n = residual.rows() * residual.cols();
    residual.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64
}

fn batch_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

fn train_direct(params: &MlpParams, xs: &Matrix, eff: &Matrix, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    let n = xs.rows();
    let mut cur = params.clone();
    let mut mom = Momentum::zeros(&cur);
    let mut history = Vec::new();
    let full_batch = cfg.batch_size.map_or(true, |b| b >= n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5157_ab1e);
    let mut cursor = n; // force reshuffle on first minibatch
    let mut steps = 0usize;
    let mut full_mse = f64::INFINITY;

    loop {
        let held;
        let (bx, by): (&Matrix, &Matrix) = if full_batch {
            (xs, eff)
        } else {
            let b = cfg.batch_size.unwrap();
            if cursor + b > n {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            held = (batch_rows(xs, &order[cursor..cursor + b]), batch_rows(eff, &order[cursor..cursor + b]));
            cursor += b;
            (&held.0, &held.1)
        };
        let trace = forward_trace(&cur, bx)?;
        let mut residual = trace.output.sub(by).expect("shapes checked");
        let step_mse = nan_guard(mse(&residual));
        history.push(step_mse);

        if full_batch {
            full_mse = step_mse;
        } else if steps % cfg.check_every == 0 {
            let out = forward(&cur, xs)?;
            full_mse = nan_guard(mse(&out.sub(eff).expect("shapes checked")));
        }
        if step_mse > DIVERGENCE_MSE || full_mse > DIVERGENCE_MSE {
            return Err(NnError::Diverged { mse: step_mse.max(full_mse) });
        }
        if full_mse <= cfg.target_mse {
            return Ok(TrainOutcome { params: cur, final_mse: full_mse, history, steps, converged: true });
        }
        if steps >= cfg.max_steps {
            if !full_batch {
                let out = forward(&cur, xs)?;
                full_mse = nan_guard(mse(&out.sub(eff).expect("shapes checked")));
            }
            let converged = full_mse <= cfg.target_mse;
            return Ok(TrainOutcome { params: cur, final_mse: full_mse, history, steps, converged });
        }

        let inv = 1.0 / bx.rows() as f64;
        for v in residual.as_mut_slice() {
            *v *= inv;
        }
        let (gw, gb) = loss_gradients(&cur, &trace, residual);
        apply_update(&mut cur, &mut mom, &gw, &gb, cfg);
        steps += 1;
    }
}

fn nan_guard(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Linearized training: gradient steps on the surrogate
/// `f(x, theta_0) + J(theta_0)(omega - theta_0)` with the base-point trace
/// computed once.
fn train_linearized(params: &MlpParams, xs: &Matrix, eff: &Matrix, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    let n = xs.rows();
    let trace = forward_trace(params, xs)?;
    let f0 = trace.output.clone();

    // omega - theta_0, stored layerwise
    let mut vw: Vec<Matrix> = params.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let mut vb: Vec<Vec<f64>> = params.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut mom = Momentum::zeros(params);
    let mut history = Vec::new();
    let mut steps = 0usize;

    let full_batch = cfg.batch_size.map_or(true, |b| b >= n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5157_ab1e);
    let mut cursor = n;

    let finish = |vw: &[Matrix], vb: &[Vec<f64>], history: Vec<f64>, steps: usize, final_mse: f64, converged: bool| {
        let mut out_params = params.clone();
        apply_tangent(&mut out_params, vw, vb);
        Ok(TrainOutcome { params: out_params, final_mse, history, steps, converged })
    };

    loop {
        let tangent = jvp_traced(params, &trace, &vw, &vb);
        let mut residual = f0.add(&tangent).expect("shape").sub(eff).expect("shape");
        let full_mse = nan_guard(mse(&residual));
        history.push(full_mse);
        if full_mse > DIVERGENCE_MSE {
            return Err(NnError::Diverged { mse: full_mse });
        }
        if full_mse <= cfg.target_mse {
            return finish(&vw, &vb, history, steps, full_mse, true);
        }
        if steps >= cfg.max_steps {
            return finish(&vw, &vb, history, steps, full_mse, false);
        }

        let rows: Option<Vec<usize>> = if full_batch {
            None
        } else {
            let b = cfg.batch_size.unwrap();
            if cursor + b > n {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            let idx = order[cursor..cursor + b].to_vec();
            cursor += b;
            Some(idx)
        };
        if let Some(idx) = &rows {
            // zero out rows outside the batch so the backprop only sees them
            let mut keep = vec![false; n];
            for &i in idx {
                keep[i] = true;
            }
            for i in 0..n {
                if !keep[i] {
                    for v in residual.row_mut(i) {
                        *v = 0.0;
                    }
                }
            }
        }
        let batch_n = rows.as_ref().map_or(n, |r| r.len());
        let inv = 1.0 / batch_n as f64;
        for v in residual.as_mut_slice() {
            *v *= inv;
        }
        let (gw, gb) = loss_gradients(params, &trace, residual);
        for l in 0..params.arch.depth() {
            let (mw, w, g) = (&mut mom.w[l], &mut vw[l], &gw[l]);
            for ((m, wv), gv) in mw.as_mut_slice().iter_mut().zip(w.as_mut_slice()).zip(g.as_slice()) {
                *m = cfg.momentum * *m + gv;
                *wv -= cfg.learning_rate * *m;
            }
            for ((m, bv), gv) in mom.b[l].iter_mut().zip(vb[l].iter_mut()).zip(gb[l].iter()) {
                *m = cfg.momentum * *m + gv;
                *bv -= cfg.learning_rate * *m;
            }
        }
        steps += 1;
    }
}

fn apply_tangent(params: &mut MlpParams, vw: &[Matrix], vb: &[Vec<f64>]) {
    for l in 0..params.arch.depth() {
        for (wv, t) in params.weights[l].as_mut_slice().iter_mut().zip(vw[l].as_slice()) {
            *wv += t;
        }
        for (bv, t) in params.biases[l].iter_mut().zip(vb[l].iter()) {
            *bv += t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    fn hand_network() -> MlpParams {
        // d=1, h=2, L=2, ReLU, zero biases, W1 = [1, -1]^T, W2 = [1, 1]
        let arch = MlpArchitecture::new(vec![1, 2, 1], Activation::Relu, SQRT_2).unwrap();
        MlpParams {
            arch,
            weights: vec![
                Matrix::new(2, 1, vec![1.0, -1.0]).unwrap(),
                Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
            ],
            biases: vec![vec![0.0, 0.0], vec![0.0]],
            seed: 0,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = MlpArchitecture::mlp(3, 8, 2, 1, Activation::Softplus);
        let a = init_params(&arch, 42);
        let b = init_params(&arch, 42);
        assert_eq!(a, b);
        let c = init_params(&arch, 43);
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn init_first_layer_variance_near_unit() {
        // 784 x 1024 first layer: ~8e5 draws, sample variance within [0.95, 1.05]
        let arch = MlpArchitecture::mlp(784, 1024, 2, 1, Activation::Relu);
        let p = init_params(&arch, 7);
        let w = p.weights[0].as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 5.0 / n.sqrt(), "mean {mean}");
        assert!((0.95..=1.05).contains(&var), "variance {var}");
    }

    #[test]
    fn zero_bias_keeps_weights_aligned() {
        let arch = MlpArchitecture::mlp(3, 8, 2, 1, Activation::Relu);
        let a = init_params(&arch, 5);
        let b = init_params_zero_bias(&arch, 5);
        assert_eq!(a.weights, b.weights);
        assert!(b.biases.iter().all(|l| l.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_zero_params_is_zero() {
        let arch = MlpArchitecture::mlp(3, 4, 2, 1, Activation::Relu);
        let mut p = init_params(&arch, 1);
        for w in &mut p.weights {
            for v in w.as_mut_slice() {
                *v = 0.0;
            }
        }
        for b in &mut p.biases {
            for v in b {
                *v = 0.0;
            }
        }
        let xs = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let out = forward(&p, &xs).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_hand_network() {
        // z1 = (sqrt2/1) * [1,-1] * 1 = [sqrt2, -sqrt2]; f = (sqrt2/sqrt2)(sqrt2 + 0) = sqrt2
        let p = hand_network();
        let out = forward_vec(&p, &[1.0]).unwrap();
        assert!((out[0] - SQRT_2).abs() < 1e-14, "got {}", out[0]);
    }

    #[test]
    fn forward_softplus_is_lipschitz_continuous() {
        let arch = MlpArchitecture::mlp(4, 16, 3, 1, Activation::Softplus);
        let p = init_params(&arch, 3);
        let x = vec![0.3, -0.4, 0.9, 0.1];
        let f = forward_vec(&p, &x).unwrap()[0];
        // crude Lipschitz bound: product of layer spectral-norm upper bounds
        let mut k = 1.0;
        for (l, w) in p.weights.iter().enumerate() {
            k *= layer_scale(&p.arch, l) * w.frobenius_norm();
        }
        for eps in [1e-3, 1e-4, 1e-5] {
            let mut xp = x.clone();
            xp[0] += eps;
            let fp = forward_vec(&p, &xp).unwrap()[0];
            assert!((fp - f).abs() <= k * eps * 1.01, "eps {eps}: |df| {} > K eps {}", (fp - f).abs(), k * eps);
        }
    }

    #[test]
    fn hand_backprop_blocks_and_norm() {
        let p = hand_network();
        let g = per_sample_grad(&p, &[1.0], 0).unwrap();
        // order: W1 (2 entries), b1 (2), W2 (2), b2 (1)
        // dW1 = [sqrt2, 0], db1 = [1, 0], dW2 = [sqrt2, 0], db2 = 1
        let expected = [SQRT_2, 0.0, 1.0, 0.0, SQRT_2, 0.0, 1.0];
        assert_eq!(g.len(), expected.len());
        for (gv, ev) in g.iter().zip(expected.iter()) {
            assert!((gv - ev).abs() < 1e-14, "grad {g:?}");
        }
        let sq: f64 = g.iter().map(|v| v * v).sum();
        assert!((sq - 6.0).abs() < 1e-12, "squared norm {sq}");
    }

    #[test]
    fn relu_dead_network_grad_structure() {
        // all preactivations negative: only final-layer bias survives
        let arch = MlpArchitecture::new(vec![2, 3, 1], Activation::Relu, SQRT_2).unwrap();
        let mut p = init_params(&arch, 2);
        for b in p.biases[0].iter_mut() {
            *b = -10.0;
        }
        for v in p.weights[0].as_mut_slice() {
            *v = 0.01;
        }
        let g = per_sample_grad(&p, &[0.5, 0.5], 0).unwrap();
        let n_w1 = 6;
        let n_b1 = 3;
        let n_w2 = 3;
        assert!(g[..n_w1 + n_b1].iter().all(|&v| v == 0.0), "first layer grads should vanish");
        assert!(g[n_w1 + n_b1..n_w1 + n_b1 + n_w2].iter().all(|&v| v == 0.0), "W2 fed by zero acts");
        assert_eq!(g[n_w1 + n_b1 + n_w2], 1.0, "output bias grad");
    }

    #[test]
    fn grad_matches_central_differences() {
        let arch = MlpArchitecture::mlp(3, 6, 3, 1, Activation::Softplus);
        let p = init_params(&arch, 11);
        let x = [0.4, -0.2, 0.8];
        let g = per_sample_grad(&p, &x, 0).unwrap();
        let flat = p.flatten();
        let eps = 1e-4;
        let mut max_rel: f64 = 0.0;
        // probe a spread of parameter coordinates
        for idx in (0..flat.len()).step_by(flat.len() / 23 + 1) {
            let mut fp = flat.clone();
            fp[idx] += eps;
            let (w, b) = p.unflatten(&fp).unwrap();
            let plus = forward_vec(&MlpParams { arch: p.arch.clone(), weights: w, biases: b, seed: 0 }, &x).unwrap()[0];
            let mut fm = flat.clone();
            fm[idx] -= eps;
            let (w, b) = p.unflatten(&fm).unwrap();
            let minus = forward_vec(&MlpParams { arch: p.arch.clone(), weights: w, biases: b, seed: 0 }, &x).unwrap()[0];
            let fd = (plus - minus) / (2.0 * eps);
            let denom = fd.abs().max(1e-8);
            max_rel = max_rel.max((fd - g[idx]).abs() / denom);
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn jvp_zero_tangent_and_linearity() {
        let arch = MlpArchitecture::mlp(2, 5, 2, 2, Activation::Softplus);
        let p = init_params(&arch, 4);
        let xs = Matrix::new(2, 2, vec![0.1, 0.7, -0.3, 0.2]).unwrap();
        let zero = vec![0.0; p.param_count()];
        let t = jvp(&p, &xs, &zero).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        use rand::Rng;
        let v1: Vec<f64> = (0..p.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v2: Vec<f64> = (0..p.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let t1 = jvp(&p, &xs, &v1).unwrap();
        let t2 = jvp(&p, &xs, &v2).unwrap();
        let ts = jvp(&p, &xs, &sum).unwrap();
        for i in 0..ts.rows() {
            for j in 0..ts.cols() {
                assert!((ts.get(i, j) - t1.get(i, j) - t2.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let arch = MlpArchitecture::mlp(2, 6, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 6);
        let xs = Matrix::new(1, 2, vec![0.5, -0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        let v: Vec<f64> = (0..p.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = jvp(&p, &xs, &v).unwrap().get(0, 0);
        let flat = p.flatten();
        let eps = 1e-4;
        let shift = |sign: f64| {
            let moved: Vec<f64> = flat.iter().zip(&v).map(|(a, b)| a + sign * eps * b).collect();
            let (w, b) = p.unflatten(&moved).unwrap();
            forward(&MlpParams { arch: p.arch.clone(), weights: w, biases: b, seed: 0 }, &xs).unwrap().get(0, 0)
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * eps);
        assert!((fd - t).abs() / fd.abs().max(1e-8) < 1e-5, "jvp {t} vs fd {fd}");
    }

    #[test]
    fn width_padding_only_rescales() {
        // doubling a hidden width at fixed per-entry weights (zero padding)
        // changes the output only through the 1/sqrt(h) factor
        let arch = MlpArchitecture::new(vec![2, 4, 1], Activation::Relu, SQRT_2).unwrap();
        let p = init_params_zero_bias(&arch, 21);
        let x = vec![0.7, -0.4];
        let f = forward_vec(&p, &x).unwrap()[0];

        let arch2 = MlpArchitecture::new(vec![2, 8, 1], Activation::Relu, SQRT_2).unwrap();
        let mut w1 = Matrix::zeros(8, 2);
        for i in 0..4 {
            for j in 0..2 {
                w1.set(i, j, p.weights[0].get(i, j));
            }
        }
        let mut w2 = Matrix::zeros(1, 8);
        for j in 0..4 {
            w2.set(0, j, p.weights[1].get(0, j));
        }
        let p2 = MlpParams {
            arch: arch2,
            weights: vec![w1, w2],
            biases: vec![vec![0.0; 8], vec![0.0]],
            seed: 0,
        };
        let f2 = forward_vec(&p2, &x).unwrap()[0];
        // first layer scale unchanged (same h_0); second layer scale shrinks by sqrt(4/8)
        assert!((f2 - f * (4.0f64 / 8.0).sqrt()).abs() < 1e-12, "f {f} f2 {f2}");
    }

    #[test]
    fn train_zero_lr_is_identity() {
        let arch = MlpArchitecture::mlp(2, 4, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 1);
        let xs = Matrix::new(3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5]).unwrap();
        let ys = Matrix::column(vec![1.0, -1.0, 0.0]);
        let cfg = TrainConfig { learning_rate: 0.0, max_steps: 20, target_mse: 0.0, ..Default::default() };
        let out = train(&p, &xs, &ys, &cfg).unwrap();
        assert_eq!(out.params.flatten(), p.flatten());
        let first = out.history[0];
        assert!(out.history.iter().all(|&m| (m - first).abs() < 1e-12), "history not constant");
    }

    #[test]
    fn one_step_matches_per_sample_grad_accumulation() {
        let arch = MlpArchitecture::mlp(2, 4, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 9);
        let xs = Matrix::new(3, 2, vec![0.2, -0.1, 0.9, 0.4, -0.5, 0.3]).unwrap();
        let ys = Matrix::column(vec![1.0, -1.0, 0.5]);
        let eta = 0.05;
        let cfg = TrainConfig {
            learning_rate: eta,
            momentum: 0.0,
            max_steps: 1,
            target_mse: 0.0,
            check_every: 1,
            ..Default::default()
        };
        let out = train(&p, &xs, &ys, &cfg).unwrap();

        // oracle: theta_1 = theta_0 - (eta / n) * sum_i grad f(x_i) (f(x_i) - y_i)
        let n = xs.rows() as f64;
        let mut expected = p.flatten();
        for i in 0..xs.rows() {
            let x: Vec<f64> = xs.row(i).to_vec();
            let fi = forward_vec(&p, &x).unwrap()[0];
            let gi = per_sample_grad(&p, &x, 0).unwrap();
            let r = fi - ys.get(i, 0);
            for (e, g) in expected.iter_mut().zip(gi.iter()) {
                *e -= eta / n * g * r;
            }
        }
        let got = out.params.flatten();
        let max_diff = got
            .iter()
            .zip(expected.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn training_fits_small_problem() {
        let arch = MlpArchitecture::mlp(2, 64, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 17);
        let xs = Matrix::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap();
        let ys = Matrix::column(vec![1.0, -1.0, 1.0, -1.0]);
        let cfg = TrainConfig { max_steps: 3000, ..Default::default() };
        let out = train(&p, &xs, &ys, &cfg).unwrap();
        assert!(out.converged, "final mse {}", out.final_mse);
    }

    #[test]
    fn centered_training_fits_targets_of_centered_model() {
        let arch = MlpArchitecture::mlp(2, 64, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 23);
        let xs = Matrix::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap();
        let ys = Matrix::column(vec![1.0, -1.0, 1.0, -1.0]);
        let cfg = TrainConfig { max_steps: 3000, center_output: true, ..Default::default() };
        let out = train(&p, &xs, &ys, &cfg).unwrap();
        assert!(out.converged);
        let f0 = forward(&p, &xs).unwrap();
        let ft = forward(&out.params, &xs).unwrap();
        let centered = ft.sub(&f0).unwrap();
        let err = mse(&centered.sub(&ys).unwrap());
        assert!(err <= 0.011, "centered model train MSE {err}");
    }

    #[test]
    fn linearized_training_converges_to_kernel_closed_form() {
        // full batch, run to convergence on a well-conditioned instance:
        // agreement with the kernel expression to 1e-3 relative on eval points
        let (n, d) = (12, 12);
        let xs = Matrix::from_fn(n, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let ys = Matrix::from_fn(n, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let xe = Matrix::from_fn(5, d, |i, j| {
            let a = i % n;
            let b = (2 * i + 5) % n;
            if j == a {
                0.6
            } else if j == b {
                0.4
            } else {
                0.0
            }
        });
        let arch = MlpArchitecture::mlp(d, 128, 2, 1, Activation::Softplus);
        let params = init_params(&arch, 99);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_steps: 60_000,
            target_mse: 1e-12,
            linearized: true,
            ..Default::default()
        };
        let out = train(&params, &xs, &ys, &cfg).unwrap();
        assert!(out.converged, "final mse {}", out.final_mse);

        // linearized prediction at eval points from the trained tangent
        let dv: Vec<f64> = out
            .params
            .flatten()
            .iter()
            .zip(params.flatten())
            .map(|(a, b)| a - b)
            .collect();
        let f0e = forward(&params, &xe).unwrap();
        let tangent = jvp(&params, &xe, &dv).unwrap();

        let bundles = crate::ntk::kernel_bundles(&params, &xs, &xe).unwrap();
        let y: Vec<f64> = (0..n).map(|i| ys.get(i, 0)).collect();
        let f_closed = crate::kernel_models::predict_lin(&bundles[0], &y, 1e-10).unwrap();
        for i in 0..xe.rows() {
            let got = f0e.get(i, 0) + tangent.get(i, 0);
            let rel = (got - f_closed[i]).abs() / f_closed[i].abs().max(1e-6);
            assert!(rel <= 1e-3, "point {i}: {got} vs {} (rel {rel})", f_closed[i]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let arch = MlpArchitecture::mlp(2, 16, 2, 1, Activation::Softplus);
        let p = init_params(&arch, 3);
        let xs = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ys = Matrix::column(vec![1.0, -1.0]);
        let cfg = TrainConfig { learning_rate: 1e4, max_steps: 200, check_every: 1, ..Default::default() };
        match train(&p, &xs, &ys, &cfg) {
            Err(NnError::Diverged { .. }) => {}
            other => panic!("expected divergence, got mse {:?}", other.map(|o| o.final_mse)),
        }
    }
}
