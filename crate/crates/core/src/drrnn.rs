//! Deep residual recurrent network used as a learned implicit integrator.
//!
//! One time step refines a candidate next state through `K` layers. Layer
//! `i` evaluates the backward-Euler residual at the previous candidate,
//!
//! ```text
//! r_i = y_{i-1} - y_t - h f(t + h, y_{i-1})
//! H_i = gamma |r_i|^2 + beta H_{i-1},           H_0 = 0
//! y_1 = y_0 - W * tanh(U r_1)                   (elementwise W)
//! y_i = y_{i-1} - eta_i / sqrt(H_i + eps) r_i   for i > 1
//! ```
//!
//! starting from `y_0 = y_t`. Each step costs exactly `K` right-hand-side
//! evaluations regardless of stiffness.

use crate::error::{check_len, Error, Result};
use crate::integrators::{Rhs, Trajectory};
use crate::params::{matrix_entry_name, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RESIDUAL_BETA: f64 = 0.9;
pub const RESIDUAL_GAMMA: f64 = 0.1;
pub const DEFAULT_EPS_GUARD: f64 = 1e-8;
pub const DEFAULT_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DrRnnParams {
    n: usize,
    layers: usize,
    /// Elementwise gain of the first layer, length `n`.
    pub w: Vec<f64>,
    /// Row-major `n x n` residual mixing matrix.
    pub u: Vec<f64>,
    /// Step scalars for layers `2..=K`, length `K - 1`.
    pub eta: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub eps_guard: f64,
}

impl DrRnnParams {
    pub fn new(n: usize, layers: usize, w: Vec<f64>, u: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        let p = Self {
            n,
            layers,
            w,
            u,
            eta,
            beta: RESIDUAL_BETA,
            gamma: RESIDUAL_GAMMA,
            eps_guard: DEFAULT_EPS_GUARD,
        };
        p.validate()?;
        Ok(p)
    }

    /// Seeded initialisation: `W, eta ~ U(-0.1, 0.1)`, `U ~ U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn init(n: usize, layers: usize, seed: u64) -> Result<Self> {
        if n == 0 || layers == 0 {
            return Err(Error::InvalidSpec(format!(
                "DR-RNN needs n >= 1 and K >= 1, got n = {n}, K = {layers}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (n as f64).sqrt();
        let w = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let u = (0..n * n).map(|_| rng.gen_range(-bound..bound)).collect();
        let eta = (1..layers).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self::new(n, layers, w, u, eta)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn with_eps_guard(mut self, eps: f64) -> Self {
        self.eps_guard = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.layers == 0 {
            return Err(Error::InvalidSpec("DR-RNN needs n >= 1 and K >= 1".into()));
        }
        check_len("DR-RNN W", self.n, self.w.len())?;
        check_len("DR-RNN U", self.n * self.n, self.u.len())?;
        check_len("DR-RNN eta", self.layers - 1, self.eta.len())?;
        let all = self
            .w
            .iter()
            .chain(&self.u)
            .chain(&self.eta)
            .chain([&self.beta, &self.gamma, &self.eps_guard]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("DR-RNN parameters must be finite".into()));
        }
        if !(self.eps_guard > 0.0) {
            return Err(Error::InvalidSpec("eps_guard must be positive".into()));
        }
        Ok(())
    }
}

impl ParamSet for DrRnnParams {
    fn num_params(&self) -> usize {
        self.n + self.n * self.n + self.eta.len()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w);
        v.extend_from_slice(&self.u);
        v.extend_from_slice(&self.eta);
        v
    }

    fn assign(&mut self, flat: &[f64]) {
        let (w, rest) = flat.split_at(self.n);
        let (u, eta) = rest.split_at(self.n * self.n);
        self.w.copy_from_slice(w);
        self.u.copy_from_slice(u);
        self.eta.copy_from_slice(eta);
    }

    fn param_name(&self, idx: usize) -> String {
        let nn = self.n * self.n;
        if idx < self.n {
            format!("W[{idx}]")
        } else if idx < self.n + nn {
            matrix_entry_name("U", idx - self.n, self.n)
        } else {
            // eta is indexed by layer number
            format!("eta[{}]", idx - self.n - nn + 2)
        }
    }
}

/// Intermediate values of one step, kept for diagnostics and backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `y_0 ..= y_K`.
    pub candidates: Vec<Vec<f64>>,
    /// `r_1 ..= r_K`.
    pub residuals: Vec<Vec<f64>>,
    /// `H_1 ..= H_K`.
    pub norm_accumulator: Vec<f64>,
    /// `tanh(U r_1)`.
    pub activation: Vec<f64>,
}

impl LayerTrace {
    pub fn output(&self) -> &[f64] {
        self.candidates.last().expect("trace has at least y_0")
    }
}

fn finite_or(v: &[f64], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { layer: Some(layer) })
    }
}

fn matvec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    a.chunks_exact(n)
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn drrnn_step<R: Rhs + ?Sized>(
    params: &DrRnnParams,
    f: &R,
    t: f64,
    y_t: &[f64],
    h: f64,
) -> Result<(Vec<f64>, LayerTrace)> {
    let n = params.n;
    check_len("DR-RNN state", n, y_t.len())?;
    check_len("DR-RNN rhs dimension", n, f.dim())?;
    finite_or(y_t, 0)?;
    let t_next = t + h;
    let mut candidates = Vec::with_capacity(params.layers + 1);
    let mut residuals = Vec::with_capacity(params.layers);
    let mut acc = Vec::with_capacity(params.layers);
    let mut activation = Vec::new();
    candidates.push(y_t.to_vec());
    let mut fy = vec![0.0; n];
    let mut h_prev = 0.0;

    for layer in 1..=params.layers {
        let prev = &candidates[layer - 1];
        f.eval(t_next, prev, &mut fy)?;
        let r: Vec<f64> = (0..n).map(|j| prev[j] - y_t[j] - h * fy[j]).collect();
        finite_or(&r, layer)?;
        let h_acc = params.gamma * r.iter().map(|v| v * v).sum::<f64>() + params.beta * h_prev;
        let next: Vec<f64> = if layer == 1 {
            activation = matvec(&params.u, &r, n).into_iter().map(f64::tanh).collect();
            (0..n).map(|j| prev[j] - params.w[j] * activation[j]).collect()
        } else {
            let scale = params.eta[layer - 2] / (h_acc + params.eps_guard).sqrt();
            (0..n).map(|j| prev[j] - scale * r[j]).collect()
        };
        finite_or(&next, layer)?;
        h_prev = h_acc;
        acc.push(h_acc);
        residuals.push(r);
        candidates.push(next);
    }

    let out = candidates.last().cloned().unwrap_or_default();
    Ok((
        out,
        LayerTrace {
            candidates,
            residuals,
            norm_accumulator: acc,
            activation,
        },
    ))
}

/// Gradient container laid out like [`DrRnnParams::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct DrRnnGrad {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub eta: Vec<f64>,
}

impl DrRnnGrad {
    pub fn zeros(params: &DrRnnParams) -> Self {
        Self {
            w: vec![0.0; params.n],
            u: vec![0.0; params.n * params.n],
            eta: vec![0.0; params.eta.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.extend_from_slice(&self.u);
        v.extend_from_slice(&self.eta);
        v
    }
}

/// Reverse pass through one [`drrnn_step`].
///
/// `grad_out` is the cotangent of the step output `y_K`. Parameter
/// gradients are accumulated into `grad`; the cotangent of the step input
/// `y_t` is returned.
pub fn drrnn_step_backward<R: Rhs + ?Sized>(
    params: &DrRnnParams,
    f: &R,
    t: f64,
    h: f64,
    trace: &LayerTrace,
    grad_out: &[f64],
    grad: &mut DrRnnGrad,
) -> Result<Vec<f64>> {
    let n = params.n;
    let k_layers = params.layers;
    check_len("DR-RNN output cotangent", n, grad_out.len())?;
    let t_next = t + h;
    let mut grad_yt = vec![0.0; n];
    let mut grad_y = grad_out.to_vec();
    // cotangent of H_i, filled from above by the beta recurrence
    let mut grad_acc = vec![0.0; k_layers + 1];
    let mut jt = vec![0.0; n];

    for layer in (1..=k_layers).rev() {
        let r = &trace.residuals[layer - 1];
        let prev = &trace.candidates[layer - 1];
        let h_acc = trace.norm_accumulator[layer - 1];
        let mut grad_r = vec![0.0; n];
        let mut grad_prev = grad_y.clone();

        if layer == 1 {
            let a = &trace.activation;
            let mut grad_z = vec![0.0; n];
            for j in 0..n {
                grad.w[j] -= grad_y[j] * a[j];
                grad_z[j] = -params.w[j] * grad_y[j] * (1.0 - a[j] * a[j]);
            }
            for (row, gz) in grad_z.iter().enumerate() {
                for col in 0..n {
                    grad.u[row * n + col] += gz * r[col];
                    grad_r[col] += params.u[row * n + col] * gz;
                }
            }
        } else {
            let eta = params.eta[layer - 2];
            let inv_sqrt = 1.0 / (h_acc + params.eps_guard).sqrt();
            let dot: f64 = grad_y.iter().zip(r).map(|(g, v)| g * v).sum();
            grad.eta[layer - 2] -= inv_sqrt * dot;
            let grad_scale = -eta * dot;
            // d/dH (H + eps)^(-1/2)
            grad_acc[layer] += grad_scale * (-0.5) * inv_sqrt * inv_sqrt * inv_sqrt;
            let step = eta * inv_sqrt;
            for j in 0..n {
                grad_r[j] -= step * grad_y[j];
            }
        }

        // H_i = gamma |r_i|^2 + beta H_{i-1}
        let g_acc = grad_acc[layer];
        for j in 0..n {
            grad_r[j] += 2.0 * params.gamma * g_acc * r[j];
        }
        grad_acc[layer - 1] += params.beta * g_acc;

        // r_i = y_{i-1} - y_t - h f(t + h, y_{i-1})
        f.vjp(t_next, prev, &grad_r, &mut jt)?;
        for j in 0..n {
            grad_prev[j] += grad_r[j] - h * jt[j];
            grad_yt[j] -= grad_r[j];
        }
        grad_y = grad_prev;
    }

    // y_0 = y_t
    for j in 0..n {
        grad_yt[j] += grad_y[j];
    }
    Ok(grad_yt)
}

/// Repeats [`drrnn_step`] `n_steps` times from `(t0, y0)`.
pub fn drrnn_rollout<R: Rhs + ?Sized>(
    params: &DrRnnParams,
    f: &R,
    y0: &[f64],
    t0: f64,
    n_steps: usize,
    h: f64,
) -> Result<Trajectory> {
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    finite_or(y0, 0)?;
    check_len("DR-RNN initial state", params.n, y0.len())?;
    times.push(t0);
    states.push(y0.to_vec());
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        let (next, _) = drrnn_step(params, f, t, &states[step], h).map_err(|e| Error::StepFailed {
            step,
            source: Box::new(e),
        })?;
        times.push(t0 + (step + 1) as f64 * h);
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

/// Euclidean norm of each layer residual `r_1 ..= r_K`.
pub fn residual_norm_profile(trace: &LayerTrace) -> Vec<f64> {
    trace
        .residuals
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{CountingRhs, FnRhs, LinearRhs};

    fn zero_rhs(n: usize) -> FnRhs<impl Fn(f64, &[f64], &mut [f64])> {
        FnRhs::new(n, |_, _, d: &mut [f64]| d.fill(0.0))
    }

    #[test]
    fn zero_rhs_is_a_fixed_point() {
        let p = DrRnnParams::init(3, 4, 9).unwrap();
        let y = [0.3, -1.2, 7.0];
        let (out, trace) = drrnn_step(&p, &zero_rhs(3), 0.0, &y, 0.25).unwrap();
        assert_eq!(out, y);
        assert!(trace.candidates.iter().all(|c| c == &y));
        assert!(residual_norm_profile(&trace).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gain_single_layer_is_identity() {
        let p = DrRnnParams::new(2, 1, vec![0.0, 0.0], vec![1.0, 0.5, -0.3, 2.0], vec![]).unwrap();
        let f = LinearRhs::new(2, vec![-1.0, 0.2, 0.3, -0.5]).unwrap();
        let (out, trace) = drrnn_step(&p, &f, 0.0, &[1.0, 2.0], 0.25).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
        assert_eq!(residual_norm_profile(&trace).len(), 1);
    }

    #[test]
    fn scalar_two_layer_example() {
        // frozen from a direct transcription of the layer equations
        let p = DrRnnParams::new(1, 2, vec![0.5], vec![1.0], vec![0.1]).unwrap();
        let f = LinearRhs::diagonal(&[-1.0]);
        let (out, trace) = drrnn_step(&p, &f, 0.0, &[1.0], 0.25).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        assert!(close(trace.candidates[1][0], 0.8775406687981454));
        assert!(close(trace.residuals[1][0], 0.09692583599768176));
        assert!(close(trace.norm_accumulator[0], 0.00625));
        assert!(close(trace.norm_accumulator[1], 0.006564461768384951));
        assert!(close(out[0], 0.7579107899032123));
    }

    #[test]
    fn cost_is_k_evaluations_per_step() {
        for k in 1..=5 {
            let p = DrRnnParams::init(2, k, 1).unwrap();
            let f = CountingRhs::new(LinearRhs::diagonal(&[-0.3, -0.1]));
            drrnn_rollout(&p, &f, &[1.0, 1.0], 0.0, 7, 0.25).unwrap();
            assert_eq!(f.evaluations(), 7 * k);
        }
    }

    #[test]
    fn rollout_edge_cases() {
        let p = DrRnnParams::init(2, 3, 4).unwrap();
        let t = drrnn_rollout(&p, &zero_rhs(2), &[1.0, 2.0], 5.0, 0, 0.25).unwrap();
        assert_eq!(t.len(), 1);
        let t = drrnn_rollout(&p, &zero_rhs(2), &[1.0, 2.0], 5.0, 10, 0.25).unwrap();
        assert!(t.states.iter().all(|s| s == &vec![1.0, 2.0]));
        assert_eq!(t.times[10], 7.5);
    }

    #[test]
    fn non_finite_intermediate_reports_layer() {
        let p = DrRnnParams::new(1, 2, vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let f = FnRhs::new(1, |_, y: &[f64], d: &mut [f64]| {
            d[0] = if y[0] == 1.0 { 1.0 } else { f64::INFINITY }
        });
        let err = drrnn_step(&p, &f, 0.0, &[1.0], 0.25).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { layer: Some(2) }));
    }

    #[test]
    fn step_is_deterministic() {
        let p = DrRnnParams::init(3, 3, 21).unwrap();
        let f = LinearRhs::new(3, (0..9).map(|k| (k as f64 - 4.0) * 0.1).collect()).unwrap();
        let a = drrnn_step(&p, &f, 0.0, &[0.2, 0.4, 0.6], 0.25).unwrap();
        let b = drrnn_step(&p, &f, 0.0, &[0.2, 0.4, 0.6], 0.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = DrRnnParams::init(4, 4, 7).unwrap();
        assert_eq!(a, DrRnnParams::init(4, 4, 7).unwrap());
        assert_ne!(a, DrRnnParams::init(4, 4, 8).unwrap());
        assert!(a.w.iter().chain(&a.eta).all(|v| v.abs() < 0.1));
        assert!(a.u.iter().all(|v| v.abs() < 0.5));
        assert_eq!((a.beta, a.gamma), (0.9, 0.1));
        assert_eq!(a.param_name(4 + 16), "eta[2]");
        assert_eq!(a.param_name(4 + 6), "U[1,2]");
    }
}
