//! Fixed-step time integration: classical RK4, backward (implicit) Euler,
//! and the backward-Euler residual that the learned integrator drives to zero.

use crate::error::{check_len, Error, Result};
use nalgebra::{DMatrix, DVector};
use std::cell::Cell;

/// Default integration step: a quarter day.
pub const DEFAULT_STEP: f64 = 0.25;

/// Right-hand side `dy/dt = f(t, y)` of an autonomous-or-not ODE system.
///
/// Implementations must be deterministic and side-effect free. `vjp`
/// returns `J(t, y)^T v`; the default falls back to central differences,
/// which costs `2 * dim` evaluations.
pub trait Rhs {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()>;

    fn vjp(&self, t: f64, y: &[f64], cotangent: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        let mut yp = y.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let step = 1e-6 * (1.0 + y[j].abs());
            yp[j] = y[j] + step;
            self.eval(t, &yp, &mut fp)?;
            yp[j] = y[j] - step;
            self.eval(t, &yp, &mut fm)?;
            yp[j] = y[j];
            out[j] = (0..n).map(|i| cotangent[i] * (fp[i] - fm[i])).sum::<f64>() / (2.0 * step);
        }
        Ok(())
    }
}

impl<R: Rhs + ?Sized> Rhs for &R {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        (**self).eval(t, y, dydt)
    }
    fn vjp(&self, t: f64, y: &[f64], cotangent: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).vjp(t, y, cotangent, out)
    }
}

/// Wraps a closure as an [`Rhs`] (Jacobian products by finite differences).
pub struct FnRhs<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnRhs<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> Rhs for FnRhs<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        (self.f)(t, y, dydt);
        Ok(())
    }
}

/// `dy/dt = A y` with a dense row-major `A`.
#[derive(Debug, Clone)]
pub struct LinearRhs {
    n: usize,
    a: Vec<f64>,
}

impl LinearRhs {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        check_len("linear system matrix", n * n, a.len())?;
        Ok(Self { n, a })
    }

    pub fn diagonal(rates: &[f64]) -> Self {
        let n = rates.len();
        let mut a = vec![0.0; n * n];
        for (j, r) in rates.iter().enumerate() {
            a[j * n + j] = *r;
        }
        Self { n, a }
    }
}

impl Rhs for LinearRhs {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        check_len("linear rhs state", self.n, y.len())?;
        for (row, out) in self.a.chunks_exact(self.n).zip(dydt.iter_mut()) {
            *out = row.iter().zip(y).map(|(a, b)| a * b).sum();
        }
        Ok(())
    }
    fn vjp(&self, _t: f64, _y: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, vi) in self.a.chunks_exact(self.n).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        Ok(())
    }
}

/// Rescaled system `g(t, x) = f(t, c x) / c`, the dynamics of `x = y / c`.
#[derive(Debug, Clone)]
pub struct ScaledRhs<R> {
    inner: R,
    factor: f64,
}

impl<R: Rhs> ScaledRhs<R> {
    pub fn new(inner: R, factor: f64) -> Self {
        Self { inner, factor }
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }
}

impl<R: Rhs> Rhs for ScaledRhs<R> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        let scaled: Vec<f64> = y.iter().map(|v| v * self.factor).collect();
        self.inner.eval(t, &scaled, dydt)?;
        dydt.iter_mut().for_each(|v| *v /= self.factor);
        Ok(())
    }
    fn vjp(&self, t: f64, y: &[f64], cotangent: &[f64], out: &mut [f64]) -> Result<()> {
        // d/dx [f(c x) / c] = J(c x)
        let scaled: Vec<f64> = y.iter().map(|v| v * self.factor).collect();
        self.inner.vjp(t, &scaled, cotangent, out)
    }
}

/// Counts forward evaluations of the wrapped right-hand side.
pub struct CountingRhs<R> {
    inner: R,
    evals: Cell<usize>,
}

impl<R: Rhs> CountingRhs<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            evals: Cell::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evals.get()
    }

    pub fn reset(&self) {
        self.evals.set(0);
    }
}

impl<R: Rhs> Rhs for CountingRhs<R> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        self.evals.set(self.evals.get() + 1);
        self.inner.eval(t, y, dydt)
    }
    fn vjp(&self, t: f64, y: &[f64], cotangent: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner.vjp(t, y, cotangent, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.states.last().map(|s| s.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rk4,
    ImplicitEuler,
}

fn ensure_finite(y: &[f64]) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { layer: None })
    }
}

pub fn rk4_step<R: Rhs + ?Sized>(f: &R, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidSpec(format!("step size must be positive, got {h}")));
    }
    let n = f.dim();
    check_len("rk4 state", n, y.len())?;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    f.eval(t, y, &mut k1)?;
    ensure_finite(&k1)?;
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * k1[j];
    }
    f.eval(t + 0.5 * h, &tmp, &mut k2)?;
    ensure_finite(&k2)?;
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * k2[j];
    }
    f.eval(t + 0.5 * h, &tmp, &mut k3)?;
    ensure_finite(&k3)?;
    for j in 0..n {
        tmp[j] = y[j] + h * k3[j];
    }
    f.eval(t + h, &tmp, &mut k4)?;
    ensure_finite(&k4)?;

    let out: Vec<f64> = (0..n)
        .map(|j| y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
        .collect();
    ensure_finite(&out)?;
    Ok(out)
}

/// Backward-Euler residual `y_candidate - y_prev - h f(t_next, y_candidate)`.
///
/// Zero exactly at the implicit-Euler update `y' = y + h f(t + h, y')`.
pub fn residual<R: Rhs + ?Sized>(f: &R, t_next: f64, y_candidate: &[f64], y_prev: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = f.dim();
    check_len("residual candidate", n, y_candidate.len())?;
    check_len("residual previous state", n, y_prev.len())?;
    let mut fy = vec![0.0; n];
    f.eval(t_next, y_candidate, &mut fy)?;
    Ok((0..n).map(|j| y_candidate[j] - y_prev[j] - h * fy[j]).collect())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitEulerOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Fixed-point iterations attempted before switching to Newton.
    pub fixed_point_budget: usize,
}

impl Default for ImplicitEulerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 100,
            fixed_point_budget: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitSolve {
    pub state: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// One backward-Euler step solved to `‖residual‖∞ <= tol`.
///
/// Starts from the previous state, runs damped fixed-point iteration
/// `y <- (1 - w) y + w (y_prev + h f(y))` (halving `w` whenever the residual
/// grows), then falls back to Newton with a finite-difference Jacobian.
pub fn implicit_euler_step<R: Rhs + ?Sized>(f: &R, t: f64, y: &[f64], h: f64, tol: f64) -> Result<Vec<f64>> {
    let opts = ImplicitEulerOptions {
        tol,
        ..Default::default()
    };
    implicit_euler_solve(f, t, y, h, &opts).map(|s| s.state)
}

pub fn implicit_euler_solve<R: Rhs + ?Sized>(
    f: &R,
    t: f64,
    y: &[f64],
    h: f64,
    opts: &ImplicitEulerOptions,
) -> Result<ImplicitSolve> {
    if !(h > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "implicit Euler needs h > 0 and tol > 0, got h = {h}, tol = {}",
            opts.tol
        )));
    }
    let n = f.dim();
    check_len("implicit Euler state", n, y.len())?;
    let t_next = t + h;
    let mut x = y.to_vec();
    let mut r = residual(f, t_next, &x, y, h)?;
    let mut norm = inf_norm(&r);
    let mut iterations = 0;
    let mut damping = 1.0;

    while norm > opts.tol && iterations < opts.fixed_point_budget.min(opts.max_iterations) {
        iterations += 1;
        // y_prev + h f(x) = x - r
        let trial: Vec<f64> = (0..n).map(|j| x[j] - damping * r[j]).collect();
        let trial_r = match residual(f, t_next, &trial, y, h) {
            Ok(tr) if tr.iter().all(|v| v.is_finite()) => tr,
            _ => {
                damping *= 0.5;
                continue;
            }
        };
        let trial_norm = inf_norm(&trial_r);
        if trial_norm < norm {
            x = trial;
            r = trial_r;
            norm = trial_norm;
        } else {
            damping *= 0.5;
            if damping < 1e-6 {
                break;
            }
        }
    }

    while norm > opts.tol && iterations < opts.max_iterations {
        iterations += 1;
        let jac = residual_jacobian(f, t_next, &x, y, h, &r)?;
        let rhs = DVector::from_iterator(n, r.iter().map(|v| -v));
        let Some(dx) = jac.lu().solve(&rhs) else {
            break;
        };
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-4 {
            let trial: Vec<f64> = (0..n).map(|j| x[j] + step * dx[j]).collect();
            if let Ok(tr) = residual(f, t_next, &trial, y, h) {
                let tn = inf_norm(&tr);
                if tn.is_finite() && tn < norm {
                    x = trial;
                    r = tr;
                    norm = tn;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if norm <= opts.tol {
        Ok(ImplicitSolve {
            state: x,
            iterations,
            residual_norm: norm,
        })
    } else {
        Err(Error::NoConvergence {
            iterations,
            residual: norm,
        })
    }
}

fn residual_jacobian<R: Rhs + ?Sized>(
    f: &R,
    t_next: f64,
    x: &[f64],
    y_prev: &[f64],
    h: f64,
    r: &[f64],
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let step = 1e-7 * (1.0 + x[j].abs());
        xp[j] = x[j] + step;
        let rp = residual(f, t_next, &xp, y_prev, h)?;
        xp[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (rp[i] - r[i]) / step;
        }
    }
    Ok(jac)
}

/// Integrates `n_steps` fixed steps from `(t0, y0)`.
pub fn simulate<R: Rhs + ?Sized>(
    f: &R,
    y0: &[f64],
    t0: f64,
    n_steps: usize,
    h: f64,
    method: Method,
) -> Result<Trajectory> {
    check_len("initial state", f.dim(), y0.len())?;
    ensure_finite(y0)?;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(t0);
    states.push(y0.to_vec());
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        let prev = &states[step];
        let next = match method {
            Method::Rk4 => rk4_step(f, t, prev, h),
            Method::ImplicitEuler => implicit_euler_step(f, t, prev, h, 1e-10),
        }
        .map_err(|e| Error::StepFailed {
            step,
            source: Box::new(e),
        })?;
        times.push(t0 + (step + 1) as f64 * h);
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> LinearRhs {
        LinearRhs::diagonal(&[-1.0])
    }

    #[test]
    fn rk4_zero_rhs_is_identity() {
        let f = FnRhs::new(3, |_, _, d: &mut [f64]| d.fill(0.0));
        let y = [1.0, -2.0, 3.5];
        assert_eq!(rk4_step(&f, 0.0, &y, 0.25).unwrap(), y);
    }

    #[test]
    fn rk4_decay_matches_taylor_polynomial() {
        // sum_{k<=4} (-h)^k / k! at h = 1/4
        let y = rk4_step(&decay(), 0.0, &[1.0], 0.25).unwrap();
        assert_eq!(y[0], 0.77880859375);
    }

    #[test]
    fn rk4_constant_rate_is_exact() {
        let f = FnRhs::new(2, |_, _, d: &mut [f64]| d.copy_from_slice(&[0.5, -2.0]));
        let y = rk4_step(&f, 3.0, &[1.0, 1.0], 0.25).unwrap();
        assert_eq!(y, vec![1.125, 0.5]);
    }

    #[test]
    fn rk4_reports_non_finite_stages() {
        let f = FnRhs::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = 1.0 / (y[0] - 1.0));
        assert!(matches!(
            rk4_step(&f, 0.0, &[1.0], 0.1),
            Err(Error::NonFiniteState { .. })
        ));
    }

    #[test]
    fn implicit_euler_zero_rhs_needs_no_iterations() {
        let f = FnRhs::new(2, |_, _, d: &mut [f64]| d.fill(0.0));
        let s = implicit_euler_solve(&f, 0.0, &[1.0, 2.0], 0.25, &ImplicitEulerOptions::default()).unwrap();
        assert_eq!(s.state, vec![1.0, 2.0]);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn implicit_euler_decay_closed_form() {
        let y = implicit_euler_step(&decay(), 0.0, &[1.0], 0.25, 1e-13).unwrap();
        assert!((y[0] - 0.8).abs() < 1e-12);
        let r = residual(&decay(), 0.25, &y, &[1.0], 0.25).unwrap();
        assert!(r[0].abs() <= 1e-13);
    }

    #[test]
    fn implicit_euler_newton_fallback_handles_stiff_case() {
        // h * |lambda| = 25: plain fixed-point iteration diverges
        let f = LinearRhs::diagonal(&[-100.0, -0.5]);
        let s = implicit_euler_solve(&f, 0.0, &[1.0, 1.0], 0.25, &ImplicitEulerOptions::default()).unwrap();
        assert!((s.state[0] - 1.0 / 26.0).abs() < 1e-10);
        assert!((s.state[1] - 1.0 / 1.125).abs() < 1e-10);
    }

    #[test]
    fn implicit_euler_reports_no_convergence() {
        // y' = y + h (y^2 + 1) has no real root for h = 1, y = 1
        let f = FnRhs::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = y[0] * y[0] + 1.0);
        let err = implicit_euler_step(&f, 0.0, &[1.0], 1.0, 1e-10).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { .. }));
    }

    #[test]
    fn implicit_euler_is_a_stable() {
        for &h in &[0.01, 0.5, 3.0, 100.0] {
            for &lambda in &[-0.1, -1.0, -50.0] {
                let f = LinearRhs::diagonal(&[lambda]);
                let y = implicit_euler_step(&f, 0.0, &[1.0], h, 1e-12).unwrap();
                assert!(y[0].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn residual_examples() {
        let zero = FnRhs::new(2, |_, _, d: &mut [f64]| d.fill(0.0));
        assert_eq!(
            residual(&zero, 1.0, &[1.0, 2.0], &[1.0, 2.0], 0.25).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(residual(&decay(), 0.25, &[1.0], &[1.0], 0.25).unwrap(), vec![0.25]);
        assert!(matches!(
            residual(&decay(), 0.25, &[1.0, 2.0], &[1.0], 0.25),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn simulate_counts_states() {
        let t = simulate(&decay(), &[1.0], 0.0, 0, 0.25, Method::Rk4).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.states[0], vec![1.0]);
        let t = simulate(&decay(), &[1.0], 0.0, 480, DEFAULT_STEP, Method::Rk4).unwrap();
        assert_eq!(t.len(), 481);
        assert_eq!(*t.times.last().unwrap(), 120.0);
        assert!(t.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn simulate_reports_failing_step() {
        let f = FnRhs::new(1, |t, _, d: &mut [f64]| d[0] = if t >= 0.5 { f64::NAN } else { 1.0 });
        let err = simulate(&f, &[0.0], 0.0, 10, 0.25, Method::Rk4).unwrap_err();
        assert!(matches!(err, Error::StepFailed { step: 1, .. }));
    }

    #[test]
    fn rk4_fourth_order_on_decay() {
        let err = |n: usize| {
            let h = 1.0 / n as f64;
            let t = simulate(&decay(), &[1.0], 0.0, n, h, Method::Rk4).unwrap();
            (t.last().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        for n in [4, 8, 16] {
            let ratio = err(n) / err(2 * n);
            assert!((ratio - 16.0).abs() <= 0.2 * 16.0, "ratio {ratio}");
        }
    }

    #[test]
    fn counting_wrapper_counts() {
        let f = CountingRhs::new(decay());
        rk4_step(&f, 0.0, &[1.0], 0.1).unwrap();
        assert_eq!(f.evaluations(), 4);
    }

    #[test]
    fn scaled_rhs_is_consistent() {
        let inner = FnRhs::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = -y[0] * y[0]);
        let g = ScaledRhs::new(inner, 10.0);
        let mut d = [0.0];
        g.eval(0.0, &[0.5], &mut d).unwrap();
        // f(5) / 10 = -2.5
        assert!((d[0] + 2.5).abs() < 1e-15);
    }
}
