//! Finite-difference verification of the analytic gradients.

use crate::data::SnapshotMatrix;
use crate::drrnn::{drrnn_step, drrnn_step_backward, DrRnnGrad, DrRnnParams};
use crate::error::{check_len, Result};
use crate::integrators::Rhs;
use crate::params::ParamSet;
use crate::recurrent::{run_sequence, sequence_backward, LstmParams, RnnParams, SequenceModel};
use crate::seird::{ParamSchedule, SeirdParams, SeirdRhs};
use crate::training::{DrRnnObjective, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error as a fraction of the largest
/// analytic entry. Entries far below that are compared on its scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

/// `|a - fd| / max(|a|, |fd|, floor * scale, 1e-300)` where `scale` is the
/// largest analytic magnitude of the gradient being checked.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic
        .abs()
        .max(numeric.abs())
        .max(RELATIVE_ERROR_FLOOR * scale)
        .max(1e-300);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` with central differences of `loss`, stepping each
/// parameter by `1e-5 (1 + |theta|)`.
pub fn check_gradient<P, L>(label: &str, params: &P, analytic: &[f64], loss: L) -> Result<GradCheckReport>
where
    P: ParamSet,
    L: Fn(&P) -> Result<f64>,
{
    let base = params.flatten();
    check_len("analytic gradient", base.len(), analytic.len())?;
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut report = GradCheckReport {
        label: label.to_string(),
        n_params: base.len(),
        max_rel_error: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for k in 0..base.len() {
        let step = 1e-5 * (1.0 + base[k].abs());
        flat[k] = base[k] + step;
        probe.assign(&flat);
        let up = loss(&probe)?;
        flat[k] = base[k] - step;
        probe.assign(&flat);
        let down = loss(&probe)?;
        flat[k] = base[k];
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[k], numeric, scale);
        if err > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = err;
            report.worst_param = params.param_name(k);
            report.analytic = analytic[k];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// `f(y) = A tanh(y) + b`, a smooth nonlinear field with an exact VJP.
#[derive(Debug, Clone)]
pub struct TanhRhs {
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl TanhRhs {
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            n,
            a: (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            b: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }
}

impl Rhs for TanhRhs {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        check_len("tanh rhs", self.n, y.len())?;
        let th: Vec<f64> = y.iter().map(|v| v.tanh()).collect();
        for (r, out) in dydt.iter_mut().enumerate() {
            *out = self.b[r] + (0..self.n).map(|c| self.a[r * self.n + c] * th[c]).sum::<f64>();
        }
        Ok(())
    }

    fn vjp(&self, _t: f64, y: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        for c in 0..self.n {
            let d = 1.0 - y[c].tanh().powi(2);
            out[c] = d * (0..self.n).map(|r| self.a[r * self.n + c] * v[r]).sum::<f64>();
        }
        Ok(())
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Loss `sum_j c_j y_j + |y - target|^2 / 2` of a two-step rollout.
fn drrnn_rollout_instance(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..=5);
    let layers = rng.gen_range(1..=3);
    let mut params = DrRnnParams::init(n, layers, rng.gen())?;
    // keep eta away from zero so every path carries signal
    params.eta = rand_vec(rng, layers - 1, 0.05, 0.3);
    params.w = rand_vec(rng, n, -0.5, 0.5);
    let f = TanhRhs::random(n, rng);
    let y0 = rand_vec(rng, n, -1.0, 1.0);
    let weights = rand_vec(rng, n, -1.0, 1.0);
    let target = rand_vec(rng, n, -1.0, 1.0);
    let h = 0.25;
    let steps = 2;

    let loss = |p: &DrRnnParams| -> Result<f64> {
        let mut y = y0.clone();
        for s in 0..steps {
            y = drrnn_step(p, &f, s as f64 * h, &y, h)?.0;
        }
        Ok((0..n)
            .map(|j| weights[j] * y[j] + 0.5 * (y[j] - target[j]).powi(2))
            .sum())
    };

    let mut ys = vec![y0.clone()];
    let mut traces = Vec::new();
    for s in 0..steps {
        let (y, trace) = drrnn_step(&params, &f, s as f64 * h, &ys[s], h)?;
        ys.push(y);
        traces.push(trace);
    }
    let mut g: Vec<f64> = (0..n).map(|j| weights[j] + ys[steps][j] - target[j]).collect();
    let mut grad = DrRnnGrad::zeros(&params);
    for s in (0..steps).rev() {
        g = drrnn_step_backward(&params, &f, s as f64 * h, h, &traces[s], &g, &mut grad)?;
    }
    let mut analytic = grad.flatten();
    if corrupt {
        analytic[0] += 1e-3 * (1.0 + analytic[0].abs());
    }
    check_gradient(&format!("drrnn rollout n={n} K={layers}"), &params, &analytic, loss)
}

/// Full physics-informed training objective on a short mean-field SEIRD
/// series.
fn drrnn_objective_instance(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let layers = rng.gen_range(1..=3);
    let mut params = DrRnnParams::init(5, layers, rng.gen())?;
    params.eta = rand_vec(rng, layers - 1, 0.05, 0.3);
    params.w = rand_vec(rng, 5, -0.5, 0.5);
    let seird = SeirdParams {
        phi_i: rng.gen_range(0.1..0.5),
        phi_e: rng.gen_range(0.0..0.3),
        alpha_inc: rng.gen_range(0.1..0.4),
        gamma_e: rng.gen_range(0.0..0.1),
        gamma_i: rng.gen_range(0.05..0.2),
        delta: rng.gen_range(0.0..0.05),
        allee: rng.gen_range(0.0..0.2),
        ..SeirdParams::zero()
    };
    let f = SeirdRhs::mean_field(ParamSchedule::constant(seird));
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let mut r = rand_vec(rng, 5, 0.0, 0.2);
            r[0] += 0.7;
            r
        })
        .collect();
    let data = SnapshotMatrix::with_cadence(vec![0, 1, 2], rows, 1, 0.5)?;
    let (omega_u, omega_s) = (1.0, rng.gen_range(0.1..2.0));
    let objective = DrRnnObjective::new(&f, &data, 0.25)?;
    let (_, analytic) = objective.evaluate(&params, omega_u, omega_s)?;
    let loss = |p: &DrRnnParams| -> Result<f64> {
        let (parts, _) = objective.evaluate(p, omega_u, omega_s)?;
        Ok(omega_u * parts.mse_u + omega_s * parts.mse_s)
    };
    check_gradient(&format!("drrnn objective K={layers}"), &params, &analytic, loss)
}

/// Loss `|x_t - target_t|^2 / 2` summed over a teacher-forced sequence.
fn sequence_instance<M: SequenceModel>(
    label: &str,
    model: M,
    rng: &mut ChaCha8Rng,
    steps: usize,
) -> Result<GradCheckReport> {
    let inputs: Vec<Vec<f64>> = (0..steps)
        .map(|_| rand_vec(rng, model.input_size(), -1.0, 1.0))
        .collect();
    let targets: Vec<Vec<f64>> = (0..steps)
        .map(|_| rand_vec(rng, model.output_size(), -1.0, 1.0))
        .collect();
    let loss = |m: &M| -> Result<f64> {
        let run = run_sequence(m, &inputs)?;
        Ok(run
            .outputs
            .iter()
            .zip(&targets)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(a, b)| 0.5 * (a - b) * (a - b)))
            .sum())
    };
    let run = run_sequence(&model, &inputs)?;
    let cot: Vec<Vec<f64>> = run
        .outputs
        .iter()
        .zip(&targets)
        .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a - b).collect())
        .collect();
    let analytic = sequence_backward(&model, &inputs, &run, &cot)?;
    check_gradient(label, &model, &analytic, loss)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSuite {
    pub seed: u64,
    pub reports: Vec<GradCheckReport>,
}

impl GradCheckSuite {
    pub fn worst(&self) -> Option<&GradCheckReport> {
        self.reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradCheckReport::passed)
    }
}

/// Random DR-RNN (n <= 5, K <= 3), LSTM and RNN (m <= 4, T <= 5)
/// instances, `instances` of each kind. With `corrupt` set, the first
/// analytic DR-RNN gradient entry is perturbed before comparison.
pub fn run_gradcheck_suite(seed: u64, instances: usize, corrupt: bool) -> Result<GradCheckSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(4 * instances);
    for k in 0..instances {
        reports.push(drrnn_rollout_instance(&mut rng, corrupt && k == 0)?);
        reports.push(drrnn_objective_instance(&mut rng)?);
        let m = rng.gen_range(1..=4);
        let p = rng.gen_range(1..=3);
        let q = rng.gen_range(1..=3);
        let steps = rng.gen_range(1..=5);
        let lstm = LstmParams::init(m, p, q, rng.gen());
        reports.push(sequence_instance(
            &format!("lstm m={m} T={steps}"),
            lstm,
            &mut rng,
            steps,
        )?);
        let rnn = RnnParams::init(m, p, q, rng.gen());
        reports.push(sequence_instance(
            &format!("rnn m={m} T={steps}"),
            rnn,
            &mut rng,
            steps,
        )?);
    }
    Ok(GradCheckSuite { seed, reports })
}
