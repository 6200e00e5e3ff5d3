//! Losses, Adam and the full-batch training loop.
//!
//! The physics-informed objective for the DR-RNN rolls the network from
//! each observed snapshot to the next one in steps of `h`. The data term
//! compares the rolled state with the next observation; the physics term
//! is the backward-difference residual `(x_{j+1} - x_j)/h - f(t_{j+1}, x_{j+1})`
//! of every intermediate step. Gradients are exact reverse mode through the
//! unrolled steps.

use crate::data::SnapshotMatrix;
use crate::drrnn::{drrnn_step, drrnn_step_backward, DrRnnGrad, DrRnnParams};
use crate::error::{check_len, Error, Result};
use crate::integrators::Rhs;
use crate::params::ParamSet;
use crate::recurrent::{run_sequence, sequence_backward, SequenceModel};
use crate::seird::{COMPARTMENT_NAMES, N_COMPARTMENTS};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub omega_u: f64,
    pub omega_s: f64,
    pub train_days: usize,
    pub total_days: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_epochs: 2000,
            finetune_epochs: 500,
            omega_u: 1.0,
            omega_s: 1.0,
            train_days: 106,
            total_days: 120,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("learning_rate", self.learning_rate), ("adam_eps", self.adam_eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        for (name, v) in [("omega_u", self.omega_u), ("omega_s", self.omega_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.train_days == 0 || self.train_days >= self.total_days {
            return Err(Error::Config(format!(
                "train_days ({}) must be in 1..total_days ({})",
                self.train_days, self.total_days
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}

/// Loss values of one epoch. `mse_l` always equals
/// `omega_u * mse_u + omega_s * mse_s` as computed by [`combined_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_compartment: [f64; N_COMPARTMENTS],
    pub mse_u: f64,
    pub mse_s: f64,
    pub mse_l: f64,
    pub wall_seconds: f64,
}

/// Unweighted loss parts before combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub per_compartment: [f64; N_COMPARTMENTS],
    pub mse_u: f64,
    pub mse_s: f64,
}

impl LossParts {
    pub fn report(&self, omega_u: f64, omega_s: f64, wall_seconds: f64) -> LossReport {
        LossReport {
            per_compartment: self.per_compartment,
            mse_u: self.mse_u,
            mse_s: self.mse_s,
            mse_l: combined_loss(self.mse_u, self.mse_s, omega_u, omega_s),
            wall_seconds,
        }
    }
}

pub fn combined_loss(mse_u: f64, mse_s: f64, omega_u: f64, omega_s: f64) -> f64 {
    omega_u * mse_u + omega_s * mse_s
}

fn check_same_layout(predicted: &SnapshotMatrix, observed: &SnapshotMatrix) -> Result<()> {
    if predicted.n_cells() != observed.n_cells() || predicted.n_days() != observed.n_days() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows x {} cells vs {} rows x {} cells",
            predicted.n_days(),
            predicted.n_cells(),
            observed.n_days(),
            observed.n_cells()
        )));
    }
    if let Some(row) = (0..predicted.n_days()).find(|&k| predicted.days()[k] != observed.days()[k]) {
        return Err(Error::TimestampMismatch {
            row,
            left: predicted.days()[row],
            right: observed.days()[row],
        });
    }
    Ok(())
}

/// Mean squared error over every entry of two aligned snapshot matrices.
pub fn mse_data(predicted: &SnapshotMatrix, observed: &SnapshotMatrix) -> Result<f64> {
    check_same_layout(predicted, observed)?;
    let mut sum = 0.0;
    for (a, b) in predicted.rows().iter().zip(observed.rows()) {
        sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(sum / (predicted.n_days() * predicted.row_len()) as f64)
}

/// Mean squared error of each compartment, over all rows and cells.
pub fn per_compartment_mse(predicted: &SnapshotMatrix, observed: &SnapshotMatrix) -> Result<[f64; N_COMPARTMENTS]> {
    check_same_layout(predicted, observed)?;
    let n = predicted.n_cells();
    let mut out = [0.0; N_COMPARTMENTS];
    for (a, b) in predicted.rows().iter().zip(observed.rows()) {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot += a[c * n..(c + 1) * n]
                .iter()
                .zip(&b[c * n..(c + 1) * n])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
    }
    let count = (predicted.n_days() * n) as f64;
    Ok(out.map(|v| v / count))
}

/// Mean squared backward-difference residual of `f` along a trajectory
/// sampled every `h` days.
pub fn mse_physics<R: Rhs + ?Sized>(trajectory: &SnapshotMatrix, f: &R, h: f64) -> Result<f64> {
    if trajectory.n_days() < 2 {
        return Err(Error::ShapeMismatch(
            "physics residual needs at least two snapshots".into(),
        ));
    }
    check_len("physics residual state", f.dim(), trajectory.row_len())?;
    let mut fy = vec![0.0; f.dim()];
    let mut sum = 0.0;
    for k in 0..trajectory.n_days() - 1 {
        let (y0, y1) = (trajectory.row(k), trajectory.row(k + 1));
        f.eval(trajectory.time(k + 1), y1, &mut fy)?;
        for j in 0..fy.len() {
            let r = (y1[j] - y0[j]) / h - fy[j];
            sum += r * r;
        }
    }
    Ok(sum / ((trajectory.n_days() - 1) * trajectory.row_len()) as f64)
}

/// Mean absolute error over `[sample][time][feature]` tensors.
pub fn trajectory_l1_loss(predicted: &[Vec<Vec<f64>>], observed: &[Vec<Vec<f64>>]) -> Result<f64> {
    let shape_err = || Error::ShapeMismatch("trajectory tensors differ in shape".into());
    if predicted.len() != observed.len() {
        return Err(shape_err());
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ps, os) in predicted.iter().zip(observed) {
        if ps.len() != os.len() {
            return Err(shape_err());
        }
        for (p, o) in ps.iter().zip(os) {
            if p.len() != o.len() {
                return Err(shape_err());
            }
            sum += p.iter().zip(o).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += p.len();
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// A differentiable training objective over a parameter set.
pub trait Objective<P: ParamSet> {
    /// Loss parts at `params` and the gradient of
    /// `omega_u * mse_u + omega_s * mse_s` in flat layout.
    fn evaluate(&self, params: &P, omega_u: f64, omega_s: f64) -> Result<(LossParts, Vec<f64>)>;
}

/// Physics-informed DR-RNN objective over one snapshot matrix.
pub struct DrRnnObjective<'a, R: Rhs + ?Sized> {
    f: &'a R,
    data: &'a SnapshotMatrix,
    h: f64,
    substeps: usize,
    physics: bool,
}

impl<'a, R: Rhs + ?Sized> DrRnnObjective<'a, R> {
    pub fn new(f: &'a R, data: &'a SnapshotMatrix, h: f64) -> Result<Self> {
        if data.n_days() < 2 {
            return Err(Error::ShapeMismatch("training needs at least two snapshots".into()));
        }
        check_len("training rhs vs snapshot row", data.row_len(), f.dim())?;
        let dt = data.cadence();
        let ratio = dt / h;
        let substeps = ratio.round();
        if !(h > 0.0) || substeps < 1.0 || (ratio - substeps).abs() > 1e-9 * ratio {
            return Err(Error::CadenceMismatch { cadence: dt, step: h });
        }
        if data.days().windows(2).any(|w| w[1] - w[0] != 1) {
            return Err(Error::ShapeMismatch("training snapshots must be consecutive".into()));
        }
        Ok(Self {
            f,
            data,
            h,
            substeps: substeps as usize,
            physics: true,
        })
    }

    /// Drops the physics term entirely; `mse_s` is reported as zero.
    pub fn data_only(mut self) -> Self {
        self.physics = false;
        self
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }
}

impl<R: Rhs + ?Sized> Objective<DrRnnParams> for DrRnnObjective<'_, R> {
    fn evaluate(&self, params: &DrRnnParams, omega_u: f64, omega_s: f64) -> Result<(LossParts, Vec<f64>)> {
        let n = self.data.row_len();
        check_len("DR-RNN size vs snapshot row", n, params.dim())?;
        let n_cells = self.data.n_cells();
        let m = self.substeps;
        let h = self.h;
        let pairs = self.data.n_days() - 1;
        let data_count = (pairs * n) as f64;
        let phys_count = (pairs * m * n) as f64;
        let phys_grad = self.physics && omega_s != 0.0;

        let mut per_comp = [0.0; N_COMPARTMENTS];
        let mut data_sum = 0.0;
        let mut phys_sum = 0.0;
        let mut grad = DrRnnGrad::zeros(params);
        let mut fy = vec![0.0; n];
        let mut jt = vec![0.0; n];

        for k in 0..pairs {
            let t0 = self.data.time(k);
            let mut states = Vec::with_capacity(m + 1);
            let mut traces = Vec::with_capacity(m);
            states.push(self.data.row(k).to_vec());
            for j in 0..m {
                let (next, trace) = drrnn_step(params, self.f, t0 + j as f64 * h, &states[j], h)?;
                states.push(next);
                traces.push(trace);
            }

            // physics residuals p_j and their cotangents
            let mut phys_cot: Vec<Vec<f64>> = Vec::new();
            if self.physics {
                for j in 0..m {
                    self.f.eval(t0 + (j + 1) as f64 * h, &states[j + 1], &mut fy)?;
                    let p: Vec<f64> = (0..n).map(|q| (states[j + 1][q] - states[j][q]) / h - fy[q]).collect();
                    phys_sum += p.iter().map(|v| v * v).sum::<f64>();
                    if phys_grad {
                        phys_cot.push(p.iter().map(|v| 2.0 * omega_s * v / phys_count).collect());
                    }
                }
            }

            let target = self.data.row(k + 1);
            let err: Vec<f64> = (0..n).map(|q| states[m][q] - target[q]).collect();
            for (c, slot) in per_comp.iter_mut().enumerate() {
                *slot += err[c * n_cells..(c + 1) * n_cells].iter().map(|v| v * v).sum::<f64>();
            }
            data_sum += err.iter().map(|v| v * v).sum::<f64>();

            let mut g: Vec<f64> = err.iter().map(|v| 2.0 * omega_u * v / data_count).collect();
            for j in (0..m).rev() {
                if phys_grad {
                    // p_j depends on x_{j+1} via (I/h - J^T) and on x_j via -I/h
                    let cot = &phys_cot[j];
                    self.f.vjp(t0 + (j + 1) as f64 * h, &states[j + 1], cot, &mut jt)?;
                    for q in 0..n {
                        g[q] += cot[q] / h - jt[q];
                    }
                }
                let mut g_prev = drrnn_step_backward(params, self.f, t0 + j as f64 * h, h, &traces[j], &g, &mut grad)?;
                if phys_grad {
                    for q in 0..n {
                        g_prev[q] -= phys_cot[j][q] / h;
                    }
                }
                g = g_prev;
            }
        }

        let parts = LossParts {
            per_compartment: per_comp.map(|v| v / (pairs * n_cells) as f64),
            mse_u: data_sum / data_count,
            mse_s: if self.physics { phys_sum / phys_count } else { 0.0 },
        };
        Ok((parts, grad.flatten()))
    }
}

/// One-step-ahead L1 objective for the recurrent baselines: rows
/// `0..T-1` are the inputs and rows `1..T` the targets. The data term
/// holds the L1 loss; the physics term is always zero.
pub struct SequenceObjective<'a> {
    inputs: Vec<Vec<f64>>,
    targets: &'a [Vec<f64>],
    n_cells: usize,
}

impl<'a> SequenceObjective<'a> {
    pub fn new(data: &'a SnapshotMatrix) -> Result<Self> {
        if data.n_days() < 2 {
            return Err(Error::ShapeMismatch("training needs at least two snapshots".into()));
        }
        Ok(Self {
            inputs: data.rows()[..data.n_days() - 1].to_vec(),
            targets: &data.rows()[1..],
            n_cells: data.n_cells(),
        })
    }
}

impl<M: SequenceModel> Objective<M> for SequenceObjective<'_> {
    fn evaluate(&self, model: &M, omega_u: f64, _omega_s: f64) -> Result<(LossParts, Vec<f64>)> {
        let run = run_sequence(model, &self.inputs)?;
        let n = model.output_size();
        check_len("sequence target", n, self.targets[0].len())?;
        let count = (self.targets.len() * n) as f64;
        let mut sum = 0.0;
        let mut per_comp = [0.0; N_COMPARTMENTS];
        let grad_outputs: Vec<Vec<f64>> = run
            .outputs
            .iter()
            .zip(self.targets)
            .map(|(pred, obs)| {
                pred.iter()
                    .zip(obs)
                    .enumerate()
                    .map(|(q, (a, b))| {
                        let d = a - b;
                        sum += d.abs();
                        per_comp[(q / self.n_cells).min(N_COMPARTMENTS - 1)] += d.abs();
                        omega_u * d.signum() * f64::from(d != 0.0) / count
                    })
                    .collect()
            })
            .collect();
        let grad = sequence_backward(model, &self.inputs, &run, &grad_outputs)?;
        let per_row = (self.targets.len() * self.n_cells) as f64;
        Ok((
            LossParts {
                per_compartment: per_comp.map(|v| v / per_row),
                mse_u: sum / count,
                mse_s: 0.0,
            },
            grad,
        ))
    }
}

/// Full-batch training: each epoch evaluates the loss at the current
/// parameters, logs it, and takes one Adam step. Returns the final
/// parameters and one report per epoch.
pub fn train<P: ParamSet, O: Objective<P> + ?Sized>(
    init: P,
    objective: &O,
    config: &TrainConfig,
    epochs: usize,
) -> Result<(P, Vec<LossReport>)> {
    let mut params = init;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut history = Vec::with_capacity(epochs);
    let start = Instant::now();
    for epoch in 0..epochs {
        let (parts, grad) = objective
            .evaluate(&params, config.omega_u, config.omega_s)
            .map_err(|e| match e {
                Error::NonFiniteState { .. } | Error::NonPositivePopulation { .. } => Error::DivergedTraining { epoch },
                other => other,
            })?;
        let report = parts.report(config.omega_u, config.omega_s, start.elapsed().as_secs_f64());
        if !(report.mse_l.is_finite() && report.mse_u.is_finite() && report.mse_s.is_finite()) {
            return Err(Error::DivergedTraining { epoch });
        }
        if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: params.param_name(idx),
            });
        }
        history.push(report);
        adam_step(&mut flat, &grad, &mut adam, config)?;
        params.assign(&flat);
    }
    Ok((params, history))
}

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "mse_u", "mse_s", "mse_l", "wall_seconds"];

pub fn write_history<W: Write>(history: &[LossReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for (epoch, r) in history.iter().enumerate() {
        w.write_record([
            epoch.to_string(),
            r.mse_u.to_string(),
            r.mse_s.to_string(),
            r.mse_l.to_string(),
            r.wall_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of `(epoch, mse_u, mse_s, mse_l, wall_seconds)`.
pub fn read_history<R: Read>(input: R) -> Result<Vec<(usize, [f64; 4])>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let bad = || Error::Parse {
            line,
            message: "malformed history row".into(),
        };
        if rec.len() != HISTORY_HEADER.len() {
            return Err(bad());
        }
        let epoch = rec[0].parse().map_err(|_| bad())?;
        let mut vals = [0.0; 4];
        for (slot, field) in vals.iter_mut().zip(rec.iter().skip(1)) {
            *slot = field.parse().map_err(|_| bad())?;
        }
        rows.push((epoch, vals));
    }
    Ok(rows)
}

/// `name = value` lines for a final report.
pub fn format_report(report: &LossReport) -> String {
    let mut s = String::new();
    for (name, v) in COMPARTMENT_NAMES.iter().zip(report.per_compartment) {
        s.push_str(&format!("mse_{name} = {v}\n"));
    }
    s.push_str(&format!(
        "mse_u = {}\nmse_s = {}\nmse_l = {}\nwall_seconds = {}\n",
        report.mse_u, report.mse_s, report.mse_l, report.wall_seconds
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::assemble_snapshots;
    use crate::integrators::{implicit_euler_solve, simulate, FnRhs, ImplicitEulerOptions, LinearRhs, Method};
    use crate::recurrent::LstmParams;
    use crate::seird::{ParamSchedule, SeirdParams, SeirdRhs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: Vec<Vec<f64>>) -> SnapshotMatrix {
        let n_cells = rows[0].len() / 5;
        SnapshotMatrix::new((0..rows.len() as i64).collect(), rows, n_cells).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, days: usize, n_cells: usize) -> SnapshotMatrix {
        matrix(
            (0..days)
                .map(|_| (0..5 * n_cells).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
    }

    #[test]
    fn mse_data_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 2);
        assert_eq!(mse_data(&a, &a).unwrap(), 0.0);
        let shifted = a.scaled(1.0);
        let shifted = matrix(
            shifted
                .rows()
                .iter()
                .map(|r| r.iter().map(|v| v + 0.1).collect())
                .collect(),
        );
        assert!((mse_data(&shifted, &a).unwrap() - 0.01).abs() < 1e-15);

        let b = random_matrix(&mut rng, 4, 2);
        let mut naive = 0.0;
        for d in 0..4 {
            for q in 0..10 {
                naive += (a.row(d)[q] - b.row(d)[q]).powi(2);
            }
        }
        assert!((mse_data(&a, &b).unwrap() - naive / 40.0).abs() < 1e-15);
        let per = per_compartment_mse(&a, &b).unwrap();
        assert!((per.iter().sum::<f64>() / 5.0 - naive / 40.0).abs() < 1e-15);

        let short = random_matrix(&mut rng, 3, 2);
        assert!(matches!(mse_data(&a, &short), Err(Error::ShapeMismatch(_))));
        let later = SnapshotMatrix::new(vec![0, 1, 2, 5], a.rows().to_vec(), 2).unwrap();
        assert!(matches!(
            mse_data(&a, &later),
            Err(Error::TimestampMismatch {
                row: 3,
                left: 3,
                right: 5
            })
        ));
    }

    fn seird_params() -> SeirdParams {
        SeirdParams {
            phi_i: 0.3,
            phi_e: 0.2,
            alpha_inc: 0.2,
            gamma_e: 0.05,
            gamma_i: 0.1,
            delta: 0.01,
            nu_s: 0.0,
            nu_e: 0.0,
            nu_i: 0.0,
            nu_r: 0.0,
            allee: 0.0,
        }
    }

    #[test]
    fn physics_residual_vanishes_on_implicit_euler_trajectory() {
        let f = SeirdRhs::mean_field(ParamSchedule::constant(seird_params()));
        let opts = ImplicitEulerOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let mut states = vec![vec![0.97, 0.02, 0.01, 0.0, 0.0]];
        for k in 0..20 {
            let t = k as f64 * 0.25;
            states.push(implicit_euler_solve(&f, t, &states[k], 0.25, &opts).unwrap().state);
        }
        let traj = matrix(states);
        let quarter = SnapshotMatrix::with_cadence(traj.days().to_vec(), traj.rows().to_vec(), 1, 0.25).unwrap();
        assert!(mse_physics(&quarter, &f, 0.25).unwrap() <= 1e-20);

        let idle = SeirdRhs::mean_field(ParamSchedule::constant(SeirdParams::zero()));
        let constant = matrix(vec![vec![0.5, 0.1, 0.1, 0.2, 0.1]; 3]);
        assert_eq!(mse_physics(&constant, &idle, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn physics_residual_of_rk4_shrinks_quadratically() {
        let f = SeirdRhs::mean_field(ParamSchedule::constant(seird_params()));
        let y0 = [0.97, 0.02, 0.01, 0.0, 0.0];
        let residual_at = |h: f64| {
            let steps = (10.0 / h).round() as usize;
            let traj = simulate(&f, &y0, 0.0, steps, h, Method::Rk4).unwrap();
            let snaps = assemble_snapshots(&traj, h, 1).unwrap();
            mse_physics(&snaps, &f, h).unwrap()
        };
        let (a, b, c) = (residual_at(0.25), residual_at(0.125), residual_at(0.0625));
        assert!(a > 0.0);
        // residual ~ h/2 * y'' so its square falls by 4 per halving
        for ratio in [a / b, b / c] {
            assert!((3.2..4.8).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(0.5, 0.5, 1.0, 1.0), 1.0);
        assert_eq!(combined_loss(0.3, 7.0, 2.0, 0.0), 0.6);
    }

    #[test]
    fn l1_loss_examples() {
        let a = vec![vec![vec![1.0]]];
        let b = vec![vec![vec![3.0]]];
        assert_eq!(trajectory_l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(trajectory_l1_loss(&a, &b).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tensor = || -> Vec<Vec<Vec<f64>>> {
            (0..2)
                .map(|_| {
                    (0..3)
                        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect()
        };
        let (p, o) = (tensor(), tensor());
        let mut naive = 0.0;
        for s in 0..2 {
            for t in 0..3 {
                for q in 0..4 {
                    naive += (p[s][t][q] - o[s][t][q]).abs();
                }
            }
        }
        assert!((trajectory_l1_loss(&p, &o).unwrap() - naive / 24.0).abs() < 1e-15);
        assert!(trajectory_l1_loss(&p, &o[..1]).is_err());
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut theta = [0.5];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[0.0], &mut state, &cfg).unwrap();
        assert_eq!(theta[0], 0.5);
        state.m[0] = 0.2;
        state.v[0] = 0.3;
        adam_step(&mut theta, &[0.0], &mut state, &cfg).unwrap();
        assert_eq!((state.m[0], state.v[0]), (0.9 * 0.2, 0.999 * 0.3));
        state.t = 1;
        assert_eq!(state.t, 1);

        let mut theta = [0.5, -0.5];
        let mut state = AdamState::new(2);
        adam_step(&mut theta, &[3.0, -0.01], &mut state, &cfg).unwrap();
        assert!((theta[0] - 0.4).abs() < 1e-8);
        assert!((theta[1] + 0.4).abs() < 1e-5);

        // scripted reference run of the same rule
        let mut theta = [1.0];
        let mut state = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut state, &cfg).unwrap();
        }
        assert!((theta[0] - 0.002936675681102579).abs() < 1e-14);
        assert!(theta[0].abs() < 0.1);

        assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut AdamState::new(2), &cfg).is_err());
    }

    fn linear_decay_data() -> (LinearRhs, SnapshotMatrix) {
        let rates = [-0.3, -0.2, -0.1, -0.05, 0.0];
        let f = LinearRhs::diagonal(&rates);
        let traj = simulate(&f, &[1.0, 0.8, 0.6, 0.4, 0.2], 0.0, 40, 0.25, Method::Rk4).unwrap();
        (f, assemble_snapshots(&traj, 1.0, 1).unwrap())
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (f, data) = linear_decay_data();
        let obj = DrRnnObjective::new(&f, &data, 0.25).unwrap();
        let init = DrRnnParams::init(5, 4, 1).unwrap();
        let (out, hist) = train(init.clone(), &obj, &TrainConfig::default(), 0).unwrap();
        assert_eq!(out, init);
        assert!(hist.is_empty());
    }

    #[test]
    fn pretraining_reduces_loss_on_linear_ode() {
        let (f, data) = linear_decay_data();
        let obj = DrRnnObjective::new(&f, &data, 0.25).unwrap();
        assert_eq!(obj.substeps(), 4);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (_, hist) = train(DrRnnParams::init(5, 4, 7).unwrap(), &obj, &cfg, 200).unwrap();
        let (first, last) = (hist[0].mse_l, hist[199].mse_l);
        assert!(last < 0.1 * first, "{first} -> {last}");
        for r in &hist {
            assert_eq!(r.mse_l, cfg.omega_u * r.mse_u + cfg.omega_s * r.mse_s);
        }
    }

    #[test]
    fn zero_physics_weight_matches_data_only_run() {
        let (f, data) = linear_decay_data();
        let cfg = TrainConfig {
            omega_s: 0.0,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let init = DrRnnParams::init(5, 3, 11).unwrap();
        let full = DrRnnObjective::new(&f, &data, 0.25).unwrap();
        let plain = DrRnnObjective::new(&f, &data, 0.25).unwrap().data_only();
        let (pa, ha) = train(init.clone(), &full, &cfg, 30).unwrap();
        let (pb, hb) = train(init, &plain, &cfg, 30).unwrap();
        assert_eq!(pa, pb);
        for (a, b) in ha.iter().zip(&hb) {
            assert_eq!((a.mse_u, a.mse_l), (b.mse_u, b.mse_l));
            assert!(a.mse_s > 0.0 && b.mse_s == 0.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (f, data) = linear_decay_data();
        let obj = DrRnnObjective::new(&f, &data, 0.25).unwrap();
        let cfg = TrainConfig::default();
        let run = || train(DrRnnParams::init(5, 4, 5).unwrap(), &obj, &cfg, 20).unwrap();
        let (pa, ha) = run();
        let (pb, hb) = run();
        assert_eq!(pa.flatten(), pb.flatten());
        let strip = |h: &[LossReport]| h.iter().map(|r| (r.mse_u, r.mse_s, r.mse_l)).collect::<Vec<_>>();
        assert_eq!(strip(&ha), strip(&hb));
    }

    #[test]
    fn divergence_is_reported() {
        let (_, data) = linear_decay_data();
        let blowup = FnRhs::new(5, |_t, y: &[f64], out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(y) {
                *o = v.exp() * 1e300;
            }
        });
        let obj = DrRnnObjective::new(&blowup, &data, 0.25).unwrap();
        let err = train(DrRnnParams::init(5, 2, 1).unwrap(), &obj, &TrainConfig::default(), 5).unwrap_err();
        assert!(matches!(err, Error::DivergedTraining { epoch: 0 }), "{err:?}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        struct Broken;
        impl Objective<DrRnnParams> for Broken {
            fn evaluate(&self, p: &DrRnnParams, _: f64, _: f64) -> Result<(LossParts, Vec<f64>)> {
                let mut g = vec![0.0; p.num_params()];
                g[p.dim() + 1] = f64::NAN;
                Ok((
                    LossParts {
                        per_compartment: [0.0; 5],
                        mse_u: 1.0,
                        mse_s: 0.0,
                    },
                    g,
                ))
            }
        }
        let err = train(DrRnnParams::init(2, 2, 0).unwrap(), &Broken, &TrainConfig::default(), 1).unwrap_err();
        match err {
            Error::NonFiniteGradient { param } => assert_eq!(param, "U[0,1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quadratic_loss_gradient_is_the_parameter() {
        struct HalfNorm;
        impl Objective<DrRnnParams> for HalfNorm {
            fn evaluate(&self, p: &DrRnnParams, _: f64, _: f64) -> Result<(LossParts, Vec<f64>)> {
                let flat = p.flatten();
                let mse_u = 0.5 * p.w.iter().map(|v| v * v).sum::<f64>();
                let mut g = vec![0.0; flat.len()];
                g[..p.dim()].copy_from_slice(&p.w);
                Ok((
                    LossParts {
                        per_compartment: [0.0; 5],
                        mse_u,
                        mse_s: 0.0,
                    },
                    g,
                ))
            }
        }
        let p = DrRnnParams::init(3, 2, 4).unwrap();
        let (_, g) = HalfNorm.evaluate(&p, 1.0, 1.0).unwrap();
        assert_eq!(&g[..3], p.w.as_slice());
        assert!(g[3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sequence_objective_trains_lstm() {
        let data = matrix(vec![vec![0.2, 0.4, 0.1, 0.2, 0.1]; 12]);
        let obj = SequenceObjective::new(&data).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (model, hist) = train(LstmParams::init(4, 5, 5, 2), &obj, &cfg, 400).unwrap();
        assert!(hist.last().unwrap().mse_u < 0.2 * hist[0].mse_u);
        let forecast = crate::recurrent::sequence_forecast(&model, data.rows(), 5).unwrap();
        let tol = 2.0 * hist.last().unwrap().mse_u * 5.0 + 0.05;
        for row in forecast {
            for (a, b) in row.iter().zip(data.row(0)) {
                assert!((a - b).abs() < tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let hist = vec![
            LossReport {
                per_compartment: [0.0; 5],
                mse_u: 0.1 + 0.2,
                mse_s: 1e-9,
                mse_l: 0.1 + 0.2 + 1e-9,
                wall_seconds: 0.5,
            },
            LossReport {
                per_compartment: [0.0; 5],
                mse_u: 0.25,
                mse_s: 0.0,
                mse_l: 0.25,
                wall_seconds: 1.0,
            },
        ];
        let mut buf = Vec::new();
        write_history(&hist, &mut buf).unwrap();
        let back = read_history(buf.as_slice()).unwrap();
        assert_eq!(back[0], (0, [0.1 + 0.2, 1e-9, 0.1 + 0.2 + 1e-9, 0.5]));
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            train_days: 120,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
