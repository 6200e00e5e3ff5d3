//! The desk pipeline: simulate a spatial scenario, observe it as
//! normalized compartment totals, pretrain a DR-RNN on the well-mixed
//! model, fine-tune on the observed training window, forecast the holdout
//! window and score it.

use crate::data::{
    assemble_snapshots, normalize, split_train_forecast, synth_initial_conditions, Bump, SnapshotMatrix,
};
use crate::drrnn::{drrnn_rollout, drrnn_step, residual_norm_profile, DrRnnParams, DEFAULT_LAYERS};
use crate::error::{Error, Result};
use crate::grid::{build_grid, Grid};
use crate::integrators::{simulate, Method, Rhs, ScaledRhs, Trajectory, DEFAULT_STEP};
use crate::seird::{ParamSchedule, SeirdParams, SeirdRhs, N_COMPARTMENTS};
use crate::training::{mse_data, per_compartment_mse, train, DrRnnObjective, LossReport, Objective, TrainConfig};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub nx: usize,
    pub ny: usize,
    /// Cell width in km.
    pub dx: f64,
    pub schedule: ParamSchedule,
    /// Uniform susceptible density added under the bumps.
    pub s_background: f64,
    pub bumps: Vec<Bump>,
    pub days: usize,
    pub h: f64,
    pub layers: usize,
    pub train: TrainConfig,
}

impl Default for Scenario {
    /// Two dense districts over a sparse background; the outbreak seeds in
    /// the western district. Transmission is cut on day 30 and raised above
    /// its initial level on day 85, so a second wave runs through the
    /// forecast window.
    fn default() -> Self {
        let base = SeirdParams {
            phi_i: 0.12,
            phi_e: 0.06,
            alpha_inc: 0.2,
            gamma_e: 0.05,
            gamma_i: 0.08,
            delta: 0.012,
            nu_s: 0.02,
            nu_e: 0.04,
            nu_i: 0.01,
            nu_r: 0.02,
            allee: 0.3,
        };
        let mut schedule = ParamSchedule::constant(base);
        for (day, name, value) in [
            (30.0, "phi_i", 0.04),
            (30.0, "phi_e", 0.02),
            (85.0, "phi_i", 0.2),
            (85.0, "phi_e", 0.1),
        ] {
            schedule
                .add_override(day, name, value)
                .expect("built-in schedule uses known fields");
        }
        Self {
            nx: 32,
            ny: 32,
            dx: 1.0,
            schedule,
            s_background: 0.5,
            bumps: vec![
                Bump {
                    compartment: 0,
                    x: 9.0,
                    y: 16.0,
                    amplitude: 6.0,
                    sigma: 4.0,
                },
                Bump {
                    compartment: 0,
                    x: 24.0,
                    y: 18.0,
                    amplitude: 5.0,
                    sigma: 5.0,
                },
                Bump {
                    compartment: 1,
                    x: 8.0,
                    y: 15.0,
                    amplitude: 0.05,
                    sigma: 1.5,
                },
                Bump {
                    compartment: 2,
                    x: 8.0,
                    y: 15.0,
                    amplitude: 0.02,
                    sigma: 1.5,
                },
            ],
            days: 120,
            h: DEFAULT_STEP,
            layers: DEFAULT_LAYERS,
            train: TrainConfig::default(),
        }
    }
}

impl Scenario {
    pub fn grid(&self) -> Result<Grid> {
        build_grid(self.nx, self.ny, self.dx)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.schedule.validate()?;
        self.train.validate()?;
        if self.days == 0 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        if self.train.total_days > self.days {
            return Err(Error::Config(format!(
                "total_days ({}) exceeds simulated days ({})",
                self.train.total_days, self.days
            )));
        }
        let per_day = 1.0 / self.h;
        if !(self.h > 0.0) || (per_day - per_day.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("h must divide one day, got {}", self.h)));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        (1.0 / self.h).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub grid: Grid,
    /// Daily snapshots, rows for days `0..=days`.
    pub snapshots: SnapshotMatrix,
    /// Largest `|total(t) / total(0) - 1|` over all quarter-day states.
    pub max_drift: f64,
    pub wall_seconds: f64,
}

pub fn simulate_scenario(scenario: &Scenario) -> Result<Simulation> {
    scenario.validate()?;
    let start = Instant::now();
    let grid = scenario.grid()?;
    let fields = synth_initial_conditions(&grid, &scenario.bumps, scenario.s_background)?;
    let rhs = SeirdRhs::spatial(grid, scenario.schedule.clone());
    let steps = scenario.days * scenario.steps_per_day();
    let traj = simulate(&rhs, &fields.to_flat(), 0.0, steps, scenario.h, Method::Rk4)?;
    let max_drift = max_relative_drift(&traj);
    let snapshots = assemble_snapshots(&traj, 1.0, grid.n_cells())?;
    Ok(Simulation {
        grid,
        snapshots,
        max_drift,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn max_relative_drift(traj: &Trajectory) -> f64 {
    let total = |y: &[f64]| y.iter().sum::<f64>();
    let t0 = total(&traj.states[0]);
    traj.states
        .iter()
        .map(|y| (total(y) / t0 - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Compartment totals normalized by the day-0 living population, with day
/// 0 dropped: rows for days `1..=days`. Returns the matrix, the day-0 row
/// and the normalization scale.
pub fn observe(snapshots: &SnapshotMatrix) -> Result<(SnapshotMatrix, Vec<f64>, f64)> {
    let (norm, scale) = normalize(&snapshots.aggregate_compartments())?;
    let day0 = norm.row(0).to_vec();
    let last = *norm.days().last().expect("normalize rejects empty matrices");
    Ok((norm.select_days(1, last)?, day0, scale))
}

/// Well-mixed dynamics of normalized totals: the mean density of the
/// scenario grid is `x * scale / n_cells`.
pub fn observed_physics(scenario: &Scenario, scale: f64) -> ScaledRhs<SeirdRhs> {
    let n_cells = (scenario.nx * scenario.ny) as f64;
    ScaledRhs::new(SeirdRhs::mean_field(scenario.schedule.clone()), scale / n_cells)
}

/// Reference trajectory of the well-mixed model at every step of `h`.
pub fn reference_trajectory<R: Rhs + ?Sized>(f: &R, y0: &[f64], days: usize, h: f64) -> Result<SnapshotMatrix> {
    let steps = (days as f64 / h).round() as usize;
    let traj = simulate(f, y0, 0.0, steps, h, Method::Rk4)?;
    assemble_snapshots(&traj, h, 1)
}

/// Closed-loop DR-RNN forecast from snapshot `from` (its day and state),
/// one row per day for `horizon` days.
pub fn forecast<R: Rhs + ?Sized>(
    params: &DrRnnParams,
    f: &R,
    from_day: i64,
    from_state: &[f64],
    horizon: usize,
    h: f64,
) -> Result<SnapshotMatrix> {
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be >= 1 day".into()));
    }
    let per_day = (1.0 / h).round() as usize;
    let traj = drrnn_rollout(params, f, from_state, from_day as f64, horizon * per_day, h)?;
    let rows: Vec<Vec<f64>> = (1..=horizon).map(|d| traj.states[d * per_day].clone()).collect();
    let n_cells = from_state.len() / N_COMPARTMENTS;
    SnapshotMatrix::new((1..=horizon as i64).map(|d| from_day + d).collect(), rows, n_cells)
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub per_compartment: [f64; N_COMPARTMENTS],
    pub overall: f64,
}

pub fn evaluate(predicted: &SnapshotMatrix, truth: &SnapshotMatrix) -> Result<Evaluation> {
    Ok(Evaluation {
        per_compartment: per_compartment_mse(predicted, truth)?,
        overall: mse_data(predicted, truth)?,
    })
}

/// Fraction of steps of a rollout whose last-layer residual is no larger
/// than the first-layer residual.
pub fn layerwise_reduction<R: Rhs + ?Sized>(params: &DrRnnParams, f: &R, rollout: &Trajectory, h: f64) -> Result<f64> {
    let steps = rollout.len().saturating_sub(1);
    if steps == 0 {
        return Ok(1.0);
    }
    let mut reduced = 0;
    for k in 0..steps {
        let (_, trace) = drrnn_step(params, f, rollout.times[k], &rollout.states[k], h)?;
        let norms = residual_norm_profile(&trace);
        if norms.last() <= norms.first() {
            reduced += 1;
        }
    }
    Ok(reduced as f64 / steps as f64)
}

/// `sum |a - b|^2 / sum |b|^2` over two aligned trajectories.
pub fn relative_mse(predicted: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, r) in predicted.iter().zip(reference) {
        for (a, b) in p.iter().zip(r) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    num / den
}

#[derive(Debug, Clone)]
pub struct Training {
    pub pretrained: DrRnnParams,
    pub finetuned: DrRnnParams,
    pub pretrain_history: Vec<LossReport>,
    pub finetune_history: Vec<LossReport>,
}

/// Pretrains on `reference` (any cadence that is a multiple of `h`) and
/// fine-tunes on `observed_train` starting from the pretrained weights.
pub fn pretrain_and_finetune<R: Rhs + ?Sized>(
    scenario: &Scenario,
    f: &R,
    reference: &SnapshotMatrix,
    observed_train: &SnapshotMatrix,
) -> Result<Training> {
    let cfg = &scenario.train;
    let init = DrRnnParams::init(N_COMPARTMENTS * reference.n_cells(), scenario.layers, cfg.seed)?;
    let pre = DrRnnObjective::new(f, reference, scenario.h)?;
    let (pretrained, pretrain_history) = train(init, &pre, cfg, cfg.pretrain_epochs)?;
    let fine = DrRnnObjective::new(f, observed_train, scenario.h)?;
    let (finetuned, finetune_history) = train(pretrained.clone(), &fine, cfg, cfg.finetune_epochs)?;
    Ok(Training {
        pretrained,
        finetuned,
        pretrain_history,
        finetune_history,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DeskReport {
    pub max_drift: f64,
    pub scale: f64,
    /// Teacher-forced one-day predictions over the training window.
    pub training_window: Evaluation,
    /// Closed-loop forecast over the holdout window.
    pub forecast_window: Evaluation,
    pub pretrain_final: Option<LossReport>,
    pub finetune_final: Option<LossReport>,
    pub simulate_seconds: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

pub struct DeskRun {
    pub simulation: Simulation,
    pub observed: SnapshotMatrix,
    pub training: Training,
    pub forecast: SnapshotMatrix,
    pub holdout: SnapshotMatrix,
    pub report: DeskReport,
}

pub fn run_desk_pipeline(scenario: &Scenario) -> Result<DeskRun> {
    let start = Instant::now();
    let simulation = simulate_scenario(scenario)?;
    let (observed, day0, scale) = observe(&simulation.snapshots)?;
    let observed = observed.select_days(1, scenario.train.total_days as i64)?;
    let (train_part, holdout) = split_train_forecast(&observed, scenario.train.train_days)?;
    let f = observed_physics(scenario, scale);
    let reference = reference_trajectory(&f, &day0, scenario.train.total_days, scenario.h)?;

    let train_start = Instant::now();
    let training = pretrain_and_finetune(scenario, &f, &reference, &train_part)?;
    let train_seconds = train_start.elapsed().as_secs_f64();

    let last = train_part.n_days() - 1;
    let predicted = forecast(
        &training.finetuned,
        &f,
        train_part.days()[last],
        train_part.row(last),
        holdout.n_days(),
        scenario.h,
    )?;
    let forecast_window = evaluate(&predicted, &holdout)?;
    let training_window = teacher_forced_evaluation(&training.finetuned, &f, &train_part, scenario.h)?;

    let report = DeskReport {
        max_drift: simulation.max_drift,
        scale,
        training_window,
        forecast_window,
        pretrain_final: training.pretrain_history.last().copied(),
        finetune_final: training.finetune_history.last().copied(),
        simulate_seconds: simulation.wall_seconds,
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(DeskRun {
        simulation,
        observed,
        training,
        forecast: predicted,
        holdout,
        report,
    })
}

/// One-day-ahead predictions from every observed training day but the
/// last, scored against the following day.
pub fn teacher_forced_evaluation<R: Rhs + ?Sized>(
    params: &DrRnnParams,
    f: &R,
    observed: &SnapshotMatrix,
    h: f64,
) -> Result<Evaluation> {
    let objective = DrRnnObjective::new(f, observed, h)?.data_only();
    let (parts, _) = objective.evaluate(params, 1.0, 0.0)?;
    Ok(Evaluation {
        per_compartment: parts.per_compartment,
        overall: parts.mse_u,
    })
}
