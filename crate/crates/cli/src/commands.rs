use crate::manifest::RunManifest;
use crate::{Failure, ModelKind};
use epiforge_core::data::split_train_forecast;
use epiforge_core::gradcheck::{run_gradcheck_suite, GRADCHECK_TOLERANCE};
use epiforge_core::heatmap::write_heatmaps;
use epiforge_core::pipeline::{
    evaluate as score, forecast as drrnn_forecast, observe, observed_physics, pretrain_and_finetune,
    reference_trajectory, simulate_scenario, Evaluation,
};
use epiforge_core::recurrent::sequence_forecast;
use epiforge_core::seird::{COMPARTMENT_NAMES, N_COMPARTMENTS};
use epiforge_core::training::{train as fit, write_history, LossReport, SequenceObjective};
use epiforge_core::{Error, LstmParams, ModelParams, RnnParams, Scenario, SequenceModel, SnapshotMatrix};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

type Outcome = Result<(), Failure>;

fn load_scenario(config: &Path, seed: Option<u64>, manifest: &mut RunManifest) -> Result<Scenario, Failure> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Failure::usage(format!("cannot read config `{}`: {e}", config.display())))?;
    manifest.config = Some(text.clone());
    let mut scenario =
        Scenario::from_config_text(&text).map_err(|e| Failure::usage(format!("{}: {e}", config.display())))?;
    if let Some(seed) = seed {
        scenario.train.seed = seed;
    }
    manifest.seed = Some(scenario.train.seed);
    Ok(scenario)
}

fn load_snapshots(path: &Path) -> Result<SnapshotMatrix, Failure> {
    SnapshotMatrix::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T, manifest: &mut RunManifest) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    manifest.artifact(path);
    Ok(())
}

fn save_matrix(path: &Path, matrix: &SnapshotMatrix, manifest: &mut RunManifest) -> Outcome {
    matrix.save(path)?;
    manifest.artifact(path);
    Ok(())
}

#[derive(Serialize)]
struct Conservation {
    max_relative_drift: f64,
    /// Living population `s + e + i + r` plus deaths, summed over cells, per day.
    daily_totals: Vec<(i64, f64)>,
    wall_seconds: f64,
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>, manifest: &mut RunManifest) -> Outcome {
    let scenario = load_scenario(config, seed, manifest)?;
    let sim = simulate_scenario(&scenario)?;
    save_matrix(&out.join("snapshots.csv"), &sim.snapshots, manifest)?;
    let maps = write_heatmaps(&out.join("heatmaps"), &sim.snapshots, scenario.nx, scenario.ny)?;
    manifest.artifact(out.join("heatmaps"));
    let totals = sim.snapshots.aggregate_compartments();
    let report = Conservation {
        max_relative_drift: sim.max_drift,
        daily_totals: (0..totals.n_days())
            .map(|k| (totals.days()[k], totals.row(k).iter().sum()))
            .collect(),
        wall_seconds: sim.wall_seconds,
    };
    write_json(&out.join("conservation.json"), &report, manifest)?;
    println!(
        "simulated {} days on {}x{} cells in {:.2} s; max relative drift {:.3e}; {} heatmap files",
        scenario.days,
        scenario.nx,
        scenario.ny,
        sim.wall_seconds,
        sim.max_drift,
        maps.len()
    );
    Ok(())
}

/// Normalized totals for days `1..=total_days`, the day-0 fractions and the
/// normalization scale.
fn observed_window(
    scenario: &Scenario,
    snapshots: &SnapshotMatrix,
) -> Result<(SnapshotMatrix, Vec<f64>, f64), Failure> {
    let (observed, day0, scale) = observe(snapshots)?;
    let observed = observed.select_days(1, scenario.train.total_days as i64)?;
    Ok((observed, day0, scale))
}

#[derive(Serialize)]
struct TrainSummary {
    model: &'static str,
    scale: f64,
    train_days: usize,
    pretrain_epochs: usize,
    finetune_epochs: usize,
    pretrain_final: Option<LossReport>,
    finetune_final: Option<LossReport>,
}

pub fn train(
    config: &Path,
    snapshots: &Path,
    out: &Path,
    seed: Option<u64>,
    model: ModelKind,
    hidden: usize,
    manifest: &mut RunManifest,
) -> Outcome {
    let scenario = load_scenario(config, seed, manifest)?;
    let snapshots = load_snapshots(snapshots)?;
    let (observed, day0, scale) = observed_window(&scenario, &snapshots)?;
    let (train_part, _) = split_train_forecast(&observed, scenario.train.train_days)?;
    let f = observed_physics(&scenario, scale);
    let cfg = &scenario.train;
    let reference = reference_trajectory(&f, &day0, cfg.total_days, scenario.h)?;

    let (pre, fine, pre_hist, fine_hist) = match model {
        ModelKind::Drrnn => {
            let t = pretrain_and_finetune(&scenario, &f, &reference, &train_part)?;
            (
                ModelParams::DrRnn(t.pretrained),
                ModelParams::DrRnn(t.finetuned),
                t.pretrain_history,
                t.finetune_history,
            )
        }
        ModelKind::Lstm | ModelKind::Rnn => {
            if hidden == 0 {
                return Err(Failure::usage("--hidden must be >= 1"));
            }
            let daily = daily_rows(&reference, scenario.steps_per_day())?;
            let pre_obj = SequenceObjective::new(&daily)?;
            let fine_obj = SequenceObjective::new(&train_part)?;
            if matches!(model, ModelKind::Lstm) {
                let init = LstmParams::init(hidden, N_COMPARTMENTS, N_COMPARTMENTS, cfg.seed);
                let (p, ph) = fit(init, &pre_obj, cfg, cfg.pretrain_epochs)?;
                let (q, fh) = fit(p.clone(), &fine_obj, cfg, cfg.finetune_epochs)?;
                (ModelParams::Lstm(p), ModelParams::Lstm(q), ph, fh)
            } else {
                let init = RnnParams::init(hidden, N_COMPARTMENTS, N_COMPARTMENTS, cfg.seed);
                let (p, ph) = fit(init, &pre_obj, cfg, cfg.pretrain_epochs)?;
                let (q, fh) = fit(p.clone(), &fine_obj, cfg, cfg.finetune_epochs)?;
                (ModelParams::Rnn(p), ModelParams::Rnn(q), ph, fh)
            }
        }
    };

    for (name, params) in [("pretrained.params", &pre), ("finetuned.params", &fine)] {
        params.save(&out.join(name))?;
        manifest.artifact(out.join(name));
    }
    for (name, hist) in [
        ("pretrain_history.csv", &pre_hist),
        ("finetune_history.csv", &fine_hist),
    ] {
        let file = std::fs::File::create(out.join(name))?;
        write_history(hist, std::io::BufWriter::new(file))?;
        manifest.artifact(out.join(name));
    }
    save_matrix(&out.join("observed.csv"), &observed, manifest)?;
    let summary = TrainSummary {
        model: fine.kind(),
        scale,
        train_days: cfg.train_days,
        pretrain_epochs: cfg.pretrain_epochs,
        finetune_epochs: cfg.finetune_epochs,
        pretrain_final: pre_hist.last().copied(),
        finetune_final: fine_hist.last().copied(),
    };
    write_json(&out.join("loss_report.json"), &summary, manifest)?;
    if let Some(last) = fine_hist.last() {
        println!(
            "{} fine-tune final: mse_u {:.3e} mse_s {:.3e} mse_l {:.3e}",
            fine.kind(),
            last.mse_u,
            last.mse_s,
            last.mse_l
        );
    }
    Ok(())
}

/// Every `per_day`-th row of a sub-daily reference, relabelled by day.
fn daily_rows(reference: &SnapshotMatrix, per_day: usize) -> Result<SnapshotMatrix, Failure> {
    let rows: Vec<Vec<f64>> = reference.rows().iter().step_by(per_day).cloned().collect();
    let days = (0..rows.len() as i64).collect();
    Ok(SnapshotMatrix::new(days, rows, reference.n_cells())?)
}

pub fn forecast(
    config: &Path,
    params: &Path,
    snapshots: &Path,
    horizon: i64,
    out: &Path,
    seed: Option<u64>,
    manifest: &mut RunManifest,
) -> Outcome {
    if horizon < 1 {
        return Err(Failure::usage(format!("--horizon must be >= 1, got {horizon}")));
    }
    let horizon = horizon as usize;
    let scenario = load_scenario(config, seed, manifest)?;
    let model = ModelParams::load(params).map_err(|e| Failure::usage(format!("{}: {e}", params.display())))?;
    let spatial = load_snapshots(snapshots)?;
    let (observed, _, scale) = observe(&spatial)?;
    let from_day = scenario.train.train_days as i64;
    let from_row = observed
        .row_index_of_day(from_day)
        .ok_or_else(|| Failure::usage(format!("snapshots have no day {from_day}")))?;

    let predicted = match &model {
        ModelParams::DrRnn(p) => {
            let f = observed_physics(&scenario, scale);
            drrnn_forecast(p, &f, from_day, observed.row(from_row), horizon, scenario.h)?
        }
        ModelParams::Lstm(p) => sequence_matrix(p, &observed, from_row, from_day, horizon)?,
        ModelParams::Rnn(p) => sequence_matrix(p, &observed, from_row, from_day, horizon)?,
    };
    save_matrix(&out.join("forecast.csv"), &predicted, manifest)?;

    if spatial.n_cells() == scenario.nx * scenario.ny {
        let layout_row = spatial
            .row_index_of_day(from_day)
            .ok_or_else(|| Failure::usage(format!("snapshots have no day {from_day}")))?;
        let maps = spread_over_layout(&predicted, &spatial, layout_row, scale)?;
        write_heatmaps(&out.join("heatmaps"), &maps, scenario.nx, scenario.ny)?;
        manifest.artifact(out.join("heatmaps"));
    }
    println!(
        "forecast days {}..={} from day {from_day} with {}",
        from_day + 1,
        from_day + horizon as i64,
        model.kind()
    );
    Ok(())
}

fn sequence_matrix<M: SequenceModel>(
    model: &M,
    observed: &SnapshotMatrix,
    from_row: usize,
    from_day: i64,
    horizon: usize,
) -> Result<SnapshotMatrix, Failure> {
    let rows = sequence_forecast(model, &observed.rows()[..=from_row], horizon)?;
    let days = (1..=horizon as i64).map(|d| from_day + d).collect();
    Ok(SnapshotMatrix::new(days, rows, 1)?)
}

/// Spatial maps for a forecast of normalized totals: each compartment keeps
/// the spatial shape it had on the layout day and is rescaled to the
/// forecast total. Compartments empty on that day are spread uniformly.
fn spread_over_layout(
    totals: &SnapshotMatrix,
    spatial: &SnapshotMatrix,
    layout_row: usize,
    scale: f64,
) -> Result<SnapshotMatrix, Failure> {
    let n = spatial.n_cells();
    let shapes: Vec<Vec<f64>> = (0..N_COMPARTMENTS)
        .map(|c| {
            let field = spatial.compartment(layout_row, c);
            let mass: f64 = field.iter().sum();
            if mass > 0.0 {
                field.iter().map(|v| v / mass).collect()
            } else {
                vec![1.0 / n as f64; n]
            }
        })
        .collect();
    let rows = (0..totals.n_days())
        .map(|k| {
            shapes
                .iter()
                .enumerate()
                .flat_map(|(c, shape)| {
                    let total = totals.row(k)[c] * scale;
                    shape.iter().map(move |v| v * total)
                })
                .collect()
        })
        .collect();
    Ok(SnapshotMatrix::new(totals.days().to_vec(), rows, n)?)
}

#[derive(Serialize)]
struct EvaluationFile {
    days: Vec<i64>,
    #[serde(flatten)]
    scores: Evaluation,
}

pub fn evaluate(forecast: &Path, truth: &Path, out: &Path, manifest: &mut RunManifest) -> Outcome {
    let predicted = load_snapshots(forecast)?;
    let truth_all = load_snapshots(truth)?;
    if predicted.n_cells() != truth_all.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "forecast has {} cells per compartment, truth has {}",
            predicted.n_cells(),
            truth_all.n_cells()
        ))
        .into());
    }
    let mut rows = Vec::with_capacity(predicted.n_days());
    for &day in predicted.days() {
        let k = truth_all
            .row_index_of_day(day)
            .ok_or_else(|| Failure::from(Error::ShapeMismatch(format!("truth has no row for day {day}"))))?;
        rows.push(truth_all.row(k).to_vec());
    }
    let truth = SnapshotMatrix::new(predicted.days().to_vec(), rows, predicted.n_cells())?;
    let scores = score(&predicted, &truth)?;

    let table = format_table(&scores);
    std::fs::write(out.join("evaluation.txt"), &table)?;
    manifest.artifact(out.join("evaluation.txt"));
    write_json(
        &out.join("evaluation.json"),
        &EvaluationFile {
            days: predicted.days().to_vec(),
            scores,
        },
        manifest,
    )?;
    print!("{table}");
    Ok(())
}

fn format_table(e: &Evaluation) -> String {
    let mut s = String::from("compartment  mse\n");
    for (name, v) in COMPARTMENT_NAMES.iter().zip(e.per_compartment) {
        let _ = writeln!(s, "{name:<11}  {v:.6e}");
    }
    let _ = writeln!(s, "{:<11}  {:.6e}", "overall", e.overall);
    s
}

pub fn gradcheck(seed: u64, instances: usize, corrupt: bool, out: &Path, manifest: &mut RunManifest) -> Outcome {
    if instances == 0 {
        return Err(Failure::usage("--instances must be >= 1"));
    }
    manifest.seed = Some(seed);
    let suite = run_gradcheck_suite(seed, instances, corrupt)?;
    write_json(&out.join("gradcheck.json"), &suite, manifest)?;
    let worst = suite.worst().expect("suite has at least one report");
    println!(
        "{} checks, worst relative error {:.3e} ({}: {})",
        suite.reports.len(),
        worst.max_rel_error,
        worst.label,
        worst.worst_param
    );
    if suite.passed() {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "gradient check failed: {} parameter {} has relative error {:.3e} > {GRADCHECK_TOLERANCE:e}",
            worst.label, worst.worst_param, worst.max_rel_error
        )))
    }
}
