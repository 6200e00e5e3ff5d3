use epiforge_core::training::{combined_loss, read_history};
use epiforge_core::{DrRnnParams, ModelParams, SnapshotMatrix};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

const SMALL: &str = "\
nx = 8
ny = 8
dx = 1
days = 20
phi_i = 0.12
phi_e = 0.06
phi_i@8 = 0.05
bump = s, 3, 4, 4, 2
bump = e, 3, 4, 0.05, 1
bump = i, 3, 4, 0.02, 1
pretrain_epochs = 12
finetune_epochs = 6
omega_s = 0.5
train_days = 15
total_days = 20
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(config_text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("scenario.conf");
        std::fs::write(&config, config_text).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn simulate(&self) -> PathBuf {
        let out = self.path("sim");
        let o = run(&["simulate", "--config", p(&self.config), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out.join("snapshots.csv")
    }

    fn train(&self, snapshots: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut args = vec![
            "train",
            "--config",
            p(&self.config),
            "--snapshots",
            p(snapshots),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_2_and_names_the_file() {
    let ws = Workspace::new(SMALL);
    let missing = ws.path("absent.conf");
    let out = ws.path("out");
    let o = run(&["simulate", "--config", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.conf"));
    let m = manifest(&out);
    assert_eq!(m["status"], "failed");
    assert_eq!(m["exit_code"], 2);
}

#[test]
fn malformed_config_exits_2_with_line() {
    let ws = Workspace::new("nx = 8\nwobble = 3\n");
    let out = ws.path("out");
    let o = run(&["simulate", "--config", p(&ws.config), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn simulate_writes_snapshots_heatmaps_and_manifest() {
    let ws = Workspace::new(SMALL);
    let snaps = ws.simulate();
    let m = SnapshotMatrix::load(&snaps).unwrap();
    assert_eq!(m.n_days(), 21);
    assert_eq!(m.n_cells(), 64);
    let sim = ws.path("sim");
    assert!(sim.join("heatmaps/i_day020.pgm").exists());
    assert!(sim.join("conservation.json").exists());
    let man = manifest(&sim);
    assert_eq!(man["status"], "ok");
    assert_eq!(man["config"], SMALL);
    assert!(man["artifacts"].as_array().unwrap().len() >= 3);
}

#[test]
fn zero_rates_keep_every_snapshot_equal() {
    let mut text = String::from("nx = 6\nny = 5\ndays = 4\ntrain_days = 2\ntotal_days = 4\n");
    for name in [
        "phi_i",
        "phi_e",
        "alpha_inc",
        "gamma_e",
        "gamma_i",
        "delta",
        "nu_s",
        "nu_e",
        "nu_i",
        "nu_r",
    ] {
        text.push_str(&format!("{name} = 0\n"));
    }
    text.push_str("bump = s, 2, 2, 3, 1\nbump = i, 4, 3, 0.1, 1\n");
    let ws = Workspace::new(&text);
    let m = SnapshotMatrix::load(&ws.simulate()).unwrap();
    for k in 1..m.n_days() {
        assert_eq!(m.row(k), m.row(0), "day {k}");
    }
}

#[test]
fn train_writes_consistent_histories() {
    let ws = Workspace::new(SMALL);
    let snaps = ws.simulate();
    let out = ws.train(&snaps, "train", &[]);
    for name in ["pretrain_history.csv", "finetune_history.csv"] {
        let rows = read_history(std::fs::File::open(out.join(name)).unwrap()).unwrap();
        assert_eq!(rows.len(), if name.starts_with("pre") { 12 } else { 6 });
        for (epoch, (e, [u, s, l, _])) in rows.iter().enumerate() {
            assert_eq!(*e, epoch);
            assert_eq!(*l, combined_loss(*u, *s, 1.0, 0.5));
        }
    }
    let observed = SnapshotMatrix::load(&out.join("observed.csv")).unwrap();
    assert_eq!(observed.days().first(), Some(&1));
    assert_eq!(observed.days().last(), Some(&20));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("loss_report.json")).unwrap()).unwrap();
    assert!(report["scale"].as_f64().unwrap() > 0.0);
}

#[test]
fn zero_epochs_keep_initial_weights() {
    let text = format!(
        "{}\n",
        SMALL
            .replace("pretrain_epochs = 12", "pretrain_epochs = 0")
            .replace("finetune_epochs = 6", "finetune_epochs = 0")
    );
    let ws = Workspace::new(&text);
    let snaps = ws.simulate();
    let out = ws.train(&snaps, "train", &["--seed", "5"]);
    let init = DrRnnParams::init(5, 4, 5).unwrap();
    assert_eq!(
        ModelParams::load(&out.join("finetuned.params")).unwrap(),
        ModelParams::DrRnn(init)
    );
    let history = std::fs::read_to_string(out.join("finetune_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1, "header only");
}

#[test]
fn same_seed_gives_identical_params_and_losses() {
    let ws = Workspace::new(SMALL);
    let snaps = ws.simulate();
    let a = ws.train(&snaps, "a", &["--seed", "3"]);
    let b = ws.train(&snaps, "b", &["--seed", "3"]);
    let c = ws.train(&snaps, "c", &["--seed", "4"]);
    let bytes = |d: &Path| std::fs::read(d.join("finetuned.params")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    let losses = |d: &Path| -> Vec<[u64; 3]> {
        read_history(std::fs::File::open(d.join("finetune_history.csv")).unwrap())
            .unwrap()
            .into_iter()
            .map(|(_, v)| [v[0].to_bits(), v[1].to_bits(), v[2].to_bits()])
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn forecast_then_evaluate() {
    let ws = Workspace::new(SMALL);
    let snaps = ws.simulate();
    let trained = ws.train(&snaps, "train", &[]);
    let fc = ws.path("fc");
    let params = trained.join("finetuned.params");
    let o = run(&[
        "forecast",
        "--config",
        p(&ws.config),
        "--params",
        p(&params),
        "--snapshots",
        p(&snaps),
        "--out",
        p(&fc),
        "--horizon",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let predicted = SnapshotMatrix::load(&fc.join("forecast.csv")).unwrap();
    assert_eq!(predicted.days(), &[16, 17, 18, 19, 20]);
    assert!(fc.join("heatmaps/s_day016.pgm").exists());

    let ev = ws.path("ev");
    let truth = trained.join("observed.csv");
    let o = run(&[
        "evaluate",
        "--forecast",
        p(&fc.join("forecast.csv")),
        "--truth",
        p(&truth),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 0);
    let e: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("evaluation.json")).unwrap()).unwrap();
    assert!(e["overall"].as_f64().unwrap() > 0.0);
    assert!(std::fs::read_to_string(ev.join("evaluation.txt"))
        .unwrap()
        .contains("overall"));

    let o = run(&[
        "evaluate",
        "--forecast",
        p(&fc.join("forecast.csv")),
        "--truth",
        p(&snaps),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 2, "spatial truth against totals is a shape mismatch");
}

#[test]
fn forecast_rejects_nonpositive_horizon() {
    let ws = Workspace::new(SMALL);
    let snaps = ws.simulate();
    let trained = ws.train(&snaps, "train", &[]);
    for h in ["0", "-3"] {
        let out = ws.path(&format!("fc{h}"));
        let o = run(&[
            "forecast",
            "--config",
            p(&ws.config),
            "--params",
            p(&trained.join("finetuned.params")),
            "--snapshots",
            p(&snaps),
            "--out",
            p(&out),
            "--horizon",
            h,
        ]);
        assert_eq!(code(&o), 2, "horizon {h}");
        assert_eq!(manifest(&out)["exit_code"], 2);
    }
}

#[test]
fn evaluating_truth_against_itself_scores_zero() {
    let ws = Workspace::new(SMALL);
    let snaps = ws.simulate();
    let ev = ws.path("ev");
    let o = run(&[
        "evaluate",
        "--forecast",
        p(&snaps),
        "--truth",
        p(&snaps),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 0);
    let e: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(e["overall"].as_f64(), Some(0.0));
    assert!(e["per_compartment"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v.as_f64() == Some(0.0)));
}

#[test]
fn baselines_train_and_forecast() {
    let ws = Workspace::new(SMALL);
    let snaps = ws.simulate();
    for model in ["lstm", "rnn"] {
        let trained = ws.train(&snaps, model, &["--model", model, "--hidden", "4"]);
        let params = ModelParams::load(&trained.join("finetuned.params")).unwrap();
        assert_eq!(params.kind(), model);
        let fc = ws.path(&format!("{model}-fc"));
        let o = run(&[
            "forecast",
            "--config",
            p(&ws.config),
            "--params",
            p(&trained.join("finetuned.params")),
            "--snapshots",
            p(&snaps),
            "--out",
            p(&fc),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(SnapshotMatrix::load(&fc.join("forecast.csv")).unwrap().n_days(), 14);
    }
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok");
    let o = run(&["gradcheck", "--seed", "2", "--instances", "3", "--out", p(&ok)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(ok.join("gradcheck.json").exists());

    let bad = dir.path().join("bad");
    let o = run(&[
        "gradcheck",
        "--seed",
        "2",
        "--instances",
        "3",
        "--out",
        p(&bad),
        "--corrupt-gradient",
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("W["));
}
