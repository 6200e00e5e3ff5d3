use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub out_dir: PathBuf,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: Option<String>,
    pub wall_seconds: f64,
    pub artifacts: Vec<PathBuf>,
    pub exit_code: u8,
    pub status: &'static str,
    pub failure: Option<String>,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            out_dir: out_dir.to_path_buf(),
            config: None,
            seed: None,
            started: now(),
            finished: None,
            wall_seconds: 0.0,
            artifacts: Vec::new(),
            exit_code: 0,
            status: "running",
            failure: None,
            clock: Some(Instant::now()),
        }
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn finish(&mut self, exit_code: u8, failure: Option<String>) {
        self.finished = Some(now());
        self.wall_seconds = self.clock.map(|c| c.elapsed().as_secs_f64()).unwrap_or_default();
        self.exit_code = exit_code;
        self.status = if exit_code == 0 { "ok" } else { "failed" };
        self.failure = failure;
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
