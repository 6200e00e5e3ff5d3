//! Flat-text scenario configuration.
//!
//! One `name = value` per line, `#` starts a comment. SEIRD parameters may
//! carry a day, `phi_i@30 = 0.04`, to override the base value from that day
//! on. Each `bump = <compartment>, <x km>, <y km>, <amplitude>, <sigma km>`
//! line adds one Gaussian bump to the initial state.
//!
//! Unset scalars take the values of [`Scenario::default`]. Schedule
//! overrides and bumps come only from the file.

use crate::data::Bump;
use crate::error::{Error, Result};
use crate::pipeline::Scenario;
use crate::seird::{ParamSchedule, SeirdParams, COMPARTMENT_NAMES};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("cannot parse `{value}` for `{key}`")))
}

impl Scenario {
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut sc = Scenario::default();
        let mut base = sc.schedule.base;
        let mut overrides = Vec::new();
        sc.bumps.clear();
        let mut seen = HashSet::new();

        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected `name = value`"))?;
            let (key, value) = (key.trim(), value.trim());

            if key == "bump" {
                sc.bumps.push(parse_bump(value, line)?);
                continue;
            }
            if let Some((name, day)) = key.split_once('@') {
                let name = name.trim();
                if !SeirdParams::is_field(name) {
                    return Err(config_err(line, format!("unknown SEIRD parameter `{name}`")));
                }
                let day: f64 = parse(day.trim(), line, key)?;
                overrides.push((day, name.to_string(), parse::<f64>(value, line, key)?));
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(config_err(line, format!("`{key}` set twice")));
            }
            if SeirdParams::is_field(key) {
                base.set(key, parse(value, line, key)?)?;
                continue;
            }
            let t = &mut sc.train;
            match key {
                "nx" => sc.nx = parse(value, line, key)?,
                "ny" => sc.ny = parse(value, line, key)?,
                "dx" => sc.dx = parse(value, line, key)?,
                "days" => sc.days = parse(value, line, key)?,
                "h" => sc.h = parse(value, line, key)?,
                "layers" => sc.layers = parse(value, line, key)?,
                "s_background" => sc.s_background = parse(value, line, key)?,
                "learning_rate" => t.learning_rate = parse(value, line, key)?,
                "adam_beta1" => t.adam_beta1 = parse(value, line, key)?,
                "adam_beta2" => t.adam_beta2 = parse(value, line, key)?,
                "adam_eps" => t.adam_eps = parse(value, line, key)?,
                "pretrain_epochs" => t.pretrain_epochs = parse(value, line, key)?,
                "finetune_epochs" => t.finetune_epochs = parse(value, line, key)?,
                "omega_u" => t.omega_u = parse(value, line, key)?,
                "omega_s" => t.omega_s = parse(value, line, key)?,
                "train_days" => t.train_days = parse(value, line, key)?,
                "total_days" => t.total_days = parse(value, line, key)?,
                "seed" => t.seed = parse(value, line, key)?,
                other => return Err(config_err(line, format!("unknown key `{other}`"))),
            }
        }

        sc.schedule = ParamSchedule::constant(base);
        for (day, name, value) in overrides {
            sc.schedule.add_override(day, &name, value)?;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_config_text(&text)
    }

    /// Full listing that [`Scenario::from_config_text`] reads back to an
    /// equal scenario.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "# grid and time");
        let _ = writeln!(
            s,
            "nx = {}\nny = {}\ndx = {}\ndays = {}\nh = {}",
            self.nx, self.ny, self.dx, self.days, self.h
        );
        let _ = writeln!(s, "\n# SEIRD parameters");
        for (name, v) in SeirdParams::FIELD_NAMES.iter().zip(self.schedule.base.values()) {
            let _ = writeln!(s, "{name} = {v}");
        }
        for (day, name, v) in self.schedule.overrides() {
            let _ = writeln!(s, "{name}@{day} = {v}");
        }
        let _ = writeln!(s, "\n# initial state");
        let _ = writeln!(s, "s_background = {}", self.s_background);
        for b in &self.bumps {
            let _ = writeln!(
                s,
                "bump = {}, {}, {}, {}, {}",
                COMPARTMENT_NAMES[b.compartment], b.x, b.y, b.amplitude, b.sigma
            );
        }
        let _ = writeln!(s, "\n# model and training");
        let _ = writeln!(s, "layers = {}", self.layers);
        for (k, v) in [
            ("learning_rate", t.learning_rate),
            ("adam_beta1", t.adam_beta1),
            ("adam_beta2", t.adam_beta2),
            ("adam_eps", t.adam_eps),
            ("omega_u", t.omega_u),
            ("omega_s", t.omega_s),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(
            s,
            "pretrain_epochs = {}\nfinetune_epochs = {}\ntrain_days = {}\ntotal_days = {}\nseed = {}",
            t.pretrain_epochs, t.finetune_epochs, t.train_days, t.total_days, t.seed
        );
        s
    }
}

fn parse_bump(value: &str, line: usize) -> Result<Bump> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(config_err(line, "bump needs `compartment, x, y, amplitude, sigma`"));
    }
    let compartment = COMPARTMENT_NAMES
        .iter()
        .position(|n| *n == parts[0])
        .ok_or_else(|| config_err(line, format!("unknown compartment `{}`", parts[0])))?;
    Ok(Bump {
        compartment,
        x: parse(parts[1], line, "bump")?,
        y: parse(parts[2], line, "bump")?,
        amplitude: parse(parts[3], line, "bump")?,
        sigma: parse(parts[4], line, "bump")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_listing_reads_back() {
        let sc = Scenario::default();
        let text = sc.to_config_text();
        assert_eq!(Scenario::from_config_text(&text).unwrap(), sc);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "\
# tiny
nx = 4   # cells
ny = 5
phi_i = 0.3
phi_i@10 = 0.1
bump = e, 1.5, 2.5, 0.2, 1
seed = 9
";
        let sc = Scenario::from_config_text(text).unwrap();
        assert_eq!((sc.nx, sc.ny, sc.train.seed), (4, 5, 9));
        assert_eq!(sc.schedule.at(9.0).phi_i, 0.3);
        assert_eq!(sc.schedule.at(10.0).phi_i, 0.1);
        assert_eq!(sc.bumps.len(), 1);
        assert_eq!(sc.bumps[0].compartment, 1);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("nx = 4\nfoo = 1\n", "line 2"),
            ("nx = four\n", "line 1"),
            ("nx = 4\nnx = 5\n", "set twice"),
            ("bump = q, 1, 1, 1, 1\n", "unknown compartment"),
            ("kappa@3 = 1\n", "unknown SEIRD"),
            ("just words\n", "name = value"),
        ] {
            match Scenario::from_config_text(text) {
                Err(Error::Config(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(Scenario::from_config_text("phi_i = -1\n").is_err());
        assert!(Scenario::from_config_text("train_days = 130\n").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = Scenario::load(Path::new("/nonexistent/desk.conf")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/desk.conf"));
    }
}
