//! Versioned flat-text parameter files.
//!
//! ```text
//! epiforge-params 1
//! kind = drrnn
//! n = 5
//! layers = 4
//! beta = 0.9
//! gamma = 0.1
//! eps_guard = 0.00000001
//! count = 34
//! W[0] = 0.0123
//! ...
//! ```
//!
//! Values are written in shortest round-trip form, so save then load is
//! bitwise exact and two saves of equal parameters are byte-identical.

use crate::drrnn::DrRnnParams;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::recurrent::{LstmParams, RnnParams, SequenceModel};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "epiforge-params 1";

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    DrRnn(DrRnnParams),
    Rnn(RnnParams),
    Lstm(LstmParams),
}

impl ModelParams {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelParams::DrRnn(_) => "drrnn",
            ModelParams::Rnn(_) => "rnn",
            ModelParams::Lstm(_) => "lstm",
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nkind = {}\n", self.kind());
        let (names, flat) = match self {
            ModelParams::DrRnn(p) => {
                let _ = write!(
                    s,
                    "n = {}\nlayers = {}\nbeta = {}\ngamma = {}\neps_guard = {}\n",
                    p.dim(),
                    p.layers(),
                    p.beta,
                    p.gamma,
                    p.eps_guard
                );
                (names_of(p), p.flatten())
            }
            ModelParams::Rnn(p) => {
                write_sizes(&mut s, p.hidden_size(), p);
                (names_of(p), p.flatten())
            }
            ModelParams::Lstm(p) => {
                write_sizes(&mut s, p.hidden_size(), p);
                (names_of(p), p.flatten())
            }
        };
        let _ = writeln!(s, "count = {}", flat.len());
        for (name, v) in names.iter().zip(&flat) {
            let _ = writeln!(s, "{name} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim()));
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected `{MAGIC}`"),
                })
            }
        }
        let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut values = Vec::new();
        let mut count = None;
        for (line, raw) in lines {
            if raw.is_empty() {
                continue;
            }
            let (key, value) = raw.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: "expected `name = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if count.is_none() {
                if key == "count" {
                    count = Some(parse_num::<usize>(value, line)?);
                } else {
                    header.insert(key.to_string(), (line, value.to_string()));
                }
            } else {
                values.push((line, key.to_string(), parse_num::<f64>(value, line)?));
            }
        }
        let count = count.ok_or_else(|| Error::Parse {
            line: text.lines().count(),
            message: "missing `count` line".into(),
        })?;
        if values.len() != count {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: format!("expected {count} values, found {}", values.len()),
            });
        }
        let get = |key: &str| -> Result<&(usize, String)> {
            header.get(key).ok_or_else(|| Error::Parse {
                line: 2,
                message: format!("missing header field `{key}`"),
            })
        };
        let num = |key: &str| -> Result<usize> {
            let (line, v) = get(key)?;
            parse_num(v, *line)
        };
        let real = |key: &str| -> Result<f64> {
            let (line, v) = get(key)?;
            parse_num(v, *line)
        };
        let kind = get("kind")?.1.clone();
        let mut model = match kind.as_str() {
            "drrnn" => {
                let (n, layers) = (num("n")?, num("layers")?);
                let mut p = DrRnnParams::init(n, layers, 0)?;
                p.beta = real("beta")?;
                p.gamma = real("gamma")?;
                p.eps_guard = real("eps_guard")?;
                ModelParams::DrRnn(p)
            }
            "rnn" => ModelParams::Rnn(RnnParams::zeros(num("hidden")?, num("input")?, num("output")?)),
            "lstm" => ModelParams::Lstm(LstmParams::zeros(num("hidden")?, num("input")?, num("output")?)),
            other => {
                return Err(Error::Parse {
                    line: get("kind")?.0,
                    message: format!("unknown model kind `{other}`"),
                })
            }
        };
        let expected = model.num_params();
        if expected != count {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: format!("{kind} with these sizes has {expected} parameters, file has {count}"),
            });
        }
        let names = model.names();
        for ((line, key, _), name) in values.iter().zip(&names) {
            if key != name {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("expected `{name}`, found `{key}`"),
                });
            }
        }
        let flat: Vec<f64> = values.iter().map(|(_, _, v)| *v).collect();
        match &mut model {
            ModelParams::DrRnn(p) => {
                p.assign(&flat);
                p.validate()?;
            }
            ModelParams::Rnn(p) => {
                p.assign(&flat);
                p.validate()?;
            }
            ModelParams::Lstm(p) => {
                p.assign(&flat);
                p.validate()?;
            }
        }
        Ok(model)
    }

    fn num_params(&self) -> usize {
        match self {
            ModelParams::DrRnn(p) => p.num_params(),
            ModelParams::Rnn(p) => p.num_params(),
            ModelParams::Lstm(p) => p.num_params(),
        }
    }

    fn names(&self) -> Vec<String> {
        match self {
            ModelParams::DrRnn(p) => names_of(p),
            ModelParams::Rnn(p) => names_of(p),
            ModelParams::Lstm(p) => names_of(p),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn names_of<P: ParamSet>(p: &P) -> Vec<String> {
    (0..p.num_params()).map(|k| p.param_name(k)).collect()
}

fn write_sizes<M: SequenceModel>(s: &mut String, hidden: usize, m: &M) {
    let _ = write!(
        s,
        "hidden = {hidden}\ninput = {}\noutput = {}\n",
        m.input_size(),
        m.output_size()
    );
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{v}`"),
    })
}
