//! Spatial SEIRD reaction-diffusion model.
//!
//! Per cell, with living population `n = s + e + i + r` and Allee factor
//! `a = 1 - A_e / n`:
//!
//! ```text
//! ds/dt = -a (phi_i s i + phi_e s e)                + div(n nu_s grad s)
//! de/dt =  a (phi_i s i + phi_e s e) - (alpha + gamma_e) e + div(n nu_e grad e)
//! di/dt =  alpha e - (gamma_i + delta) i            + div(n nu_i grad i)
//! dr/dt =  gamma_e e + gamma_i i                    + div(n nu_r grad r)
//! dd/dt =  delta i
//! ```
//!
//! Every reaction term leaves one compartment and enters another, and the
//! discrete divergence telescopes under no-flux boundaries, so the sum of all
//! five derivatives over the domain vanishes.

use crate::error::{check_len, Error, Result};
use crate::grid::{laplacian_varcoef_into, laplacian_vjp, Grid};
use crate::integrators::Rhs;
use serde::{Deserialize, Serialize};

pub const N_COMPARTMENTS: usize = 5;
pub const COMPARTMENT_NAMES: [&str; N_COMPARTMENTS] = ["s", "e", "i", "r", "d"];

/// Epidemiological and diffusion coefficients. Rates are per day, diffusion
/// parameters in km^2 per person per day, the Allee threshold in persons/km^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeirdParams {
    pub phi_i: f64,
    pub phi_e: f64,
    pub alpha_inc: f64,
    pub gamma_e: f64,
    pub gamma_i: f64,
    pub delta: f64,
    pub nu_s: f64,
    pub nu_e: f64,
    pub nu_i: f64,
    pub nu_r: f64,
    pub allee: f64,
}

impl SeirdParams {
    pub const FIELD_NAMES: [&'static str; 11] = [
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
        "allee",
    ];

    pub fn zero() -> Self {
        Self {
            phi_i: 0.0,
            phi_e: 0.0,
            alpha_inc: 0.0,
            gamma_e: 0.0,
            gamma_i: 0.0,
            delta: 0.0,
            nu_s: 0.0,
            nu_e: 0.0,
            nu_i: 0.0,
            nu_r: 0.0,
            allee: 0.0,
        }
    }

    fn slot(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "phi_i" => &mut self.phi_i,
            "phi_e" => &mut self.phi_e,
            "alpha_inc" => &mut self.alpha_inc,
            "gamma_e" => &mut self.gamma_e,
            "gamma_i" => &mut self.gamma_i,
            "delta" => &mut self.delta,
            "nu_s" => &mut self.nu_s,
            "nu_e" => &mut self.nu_e,
            "nu_i" => &mut self.nu_i,
            "nu_r" => &mut self.nu_r,
            "allee" => &mut self.allee,
            _ => return None,
        })
    }

    pub fn is_field(name: &str) -> bool {
        Self::FIELD_NAMES.contains(&name)
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::Config(format!("unknown SEIRD parameter `{name}`")))?;
        *slot = value;
        Ok(())
    }

    pub fn values(&self) -> [f64; 11] {
        [
            self.phi_i,
            self.phi_e,
            self.alpha_inc,
            self.gamma_e,
            self.gamma_i,
            self.delta,
            self.nu_s,
            self.nu_e,
            self.nu_i,
            self.nu_r,
            self.allee,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::FIELD_NAMES.iter().zip(self.values()) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "parameter {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant time schedule: `base` applies from day 0 and each
/// override `(day, name, value)` replaces one field from `day` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchedule {
    pub base: SeirdParams,
    overrides: Vec<(f64, String, f64)>,
}

impl ParamSchedule {
    pub fn constant(base: SeirdParams) -> Self {
        Self {
            base,
            overrides: Vec::new(),
        }
    }

    pub fn add_override(&mut self, day: f64, name: &str, value: f64) -> Result<()> {
        if !SeirdParams::is_field(name) {
            return Err(Error::Config(format!("unknown SEIRD parameter `{name}`")));
        }
        if !(day.is_finite() && day >= 0.0) {
            return Err(Error::Config(format!("schedule day must be >= 0, got {day}")));
        }
        self.overrides.push((day, name.to_string(), value));
        // stable sort keeps file order for equal days
        self.overrides.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(())
    }

    pub fn overrides(&self) -> &[(f64, String, f64)] {
        &self.overrides
    }

    pub fn at(&self, t: f64) -> SeirdParams {
        let mut p = self.base;
        for (day, name, value) in &self.overrides {
            if *day > t + 1e-9 {
                break;
            }
            // names were checked in add_override
            let _ = p.set(name, *value);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let mut p = self.base;
        for (_, name, value) in &self.overrides {
            p.set(name, *value)?;
            p.validate()?;
        }
        Ok(())
    }
}

/// Coefficients as seen by one right-hand-side evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamField {
    Uniform(SeirdParams),
    PerCell(Vec<SeirdParams>),
}

impl ParamField {
    #[inline]
    pub fn cell(&self, k: usize) -> &SeirdParams {
        match self {
            ParamField::Uniform(p) => p,
            ParamField::PerCell(v) => &v[k],
        }
    }

    fn check(&self, n_cells: usize) -> Result<()> {
        if let ParamField::PerCell(v) = self {
            check_len("per-cell parameters", n_cells, v.len())?;
        }
        Ok(())
    }
}

/// The five density fields at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentFields {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub i: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
}

impl CompartmentFields {
    pub fn zeros(n_cells: usize) -> Self {
        Self {
            s: vec![0.0; n_cells],
            e: vec![0.0; n_cells],
            i: vec![0.0; n_cells],
            r: vec![0.0; n_cells],
            d: vec![0.0; n_cells],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.s.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.s.len();
        for (ctx, f) in [("e", &self.e), ("i", &self.i), ("r", &self.r), ("d", &self.d)] {
            check_len(ctx, n, f.len())?;
        }
        if self.fields().iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteState { layer: None });
        }
        Ok(())
    }

    pub fn is_physical(&self) -> bool {
        self.fields().iter().all(|f| f.iter().all(|&v| v >= 0.0))
    }

    pub fn fields(&self) -> [&Vec<f64>; N_COMPARTMENTS] {
        [&self.s, &self.e, &self.i, &self.r, &self.d]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f64>; N_COMPARTMENTS] {
        [&mut self.s, &mut self.e, &mut self.i, &mut self.r, &mut self.d]
    }

    /// Living population `n_p = s + e + i + r` per cell.
    pub fn living_population(&self) -> Vec<f64> {
        (0..self.n_cells())
            .map(|k| self.s[k] + self.e[k] + self.i[k] + self.r[k])
            .collect()
    }

    /// Sum of all five fields over all cells.
    pub fn total(&self) -> f64 {
        self.fields().iter().map(|f| f.iter().sum::<f64>()).sum()
    }

    /// Compartment-major flattening: all `s` cells, then `e`, `i`, `r`, `d`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_COMPARTMENTS * self.n_cells());
        for f in self.fields() {
            v.extend_from_slice(f);
        }
        v
    }

    pub fn from_flat(y: &[f64], n_cells: usize) -> Result<Self> {
        check_len("flat state", N_COMPARTMENTS * n_cells, y.len())?;
        let part = |c: usize| y[c * n_cells..(c + 1) * n_cells].to_vec();
        Ok(Self {
            s: part(0),
            e: part(1),
            i: part(2),
            r: part(3),
            d: part(4),
        })
    }
}

/// Time derivatives of all five fields. `grid = None` evaluates the
/// spatially decoupled (0-D) model with no diffusion.
pub fn seird_rhs(state: &CompartmentFields, params: &ParamField, grid: Option<&Grid>) -> Result<CompartmentFields> {
    state.validate()?;
    let n = state.n_cells();
    let y = state.to_flat();
    let mut out = vec![0.0; y.len()];
    seird_rhs_flat(&y, n, params, grid, &mut out)?;
    CompartmentFields::from_flat(&out, n)
}

fn check_shape(y_len: usize, n_cells: usize, grid: Option<&Grid>) -> Result<()> {
    if let Some(g) = grid {
        check_len("state vs grid", g.n_cells(), n_cells)?;
    }
    check_len("flat state", N_COMPARTMENTS * n_cells, y_len)
}

#[inline]
fn guard_population(k: usize, np: f64) -> Result<()> {
    if np > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositivePopulation { cell: k, value: np })
    }
}

pub(crate) fn seird_rhs_flat(
    y: &[f64],
    n_cells: usize,
    params: &ParamField,
    grid: Option<&Grid>,
    out: &mut [f64],
) -> Result<()> {
    check_shape(y.len(), n_cells, grid)?;
    check_len("rhs output", y.len(), out.len())?;
    params.check(n_cells)?;
    let n = n_cells;
    let (s, rest) = y.split_at(n);
    let (e, rest) = rest.split_at(n);
    let (i, rest) = rest.split_at(n);
    let (r, _) = rest.split_at(n);

    let mut np = vec![0.0; n];
    for k in 0..n {
        let p = params.cell(k);
        let pop = s[k] + e[k] + i[k] + r[k];
        np[k] = pop;
        let transmission = if i[k] != 0.0 || e[k] != 0.0 {
            guard_population(k, pop)?;
            let allee = 1.0 - p.allee / pop;
            allee * (p.phi_i * s[k] * i[k] + p.phi_e * s[k] * e[k])
        } else {
            0.0
        };
        out[k] = -transmission;
        out[n + k] = transmission - (p.alpha_inc + p.gamma_e) * e[k];
        out[2 * n + k] = p.alpha_inc * e[k] - (p.gamma_i + p.delta) * i[k];
        out[3 * n + k] = p.gamma_e * e[k] + p.gamma_i * i[k];
        out[4 * n + k] = p.delta * i[k];
    }

    if let Some(g) = grid {
        let mut coeff = vec![0.0; n];
        let mut lap = vec![0.0; n];
        let diffusivity: [fn(&SeirdParams) -> f64; 4] = [|p| p.nu_s, |p| p.nu_e, |p| p.nu_i, |p| p.nu_r];
        for (c, nu) in diffusivity.iter().enumerate() {
            for k in 0..n {
                coeff[k] = np[k] * nu(params.cell(k));
            }
            laplacian_varcoef_into(&y[c * n..(c + 1) * n], &coeff, g, &mut lap)?;
            for k in 0..n {
                out[c * n + k] += lap[k];
            }
        }
    }
    Ok(())
}

/// Vector-Jacobian product `J(y)^T v` of [`seird_rhs_flat`].
pub(crate) fn seird_vjp_flat(
    y: &[f64],
    n_cells: usize,
    params: &ParamField,
    grid: Option<&Grid>,
    v: &[f64],
    out: &mut [f64],
) -> Result<()> {
    check_shape(y.len(), n_cells, grid)?;
    check_len("vjp cotangent", y.len(), v.len())?;
    check_len("vjp output", y.len(), out.len())?;
    params.check(n_cells)?;
    let n = n_cells;
    out.iter_mut().for_each(|o| *o = 0.0);
    let (s, e, i, r) = (&y[..n], &y[n..2 * n], &y[2 * n..3 * n], &y[3 * n..4 * n]);
    let (vs, ve, vi, vr, vd) = (&v[..n], &v[n..2 * n], &v[2 * n..3 * n], &v[3 * n..4 * n], &v[4 * n..]);

    let mut np = vec![0.0; n];
    for k in 0..n {
        let p = params.cell(k);
        let pop = s[k] + e[k] + i[k] + r[k];
        np[k] = pop;
        if i[k] != 0.0 || e[k] != 0.0 {
            guard_population(k, pop)?;
            let allee = 1.0 - p.allee / pop;
            let contact = p.phi_i * s[k] * i[k] + p.phi_e * s[k] * e[k];
            let d_allee = contact * p.allee / (pop * pop);
            let vt = ve[k] - vs[k];
            out[k] += vt * (allee * (p.phi_i * i[k] + p.phi_e * e[k]) + d_allee);
            out[n + k] += vt * (allee * p.phi_e * s[k] + d_allee);
            out[2 * n + k] += vt * (allee * p.phi_i * s[k] + d_allee);
            out[3 * n + k] += vt * d_allee;
        }
        out[n + k] += -(p.alpha_inc + p.gamma_e) * ve[k] + p.alpha_inc * vi[k] + p.gamma_e * vr[k];
        out[2 * n + k] += -(p.gamma_i + p.delta) * vi[k] + p.gamma_i * vr[k] + p.delta * vd[k];
    }

    if let Some(g) = grid {
        let mut coeff = vec![0.0; n];
        let mut grad_u = vec![0.0; n];
        let mut grad_c = vec![0.0; n];
        let diffusivity: [fn(&SeirdParams) -> f64; 4] = [|p| p.nu_s, |p| p.nu_e, |p| p.nu_i, |p| p.nu_r];
        for (c, nu) in diffusivity.iter().enumerate() {
            for k in 0..n {
                coeff[k] = np[k] * nu(params.cell(k));
            }
            grad_u.iter_mut().for_each(|x| *x = 0.0);
            grad_c.iter_mut().for_each(|x| *x = 0.0);
            laplacian_vjp(
                &y[c * n..(c + 1) * n],
                &coeff,
                g,
                &v[c * n..(c + 1) * n],
                &mut grad_u,
                &mut grad_c,
            )?;
            for k in 0..n {
                out[c * n + k] += grad_u[k];
                // coeff = n_p * nu and n_p = s + e + i + r
                let through_pop = grad_c[k] * nu(params.cell(k));
                for comp in 0..4 {
                    out[comp * n + k] += through_pop;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum ParamSource {
    Schedule(ParamSchedule),
    Static(ParamField),
}

/// The SEIRD model as a right-hand side over the flat compartment-major
/// state vector, either on a grid or as a single well-mixed cell.
#[derive(Debug, Clone)]
pub struct SeirdRhs {
    grid: Option<Grid>,
    n_cells: usize,
    params: ParamSource,
}

impl SeirdRhs {
    pub fn spatial(grid: Grid, schedule: ParamSchedule) -> Self {
        Self {
            n_cells: grid.n_cells(),
            grid: Some(grid),
            params: ParamSource::Schedule(schedule),
        }
    }

    /// Space-dependent but time-constant coefficients.
    pub fn spatial_static(grid: Grid, params: ParamField) -> Result<Self> {
        params.check(grid.n_cells())?;
        Ok(Self {
            n_cells: grid.n_cells(),
            grid: Some(grid),
            params: ParamSource::Static(params),
        })
    }

    /// Well-mixed model: one cell, no diffusion.
    pub fn mean_field(schedule: ParamSchedule) -> Self {
        Self {
            grid: None,
            n_cells: 1,
            params: ParamSource::Schedule(schedule),
        }
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.grid.as_ref()
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn params_at(&self, t: f64) -> ParamField {
        match &self.params {
            ParamSource::Schedule(s) => ParamField::Uniform(s.at(t)),
            ParamSource::Static(p) => p.clone(),
        }
    }
}

impl Rhs for SeirdRhs {
    fn dim(&self) -> usize {
        N_COMPARTMENTS * self.n_cells
    }

    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        let p = self.params_at(t);
        seird_rhs_flat(y, self.n_cells, &p, self.grid.as_ref(), dydt)
    }

    fn vjp(&self, t: f64, y: &[f64], cotangent: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.params_at(t);
        seird_vjp_flat(y, self.n_cells, &p, self.grid.as_ref(), cotangent, out)
    }
}
