//! Physics-informed epidemic toolkit: a reaction-diffusion SEIRD model on
//! a uniform grid, fixed-step integrators, a deep residual recurrent
//! network trained as a learned implicit integrator, RNN/LSTM baselines,
//! and the data plumbing that connects them.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod drrnn;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod heatmap;
pub mod integrators;
pub mod params;
pub mod params_io;
pub mod pipeline;
pub mod recurrent;
pub mod seird;
pub mod training;

pub use data::{Bump, CaseSeries, SnapshotMatrix};
pub use drrnn::{DrRnnParams, LayerTrace};
pub use error::{Error, Result};
pub use grid::{build_grid, Grid};
pub use integrators::{Method, Rhs, Trajectory};
pub use params::ParamSet;
pub use params_io::ModelParams;
pub use pipeline::Scenario;
pub use recurrent::{LstmParams, RnnParams, SequenceModel};
pub use seird::{CompartmentFields, ParamField, ParamSchedule, SeirdParams, SeirdRhs};
pub use training::{AdamState, LossReport, TrainConfig};
