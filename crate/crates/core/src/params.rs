/// A trainable parameter set with a fixed flat layout.
///
/// The flat order is what the optimiser, the gradient routines and the
/// finite-difference checker agree on.
pub trait ParamSet: Clone {
    fn num_params(&self) -> usize;

    fn flatten(&self) -> Vec<f64>;

    /// Overwrites the trainable entries from a flat slice of length
    /// [`ParamSet::num_params`].
    fn assign(&mut self, flat: &[f64]);

    /// Human-readable name of flat entry `idx`, e.g. `U[2,0]`.
    fn param_name(&self, idx: usize) -> String;
}

pub(crate) fn matrix_entry_name(block: &str, idx: usize, cols: usize) -> String {
    format!("{block}[{},{}]", idx / cols, idx % cols)
}
