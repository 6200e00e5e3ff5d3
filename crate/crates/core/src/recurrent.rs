//! Plain RNN and LSTM sequence models used as recurrent baselines.
//!
//! Both are driven through [`SequenceModel`]: a cell maps `(state, input)`
//! to `(state', output)`, and backpropagation through time is assembled
//! from per-cell reverse passes that recompute the cell intermediates.

use crate::error::{check_len, Error, Result};
use crate::params::{matrix_entry_name, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_HIDDEN: usize = 16;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += A [h, z]` for a row-major `rows x (m + p)` matrix.
fn affine_concat(a: &[f64], bias: &[f64], h: &[f64], z: &[f64]) -> Vec<f64> {
    let cols = h.len() + z.len();
    a.chunks_exact(cols)
        .zip(bias)
        .map(|(row, b)| {
            let (wh, wz) = row.split_at(h.len());
            b + wh.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + wz.iter().zip(z).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn readout(v: &[f64], c: &[f64], h: &[f64]) -> Vec<f64> {
    v.chunks_exact(h.len())
        .zip(c)
        .map(|(row, b)| b + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// A recurrent cell with a flat parameter layout.
pub trait SequenceModel: ParamSet {
    fn input_size(&self) -> usize;
    fn output_size(&self) -> usize;
    fn state_size(&self) -> usize;

    fn cell_step(&self, state: &[f64], input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Reverse pass through one cell. Accumulates parameter gradients into
    /// `grad` (flat layout) and returns the cotangent of `state`.
    fn cell_backward(
        &self,
        state: &[f64],
        input: &[f64],
        grad_next_state: &[f64],
        grad_output: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    hidden: usize,
    input: usize,
    output: usize,
    /// `m x (m + p)`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// `q x m`, row-major.
    pub v: Vec<f64>,
    pub c: Vec<f64>,
}

impl RnnParams {
    pub fn zeros(hidden: usize, input: usize, output: usize) -> Self {
        Self {
            hidden,
            input,
            output,
            w: vec![0.0; hidden * (hidden + input)],
            b: vec![0.0; hidden],
            v: vec![0.0; output * hidden],
            c: vec![0.0; output],
        }
    }

    pub fn init(hidden: usize, input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(hidden, input, output);
        p.assign(&uniform(&mut rng, p.num_params(), bound));
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p, q) = (self.hidden, self.input, self.output);
        check_len("RNN W", m * (m + p), self.w.len())?;
        check_len("RNN b", m, self.b.len())?;
        check_len("RNN V", q * m, self.v.len())?;
        check_len("RNN c", q, self.c.len())
    }
}

/// `h_t = tanh(W [h_prev, z_t] + b)`, `x_t = V h_t + c`.
pub fn rnn_cell(params: &RnnParams, h_prev: &[f64], z_t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("RNN hidden state", params.hidden, h_prev.len())?;
    check_len("RNN input", params.input, z_t.len())?;
    let h: Vec<f64> = affine_concat(&params.w, &params.b, h_prev, z_t)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let x = readout(&params.v, &params.c, &h);
    Ok((h, x))
}

impl ParamSet for RnnParams {
    fn num_params(&self) -> usize {
        self.w.len() + self.b.len() + self.v.len() + self.c.len()
    }

    fn flatten(&self) -> Vec<f64> {
        [&self.w, &self.b, &self.v, &self.c]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for block in [&mut self.w, &mut self.b, &mut self.v, &mut self.c] {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
    }

    fn param_name(&self, idx: usize) -> String {
        let cols = self.hidden + self.input;
        let sizes = [self.w.len(), self.b.len(), self.v.len(), self.c.len()];
        let mut off = idx;
        for (k, size) in sizes.iter().enumerate() {
            if off < *size {
                return match k {
                    0 => matrix_entry_name("W", off, cols),
                    1 => format!("b[{off}]"),
                    2 => matrix_entry_name("V", off, self.hidden),
                    _ => format!("c[{off}]"),
                };
            }
            off -= size;
        }
        format!("#{idx}")
    }
}

impl SequenceModel for RnnParams {
    fn input_size(&self) -> usize {
        self.input
    }
    fn output_size(&self) -> usize {
        self.output
    }
    fn state_size(&self) -> usize {
        self.hidden
    }

    fn cell_step(&self, state: &[f64], input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        rnn_cell(self, state, input)
    }

    fn cell_backward(
        &self,
        state: &[f64],
        input: &[f64],
        grad_next_state: &[f64],
        grad_output: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let (m, p, q) = (self.hidden, self.input, self.output);
        let cols = m + p;
        let (h, _) = rnn_cell(self, state, input)?;
        let (gw, rest) = grad.split_at_mut(self.w.len());
        let (gb, rest) = rest.split_at_mut(m);
        let (gv, gc) = rest.split_at_mut(q * m);

        let mut grad_h = grad_next_state.to_vec();
        for o in 0..q {
            gc[o] += grad_output[o];
            for j in 0..m {
                gv[o * m + j] += grad_output[o] * h[j];
                grad_h[j] += self.v[o * m + j] * grad_output[o];
            }
        }
        let mut grad_prev = vec![0.0; m];
        for j in 0..m {
            let ga = grad_h[j] * (1.0 - h[j] * h[j]);
            gb[j] += ga;
            for k in 0..m {
                gw[j * cols + k] += ga * state[k];
                grad_prev[k] += self.w[j * cols + k] * ga;
            }
            for k in 0..p {
                gw[j * cols + m + k] += ga * input[k];
            }
        }
        Ok(grad_prev)
    }
}

/// LSTM gate weights plus a linear readout `x_t = V h_t + c` that maps the
/// hidden state to a forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    hidden: usize,
    input: usize,
    output: usize,
    pub w_f: Vec<f64>,
    pub w_i: Vec<f64>,
    pub w_o: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_c: Vec<f64>,
    pub v: Vec<f64>,
    pub c: Vec<f64>,
}

pub struct LstmGates {
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub candidate: Vec<f64>,
}

const LSTM_BLOCKS: [&str; 10] = ["W_f", "W_i", "W_o", "W_c", "b_f", "b_i", "b_o", "b_c", "V", "c"];

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize, output: usize) -> Self {
        let gate = hidden * (hidden + input);
        Self {
            hidden,
            input,
            output,
            w_f: vec![0.0; gate],
            w_i: vec![0.0; gate],
            w_o: vec![0.0; gate],
            w_c: vec![0.0; gate],
            b_f: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            v: vec![0.0; output * hidden],
            c: vec![0.0; output],
        }
    }

    pub fn init(hidden: usize, input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(hidden, input, output);
        p.assign(&uniform(&mut rng, p.num_params(), bound));
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn blocks(&self) -> [&Vec<f64>; 10] {
        [
            &self.w_f, &self.w_i, &self.w_o, &self.w_c, &self.b_f, &self.b_i, &self.b_o, &self.b_c, &self.v, &self.c,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.w_f,
            &mut self.w_i,
            &mut self.w_o,
            &mut self.w_c,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_o,
            &mut self.b_c,
            &mut self.v,
            &mut self.c,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p, q) = (self.hidden, self.input, self.output);
        for (k, block) in self.blocks().iter().enumerate() {
            let expected = match k {
                0..=3 => m * (m + p),
                4..=7 => m,
                8 => q * m,
                _ => q,
            };
            check_len("LSTM parameter block", expected, block.len())?;
        }
        Ok(())
    }

    pub fn gates(&self, h_prev: &[f64], z_t: &[f64]) -> LstmGates {
        LstmGates {
            forget: affine_concat(&self.w_f, &self.b_f, h_prev, z_t)
                .into_iter()
                .map(sigmoid)
                .collect(),
            input: affine_concat(&self.w_i, &self.b_i, h_prev, z_t)
                .into_iter()
                .map(sigmoid)
                .collect(),
            output: affine_concat(&self.w_o, &self.b_o, h_prev, z_t)
                .into_iter()
                .map(sigmoid)
                .collect(),
            candidate: affine_concat(&self.w_c, &self.b_c, h_prev, z_t)
                .into_iter()
                .map(f64::tanh)
                .collect(),
        }
    }
}

/// One LSTM step, returning `(h_t, c_t)`.
pub fn lstm_cell(params: &LstmParams, h_prev: &[f64], c_prev: &[f64], z_t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("LSTM hidden state", params.hidden, h_prev.len())?;
    check_len("LSTM cell state", params.hidden, c_prev.len())?;
    check_len("LSTM input", params.input, z_t.len())?;
    let g = params.gates(h_prev, z_t);
    let c: Vec<f64> = (0..params.hidden)
        .map(|j| g.forget[j] * c_prev[j] + g.input[j] * g.candidate[j])
        .collect();
    let h = (0..params.hidden).map(|j| g.output[j] * c[j].tanh()).collect();
    Ok((h, c))
}

impl ParamSet for LstmParams {
    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks().into_iter().flatten().copied().collect()
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for block in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
    }

    fn param_name(&self, idx: usize) -> String {
        let mut off = idx;
        for (k, block) in self.blocks().iter().enumerate() {
            if off < block.len() {
                return match k {
                    0..=3 => matrix_entry_name(LSTM_BLOCKS[k], off, self.hidden + self.input),
                    8 => matrix_entry_name("V", off, self.hidden),
                    _ => format!("{}[{off}]", LSTM_BLOCKS[k]),
                };
            }
            off -= block.len();
        }
        format!("#{idx}")
    }
}

impl SequenceModel for LstmParams {
    fn input_size(&self) -> usize {
        self.input
    }
    fn output_size(&self) -> usize {
        self.output
    }
    /// `[h, c]`.
    fn state_size(&self) -> usize {
        2 * self.hidden
    }

    fn cell_step(&self, state: &[f64], input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("LSTM state", 2 * self.hidden, state.len())?;
        let (h_prev, c_prev) = state.split_at(self.hidden);
        let (mut h, c) = lstm_cell(self, h_prev, c_prev, input)?;
        let x = readout(&self.v, &self.c, &h);
        h.extend_from_slice(&c);
        Ok((h, x))
    }

    fn cell_backward(
        &self,
        state: &[f64],
        input: &[f64],
        grad_next_state: &[f64],
        grad_output: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let (m, p, q) = (self.hidden, self.input, self.output);
        let cols = m + p;
        let (h_prev, c_prev) = state.split_at(m);
        let g = self.gates(h_prev, input);
        let (h, c) = lstm_cell(self, h_prev, c_prev, input)?;

        let gate_len = m * cols;
        let (gw, rest) = grad.split_at_mut(4 * gate_len);
        let (gb, rest) = rest.split_at_mut(4 * m);
        let (gv, gc) = rest.split_at_mut(q * m);

        let mut grad_h = grad_next_state[..m].to_vec();
        for o in 0..q {
            gc[o] += grad_output[o];
            for j in 0..m {
                gv[o * m + j] += grad_output[o] * h[j];
                grad_h[j] += self.v[o * m + j] * grad_output[o];
            }
        }

        let mut grad_pre = [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]];
        let mut grad_prev = vec![0.0; 2 * m];
        for j in 0..m {
            let tc = c[j].tanh();
            let gct = grad_next_state[m + j] + grad_h[j] * g.output[j] * (1.0 - tc * tc);
            let go = grad_h[j] * tc;
            let gf = gct * c_prev[j];
            let gi = gct * g.candidate[j];
            let gg = gct * g.input[j];
            grad_prev[m + j] = gct * g.forget[j];
            grad_pre[0][j] = gf * g.forget[j] * (1.0 - g.forget[j]);
            grad_pre[1][j] = gi * g.input[j] * (1.0 - g.input[j]);
            grad_pre[2][j] = go * g.output[j] * (1.0 - g.output[j]);
            grad_pre[3][j] = gg * (1.0 - g.candidate[j] * g.candidate[j]);
        }

        let weights = [&self.w_f, &self.w_i, &self.w_o, &self.w_c];
        for (gate, (w, ga)) in weights.iter().zip(&grad_pre).enumerate() {
            let gw_gate = &mut gw[gate * gate_len..(gate + 1) * gate_len];
            for j in 0..m {
                gb[gate * m + j] += ga[j];
                for k in 0..m {
                    gw_gate[j * cols + k] += ga[j] * h_prev[k];
                    grad_prev[k] += w[j * cols + k] * ga[j];
                }
                for k in 0..p {
                    gw_gate[j * cols + m + k] += ga[j] * input[k];
                }
            }
        }
        Ok(grad_prev)
    }
}

/// States `s_0 ..= s_T` and outputs `x_1 ..= x_T` of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

pub fn run_sequence<M: SequenceModel>(model: &M, inputs: &[Vec<f64>]) -> Result<SequenceRun> {
    let mut states = vec![vec![0.0; model.state_size()]];
    let mut outputs = Vec::with_capacity(inputs.len());
    for z in inputs {
        check_len("sequence input", model.input_size(), z.len())?;
        let (next, x) = model.cell_step(states.last().unwrap(), z)?;
        states.push(next);
        outputs.push(x);
    }
    Ok(SequenceRun { states, outputs })
}

/// Backpropagation through time for a teacher-forced pass.
pub fn sequence_backward<M: SequenceModel>(
    model: &M,
    inputs: &[Vec<f64>],
    run: &SequenceRun,
    grad_outputs: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_len("output cotangents", run.outputs.len(), grad_outputs.len())?;
    let mut grad = vec![0.0; model.num_params()];
    let mut grad_state = vec![0.0; model.state_size()];
    for t in (0..inputs.len()).rev() {
        grad_state = model.cell_backward(&run.states[t], &inputs[t], &grad_state, &grad_outputs[t], &mut grad)?;
    }
    Ok(grad)
}

/// Teacher-forced pass over `history`, then `horizon` closed-loop steps
/// feeding each prediction back in as the next input.
pub fn sequence_forecast<M: SequenceModel>(model: &M, history: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
    if history.is_empty() {
        return Err(Error::InvalidSpec("forecast history is empty".into()));
    }
    if horizon == 0 {
        return Ok(Vec::new());
    }
    if model.input_size() != model.output_size() {
        return Err(Error::DimensionMismatch {
            context: "closed-loop forecast needs output size == input size",
            expected: model.input_size(),
            found: model.output_size(),
        });
    }
    let run = run_sequence(model, history)?;
    let mut state = run.states.last().unwrap().clone();
    let mut prediction = run.outputs.last().unwrap().clone();
    let mut out = Vec::with_capacity(horizon);
    out.push(prediction.clone());
    while out.len() < horizon {
        let (next, x) = model.cell_step(&state, &prediction)?;
        state = next;
        prediction = x;
        out.push(prediction.clone());
    }
    Ok(out)
}
