//! Shared conditional feature extractor: a two-layer spatial encoder
//! followed by a gated recurrent (LSTM) temporal module. The hidden output
//! of the recurrence at frame `t` is the conditional feature `c_t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationKind {
    Vector { dim: usize },
    /// Row-major `height x width x channels` pixels, consumed flattened.
    TinyImage { height: usize, width: usize, channels: usize },
}

impl ObservationKind {
    pub fn flat_dim(&self) -> usize {
        match *self {
            ObservationKind::Vector { dim } => dim,
            ObservationKind::TinyImage { height, width, channels } => height * width * channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub observation: ObservationKind,
    pub spatial_widths: [usize; 2],
    /// Also the recurrent hidden size.
    pub feature_dim: usize,
}

impl EncoderConfig {
    pub fn vector(dim: usize, spatial_width: usize, feature_dim: usize) -> Self {
        Self {
            observation: ObservationKind::Vector { dim },
            spatial_widths: [spatial_width, spatial_width],
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.observation.flat_dim() == 0 || self.spatial_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Hidden and cell vectors of the recurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl TemporalState {
    pub fn zeros(feature_dim: usize) -> Self {
        Self { hidden: vec![0.0; feature_dim], cell: vec![0.0; feature_dim] }
    }
}

/// State nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

impl StateVars {
    pub fn constant(tape: &mut Tape, state: &TemporalState) -> Self {
        let d = state.hidden.len();
        Self {
            hidden: tape.constant(Tensor::new(vec![1, d], state.hidden.clone())),
            cell: tape.constant(Tensor::new(vec![1, d], state.cell.clone())),
        }
    }

    pub fn read(&self, tape: &Tape) -> TemporalState {
        TemporalState {
            hidden: tape.value(self.hidden).data().to_vec(),
            cell: tape.value(self.cell).data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    config: EncoderConfig,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w_ih: ParamId,
    w_hh: ParamId,
    b_gates: ParamId,
}

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let input = config.observation.flat_dim();
        let [s1, s2] = config.spatial_widths;
        let f = config.feature_dim;
        let w1 = store.add_init("encoder.spatial.0.weight", vec![s1, input], input, rng);
        let b1 = store.add_zeros("encoder.spatial.0.bias", vec![s1]);
        let w2 = store.add_init("encoder.spatial.1.weight", vec![s2, s1], s1, rng);
        let b2 = store.add_zeros("encoder.spatial.1.bias", vec![s2]);
        let w_ih = store.add_init("encoder.lstm.weight_ih", vec![4 * f, s2], s2 + f, rng);
        let w_hh = store.add_init("encoder.lstm.weight_hh", vec![4 * f, f], s2 + f, rng);
        // Gate order: input, forget, candidate, output. Forget bias starts at 1.
        let mut bias = vec![0.0; 4 * f];
        bias[f..2 * f].iter_mut().for_each(|b| *b = 1.0);
        let b_gates = store.add("encoder.lstm.bias", Tensor::new(vec![4 * f], bias));
        Ok(Self { config, w1, b1, w2, b2, w_ih, w_hh, b_gates })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.spatial_widths[1]
    }

    pub fn check_observation(&self, x: &[f64]) -> Result<()> {
        let want = self.config.observation.flat_dim();
        if x.len() != want {
            return Err(Error::Shape(format!("observation has {} values, encoder expects {want}", x.len())));
        }
        Ok(())
    }

    /// Spatial embedding of each row of `frames` (n, obs_dim).
    pub fn spatial(&self, tape: &mut Tape, p: &Bound, frames: Var) -> Var {
        let h = tape.linear(frames, p.var(self.w1), Some(p.var(self.b1)));
        let h = tape.tanh(h);
        let h = tape.linear(h, p.var(self.w2), Some(p.var(self.b2)));
        tape.tanh(h)
    }

    /// Input contribution to the gates for each embedding row.
    fn input_gates(&self, tape: &mut Tape, p: &Bound, embeddings: Var) -> Var {
        tape.linear(embeddings, p.var(self.w_ih), Some(p.var(self.b_gates)))
    }

    /// One recurrent step given the input-gate row `(1, 4F)`.
    fn cell(&self, tape: &mut Tape, p: &Bound, gates_in: Var, state: StateVars) -> StateVars {
        let f = self.config.feature_dim;
        let rec = tape.linear(state.hidden, p.var(self.w_hh), None);
        let z = tape.add(gates_in, rec);
        let i = tape.slice_cols(z, 0, f);
        let i = tape.sigmoid(i);
        let fg = tape.slice_cols(z, f, f);
        let fg = tape.sigmoid(fg);
        let g = tape.slice_cols(z, 2 * f, f);
        let g = tape.tanh(g);
        let o = tape.slice_cols(z, 3 * f, f);
        let o = tape.sigmoid(o);
        let keep = tape.mul(fg, state.cell);
        let write = tape.mul(i, g);
        let cell = tape.add(keep, write);
        let tc = tape.tanh(cell);
        let hidden = tape.mul(o, tc);
        StateVars { hidden, cell }
    }

    /// Single temporal step on a tape: embedding `(1, E)` to `c_t` `(1, F)`.
    pub fn temporal_step_var(&self, tape: &mut Tape, p: &Bound, embedding: Var, state: StateVars) -> StateVars {
        let gates = self.input_gates(tape, p, embedding);
        self.cell(tape, p, gates, state)
    }

    /// Encodes `frames` (T, obs_dim) into features `(T, F)`.
    pub fn encode_clip_var(&self, tape: &mut Tape, p: &Bound, frames: Var, state: StateVars) -> (Var, StateVars) {
        let emb = self.spatial(tape, p, frames);
        let gates = self.input_gates(tape, p, emb);
        let n = tape.shape(frames)[0];
        let mut state = state;
        let mut outs = Vec::with_capacity(n);
        for t in 0..n {
            let row = tape.gather_rows(gates, &[t]);
            state = self.cell(tape, p, row, state);
            outs.push(state.hidden);
        }
        (tape.stack_rows(&outs), state)
    }

    pub fn encode_frame(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.check_observation(x)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec()));
        let e = self.spatial(&mut tape, &p, xv);
        Ok(tape.value(e).data().to_vec())
    }

    pub fn temporal_step(&self, store: &ParamStore, embedding: &[f64], state: &TemporalState) -> Result<(Vec<f64>, TemporalState)> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::Shape(format!("embedding has {} values, expected {}", embedding.len(), self.embedding_dim())));
        }
        self.check_state(state)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let e = tape.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec()));
        let s = StateVars::constant(&mut tape, state);
        let out = self.temporal_step_var(&mut tape, &p, e, s);
        let next = out.read(&tape);
        Ok((next.hidden.clone(), next))
    }

    pub fn encode_clip(&self, store: &ParamStore, frames: &[Vec<f64>], state: &TemporalState) -> Result<(Vec<Vec<f64>>, TemporalState)> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("empty clip".into()));
        }
        for f in frames {
            self.check_observation(f)?;
        }
        self.check_state(state)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = frames_tensor(frames);
        let xv = tape.constant(x);
        let s = StateVars::constant(&mut tape, state);
        let (c, last) = self.encode_clip_var(&mut tape, &p, xv, s);
        let feats = tape.value(c).rows().map(<[f64]>::to_vec).collect();
        Ok((feats, last.read(&tape)))
    }

    fn check_state(&self, state: &TemporalState) -> Result<()> {
        let f = self.config.feature_dim;
        if state.hidden.len() != f || state.cell.len() != f {
            return Err(Error::Shape(format!("temporal state must have size {f}")));
        }
        Ok(())
    }
}

pub fn frames_tensor(frames: &[Vec<f64>]) -> Tensor {
    let d = frames.first().map_or(0, Vec::len);
    Tensor::new(vec![frames.len(), d], frames.iter().flatten().copied().collect())
}
