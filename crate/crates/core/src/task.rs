//! Deterministic branch: a linear predictor over `c_t` and its losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Anticipation,
    Recognition,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anticipation" => Ok(TaskKind::Anticipation),
            "recognition" => Ok(TaskKind::Recognition),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

/// How per-frame losses within a clip are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadConfig {
    pub kind: TaskKind,
    /// Anticipation targets or phase vocabulary size.
    pub channels: usize,
    pub mu: f64,
    #[serde(default)]
    pub reduction: FrameReduction,
}

impl TaskHeadConfig {
    pub fn anticipation(channels: usize) -> Self {
        Self { kind: TaskKind::Anticipation, channels, mu: 0.01, reduction: FrameReduction::Mean }
    }

    pub fn recognition(phases: usize) -> Self {
        Self { kind: TaskKind::Recognition, channels: phases, mu: 0.01, reduction: FrameReduction::Mean }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("task head needs at least one channel".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("auxiliary weight must be finite and non-negative, got {}", self.mu)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Anticipation => 4 * self.channels,
            TaskKind::Recognition => self.channels,
        }
    }
}

/// Per-frame supervision for a clip.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskLabels {
    /// Frame-major `(T, C)`: remaining time divided by the horizon, and presence class 0/1/2.
    Anticipation { remaining: Vec<f64>, presence: Vec<usize> },
    Recognition { phases: Vec<usize> },
}

impl TaskLabels {
    pub fn frames(&self, channels: usize) -> usize {
        match self {
            TaskLabels::Anticipation { remaining, .. } => remaining.len() / channels.max(1),
            TaskLabels::Recognition { phases } => phases.len(),
        }
    }

    /// Labels restricted to frames `start..start + len`.
    pub fn slice(&self, channels: usize, start: usize, len: usize) -> Self {
        match self {
            TaskLabels::Anticipation { remaining, presence } => TaskLabels::Anticipation {
                remaining: remaining[start * channels..(start + len) * channels].to_vec(),
                presence: presence[start * channels..(start + len) * channels].to_vec(),
            },
            TaskLabels::Recognition { phases } => TaskLabels::Recognition { phases: phases[start..start + len].to_vec() },
        }
    }
}

/// Decoded anticipation output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnticipationOutput {
    /// Remaining time in horizon units, unclamped.
    pub remaining: Vec<f64>,
    /// `[channel][class]` logits.
    pub presence_logits: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    config: TaskHeadConfig,
    weight: ParamId,
    bias: ParamId,
}

impl TaskHead {
    pub fn new<R: Rng>(config: TaskHeadConfig, feature_dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let out = config.output_dim();
        let weight = store.add_init("task.weight", vec![out, feature_dim], feature_dim, rng);
        let bias = store.add_zeros("task.bias", vec![out]);
        Ok(Self { config, weight, bias })
    }

    pub fn config(&self) -> &TaskHeadConfig {
        &self.config
    }

    /// Raw outputs `(T, output_dim)` for features `(T, F)`.
    pub fn forward_var(&self, tape: &mut Tape, p: &Bound, features: Var) -> Var {
        tape.linear(features, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn predict(&self, store: &ParamStore, c: &[f64]) -> Result<Vec<f64>> {
        let f = store.get(self.weight).shape()[1];
        if c.len() != f {
            return Err(Error::Shape(format!("feature has {} values, head expects {f}", c.len())));
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, f], c.to_vec()));
        let y = self.forward_var(&mut tape, &p, x);
        Ok(tape.value(y).data().to_vec())
    }

    pub fn loss_var(&self, tape: &mut Tape, outputs: Var, labels: &TaskLabels) -> Result<Var> {
        loss_var(&self.config, tape, outputs, labels)
    }
}

/// Scalar task loss on a tape given raw outputs `(T, output_dim)`.
pub fn loss_var(cfg: &TaskHeadConfig, tape: &mut Tape, outputs: Var, labels: &TaskLabels) -> Result<Var> {
    let t = tape.shape(outputs)[0];
    check_labels(cfg, t, labels)?;
    let loss = match labels {
        TaskLabels::Anticipation { remaining, presence } => {
            let c = cfg.channels;
            let reg = tape.slice_cols(outputs, 0, c);
            let reg_loss = tape.smooth_l1_mean(reg, remaining);
            let logits = tape.slice_cols(outputs, c, 3 * c);
            let logits = tape.reshape(logits, vec![t * c, 3]);
            let ce = tape.cross_entropy_mean(logits, presence);
            let ce = tape.scale(ce, cfg.mu);
            tape.add(reg_loss, ce)
        }
        TaskLabels::Recognition { phases } => tape.cross_entropy_mean(outputs, phases),
    };
    Ok(match cfg.reduction {
        FrameReduction::Mean => loss,
        FrameReduction::Sum => tape.scale(loss, t as f64),
    })
}

fn check_labels(cfg: &TaskHeadConfig, frames: usize, labels: &TaskLabels) -> Result<()> {
    match (cfg.kind, labels) {
        (TaskKind::Anticipation, TaskLabels::Anticipation { remaining, presence }) => {
            let n = frames * cfg.channels;
            if remaining.len() != n || presence.len() != n {
                return Err(Error::Shape(format!("expected {n} anticipation labels")));
            }
            if let Some(bad) = remaining.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("remaining-time label {bad}")));
            }
            if presence.iter().any(|&p| p > 2) {
                return Err(Error::InvalidArgument("presence class must be 0, 1 or 2".into()));
            }
        }
        (TaskKind::Recognition, TaskLabels::Recognition { phases }) => {
            if phases.len() != frames {
                return Err(Error::Shape(format!("expected {frames} phase labels, got {}", phases.len())));
            }
            if let Some(&p) = phases.iter().find(|&&p| p >= cfg.channels) {
                return Err(Error::UnknownPhase { phase: p, vocabulary: cfg.channels });
            }
        }
        _ => return Err(Error::InvalidArgument("labels do not match the task kind".into())),
    }
    Ok(())
}

/// Task loss evaluated on plain per-frame outputs.
pub fn task_loss(outputs: &[Vec<f64>], labels: &TaskLabels, cfg: &TaskHeadConfig) -> Result<f64> {
    cfg.validate()?;
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no frames".into()));
    }
    let d = cfg.output_dim();
    if outputs.iter().any(|o| o.len() != d) {
        return Err(Error::Shape(format!("each output must have {d} values")));
    }
    if outputs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("task outputs".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![outputs.len(), d], outputs.iter().flatten().copied().collect()));
    let loss = loss_var(cfg, &mut tape, x, labels)?;
    Ok(tape.value(loss).item())
}

/// Huber loss with transition point 1.
pub fn smooth_l1(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

/// Splits one anticipation output row.
pub fn split_anticipation(row: &[f64], channels: usize) -> AnticipationOutput {
    let remaining = row[..channels].to_vec();
    let presence_logits = (0..channels)
        .map(|c| {
            let b = channels + 3 * c;
            [row[b], row[b + 1], row[b + 2]]
        })
        .collect();
    AnticipationOutput { remaining, presence_logits }
}

/// Evaluation-time decoding of the regression output to time units: clamp to `[0, 1]`, scale by `h`.
pub fn decode_regression(value: f64, h: f64) -> f64 {
    value.clamp(0.0, 1.0) * h
}

/// Index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
