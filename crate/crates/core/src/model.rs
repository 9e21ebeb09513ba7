//! The co-trained model: shared encoder, task head and denoiser over one
//! parameter store, with label construction and inference entry points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Video;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{ddim_sample, DiffusionSchedule, ScheduleKind, SigmaKind};
use crate::encoder::{frames_tensor, Encoder, EncoderConfig, StateVars, TemporalState};
use crate::error::{Error, Result};
use crate::graph::{Tape, Tensor};
use crate::params::ParamStore;
use crate::task::{argmax, decode_regression, TaskHead, TaskHeadConfig, TaskKind, TaskLabels};
use crate::workflow::{
    decode_remaining, encode_remaining, remaining_time_labels, PhaseLabel, Target, WorkflowTimeline,
};

/// Frames per inference tape when running over a whole video.
const INFERENCE_CHUNK: usize = 256;
/// Anchors per batched sampler call.
const SAMPLE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub task: TaskHeadConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    #[serde(default)]
    pub sigma: SigmaKind,
    /// Anticipation horizon in time units.
    pub horizon: f64,
    pub frames_per_unit: f64,
    /// Anticipation channels; empty for recognition.
    pub targets: Vec<Target>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.task.validate()?;
        self.denoiser.validate()?;
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion steps must be at least 1".into()));
        }
        if self.denoiser.cond_dim != self.encoder.feature_dim {
            return Err(Error::Config("denoiser condition size must equal the feature size".into()));
        }
        if self.denoiser.channels != self.task.channels {
            return Err(Error::Config("denoiser and task head must share the channel count".into()));
        }
        if self.task.kind == TaskKind::Anticipation {
            if self.targets.len() != self.task.channels {
                return Err(Error::Config("one anticipation target per task channel required".into()));
            }
            if !(self.horizon > 0.0 && self.frames_per_unit > 0.0) {
                return Err(Error::Config("horizon and frame rate must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Supervision derived from one timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLabels {
    pub task: TaskLabels,
    /// `[frame][channel]` targets in the `[-1, 1]` diffusion signal range.
    pub signal: Vec<Vec<f64>>,
    /// Anticipation ground truth in time units, `[channel][frame]`.
    pub remaining: Vec<Vec<f64>>,
}

/// Per-stream recurrent state for online inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSession {
    pub state: TemporalState,
    pub frames_seen: usize,
}

#[derive(Debug, Clone)]
pub struct CoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: TaskHead,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
}

impl CoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let head = TaskHead::new(config.task.clone(), config.encoder.feature_dim, &mut store, &mut rng)?;
        let denoiser = Denoiser::new(config.denoiser.clone(), &mut store, &mut rng)?;
        let schedule = DiffusionSchedule::with_sigma(config.schedule, config.diffusion_steps, config.sigma)?;
        Ok(Self { config, store, encoder, head, denoiser, schedule })
    }

    pub fn channels(&self) -> usize {
        self.config.task.channels
    }

    pub fn kind(&self) -> TaskKind {
        self.config.task.kind
    }

    pub fn labels(&self, timeline: &WorkflowTimeline) -> Result<VideoLabels> {
        let n = timeline.num_frames();
        match self.kind() {
            TaskKind::Anticipation => {
                let h = self.config.horizon;
                let mut remaining = Vec::with_capacity(self.config.targets.len());
                for &target in &self.config.targets {
                    let labels = remaining_time_labels(timeline, target, h, self.config.frames_per_unit)?;
                    remaining.push(labels);
                }
                let c = remaining.len();
                let mut norm = Vec::with_capacity(n * c);
                let mut presence = Vec::with_capacity(n * c);
                let mut signal = Vec::with_capacity(n);
                for t in 0..n {
                    let row: Vec<f64> = remaining.iter().map(|ch| ch[t].remaining).collect();
                    norm.extend(row.iter().map(|r| r / h));
                    presence.extend(remaining.iter().map(|ch| ch[t].presence.class_index()));
                    signal.push(row.iter().map(|&r| encode_remaining(r, h)).collect());
                }
                let minutes = remaining.iter().map(|ch| ch.iter().map(|l| l.remaining).collect()).collect();
                Ok(VideoLabels { task: TaskLabels::Anticipation { remaining: norm, presence }, signal, remaining: minutes })
            }
            TaskKind::Recognition => {
                let k = self.channels();
                let phases = timeline.phase_of().to_vec();
                let mut signal = Vec::with_capacity(n);
                for &p in &phases {
                    signal.push(PhaseLabel::new(p, k)?.encode());
                }
                Ok(VideoLabels { task: TaskLabels::Recognition { phases }, signal, remaining: Vec::new() })
            }
        }
    }

    /// Conditional features `c_t` for every frame, starting from a zero state.
    pub fn features(&self, observations: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run_video(observations, false)?.0)
    }

    /// Raw task-branch outputs per frame.
    pub fn outputs(&self, observations: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run_video(observations, true)?.1)
    }

    fn run_video(&self, observations: &[Vec<f64>], with_head: bool) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if observations.is_empty() {
            return Err(Error::InvalidArgument("empty video".into()));
        }
        for o in observations {
            self.encoder.check_observation(o)?;
        }
        let mut state = TemporalState::zeros(self.encoder.feature_dim());
        let mut feats = Vec::with_capacity(observations.len());
        let mut outs = Vec::new();
        for chunk in observations.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let x = tape.constant(frames_tensor(chunk));
            let s = StateVars::constant(&mut tape, &state);
            let (c, last) = self.encoder.encode_clip_var(&mut tape, &p, x, s);
            if with_head {
                let y = self.head.forward_var(&mut tape, &p, c);
                outs.extend(tape.value(y).rows().map(<[f64]>::to_vec));
            }
            feats.extend(tape.value(c).rows().map(<[f64]>::to_vec));
            state = last.read(&tape);
        }
        Ok((feats, outs))
    }

    /// Recurrent state after running the encoder over `observations` from a zero state.
    pub fn final_state(&self, observations: &[Vec<f64>]) -> Result<TemporalState> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(frames_tensor(observations));
        let s = StateVars::constant(&mut tape, &TemporalState::zeros(self.encoder.feature_dim()));
        let (_, last) = self.encoder.encode_clip_var(&mut tape, &p, x, s);
        Ok(last.read(&tape))
    }

    /// Task-branch anticipation in time units, `[channel][frame]`.
    pub fn anticipate(&self, observations: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.require(TaskKind::Anticipation)?;
        let outs = self.outputs(observations)?;
        Ok(self.decode_anticipation(&outs))
    }

    pub fn decode_anticipation(&self, outputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.config.horizon;
        (0..self.channels())
            .map(|c| outputs.iter().map(|o| decode_regression(o[c], h)).collect())
            .collect()
    }

    /// Task-branch phase prediction per frame.
    pub fn recognize(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>> {
        self.require(TaskKind::Recognition)?;
        Ok(self.outputs(observations)?.iter().map(|o| argmax(o)).collect())
    }

    fn require(&self, kind: TaskKind) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::InvalidArgument(format!("model was built for {:?}", self.kind())));
        }
        Ok(())
    }

    pub fn start_session(&self) -> OnlineSession {
        OnlineSession { state: TemporalState::zeros(self.encoder.feature_dim()), frames_seen: 0 }
    }

    /// One online step: consumes a frame and returns the task-branch output.
    pub fn step(&self, session: &mut OnlineSession, observation: &[f64]) -> Result<Vec<f64>> {
        self.encoder.check_observation(observation)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, observation.len()], observation.to_vec()));
        let s = StateVars::constant(&mut tape, &session.state);
        let (c, last) = self.encoder.encode_clip_var(&mut tape, &p, x, s);
        let y = self.head.forward_var(&mut tape, &p, c);
        session.state = last.read(&tape);
        session.frames_seen += 1;
        Ok(tape.value(y).data().to_vec())
    }

    /// Denoised windows (channel-major, clamped to `[-1, 1]`) for each condition row.
    pub fn sample_windows(&self, conds: &[Vec<f64>], steps: usize, eta: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
        let n = self.denoiser.config().sample_len();
        let f = self.encoder.feature_dim();
        if conds.iter().any(|c| c.len() != f) {
            return Err(Error::Shape(format!("conditions must have {f} values")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(conds.len());
        for chunk in conds.chunks(SAMPLE_CHUNK) {
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            let b = chunk.len();
            let mut failure = None;
            let y = ddim_sample(
                |y: &[f64], k: usize| match self.denoiser.eps_predict_batch(&self.store, y, &vec![k; b], &flat) {
                    Ok(e) => e,
                    Err(e) => {
                        failure.get_or_insert(e);
                        vec![0.0; y.len()]
                    }
                },
                b * n,
                &self.schedule,
                steps,
                eta,
                Some(1.0),
                &mut rng,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            out.extend(y.chunks(n).map(|w| w.iter().map(|v| v.clamp(-1.0, 1.0)).collect()));
        }
        Ok(out)
    }

    /// Last (anchor) row of each channel-major window.
    pub fn anchor_rows(&self, windows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let l = self.denoiser.config().window;
        windows
            .iter()
            .map(|w| (0..self.channels()).map(|c| w[c * l + l - 1]).collect())
            .collect()
    }

    /// Diffusion-branch anticipation at the given frames, `[channel][i]` in time units.
    pub fn d_anticipate(&self, features: &[Vec<f64>], frames: &[usize], steps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.require(TaskKind::Anticipation)?;
        let rows = self.d_rows(features, frames, steps, seed)?;
        let h = self.config.horizon;
        Ok((0..self.channels())
            .map(|c| rows.iter().map(|r| decode_remaining(r[c], h)).collect())
            .collect())
    }

    /// Diffusion-branch phase prediction at the given frames.
    pub fn d_recognize(&self, features: &[Vec<f64>], frames: &[usize], steps: usize, seed: u64) -> Result<Vec<usize>> {
        self.require(TaskKind::Recognition)?;
        Ok(self.d_rows(features, frames, steps, seed)?.iter().map(|r| argmax(r)).collect())
    }

    fn d_rows(&self, features: &[Vec<f64>], frames: &[usize], steps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut conds = Vec::with_capacity(frames.len());
        for &t in frames {
            let c = features
                .get(t)
                .ok_or_else(|| Error::InvalidArgument(format!("frame {t} beyond {} features", features.len())))?;
            conds.push(c.clone());
        }
        let windows = self.sample_windows(&conds, steps, 0.0, seed)?;
        Ok(self.anchor_rows(&windows))
    }

    /// Task-branch output of a video through the streaming path, for parity checks.
    pub fn stream_outputs(&self, video: &Video) -> Result<Vec<Vec<f64>>> {
        let mut session = self.start_session();
        video.observations.iter().map(|o| self.step(&mut session, o)).collect()
    }
}
