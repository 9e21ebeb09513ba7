//! Co-training: clip sampling, the joint objective, and the epoch loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, Video};
use crate::denoiser::{ddpm_loss_var, draw_noise, Conditioning, DenoiserConfig};
use crate::diffusion::{ScheduleKind, SigmaKind};
use crate::encoder::{frames_tensor, EncoderConfig, ObservationKind, StateVars, TemporalState};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{CoModel, ModelConfig, VideoLabels};
use crate::optim::{lr_schedule, AdamW};
use crate::params::Bound;
use crate::task::{FrameReduction, TaskHeadConfig, TaskKind, TaskLabels};
use crate::workflow::{build_target_window, Target, FRAMES_PER_MINUTE};

/// Which events form the anticipation channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSet {
    Tools,
    Phases,
    #[default]
    Both,
}

impl TargetSet {
    pub fn targets(self, num_tools: usize, num_phases: usize) -> Vec<Target> {
        let tools = (0..num_tools).map(Target::Tool);
        let phases = (0..num_phases).map(Target::Phase);
        match self {
            TargetSet::Tools => tools.collect(),
            TargetSet::Phases => phases.collect(),
            TargetSet::Both => tools.chain(phases).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub epochs: usize,
    /// Random clips per epoch for anticipation; 0 means one per training video.
    pub iterations_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: f64,
    pub clip_len: usize,
    pub window: usize,
    pub diffusion_steps: usize,
    pub mu: f64,
    pub schedule: ScheduleKind,
    pub sigma: SigmaKind,
    pub conditioning: Conditioning,
    pub seed: u64,
    pub with_task: bool,
    pub with_ddpm: bool,
    pub task_weight: f64,
    pub ddpm_weight: f64,
    /// Every `anchor_stride`-th clip frame anchors a denoising window.
    pub anchor_stride: usize,
    pub feature_dim: usize,
    pub spatial_width: usize,
    pub unet_widths: Vec<usize>,
    pub time_embed_dim: usize,
    /// Anticipation horizon in minutes.
    pub horizon: f64,
    pub targets: TargetSet,
    /// Recognition: thread the recurrent state across consecutive clips of a video.
    pub carry_state: bool,
    /// Anticipation: start a random clip from the state reached by the current
    /// encoder over the preceding frames instead of a zero state.
    pub burn_in: bool,
    pub reduction: FrameReduction,
    pub train_split: String,
    pub val_split: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Anticipation,
            epochs: 300,
            iterations_per_epoch: 0,
            lr: 1e-4,
            weight_decay: 1e-6,
            warmup: 0.05,
            clip_len: 64,
            window: 32,
            diffusion_steps: 100,
            mu: 0.01,
            schedule: ScheduleKind::Cosine,
            sigma: SigmaKind::Beta,
            conditioning: Conditioning::Film,
            seed: 0,
            with_task: true,
            with_ddpm: true,
            task_weight: 1.0,
            ddpm_weight: 1.0,
            anchor_stride: 1,
            feature_dim: 512,
            spatial_width: 256,
            unet_widths: vec![64, 128],
            time_embed_dim: 128,
            horizon: 5.0,
            targets: TargetSet::Both,
            carry_state: true,
            burn_in: true,
            reduction: FrameReduction::Mean,
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

impl TrainConfig {
    /// Recognition defaults: 30 epochs, lr 1e-5, weight decay 1e-2.
    pub fn recognition() -> Self {
        Self { task: TaskKind::Recognition, epochs: 30, lr: 1e-5, weight_decay: 1e-2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.with_task && !self.with_ddpm {
            return Err(Error::Config("at least one of the task and diffusion branches must be enabled".into()));
        }
        if self.clip_len == 0 || self.anchor_stride == 0 {
            return Err(Error::Config("clip length and anchor stride must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..=1.0).contains(&self.warmup)) {
            return Err(Error::Config("learning rate, weight decay and warmup must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, meta: &DatasetMeta) -> Result<ModelConfig> {
        let targets = match self.task {
            TaskKind::Anticipation => self.targets.targets(meta.num_tools(), meta.num_phases()),
            TaskKind::Recognition => Vec::new(),
        };
        let channels = match self.task {
            TaskKind::Anticipation => targets.len(),
            TaskKind::Recognition => meta.num_phases(),
        };
        let config = ModelConfig {
            encoder: EncoderConfig {
                observation: ObservationKind::Vector { dim: meta.observation_dim },
                spatial_widths: [self.spatial_width, self.spatial_width],
                feature_dim: self.feature_dim,
            },
            task: TaskHeadConfig { kind: self.task, channels, mu: self.mu, reduction: self.reduction },
            denoiser: DenoiserConfig {
                conditioning: self.conditioning,
                widths: self.unet_widths.clone(),
                time_embed_dim: self.time_embed_dim,
                cond_dim: self.feature_dim,
                channels,
                window: self.window,
            },
            schedule: self.schedule,
            diffusion_steps: self.diffusion_steps,
            sigma: self.sigma,
            horizon: self.horizon,
            frames_per_unit: FRAMES_PER_MINUTE,
            targets,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: Option<f64>,
    pub ddpm: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step { epoch: usize, step: usize, lr: f64, task: Option<f64>, ddpm: Option<f64>, total: f64 },
    Epoch { epoch: usize, mean_total: f64, val_task: Option<f64>, val_ddpm: Option<f64> },
}

/// A clip with its supervision, ready for one update.
#[derive(Debug, Clone)]
pub struct ClipBatch {
    pub frames: Vec<Vec<f64>>,
    pub labels: TaskLabels,
    /// Clip-local anchor frames of the denoising windows.
    pub anchors: Vec<usize>,
    /// One channel-major clean window per anchor.
    pub windows: Vec<f64>,
    pub initial: TemporalState,
}

impl ClipBatch {
    /// Frames `start..start + len` of `video`, with windows reaching back before the clip.
    pub fn from_video(
        model: &CoModel,
        video: &Video,
        labels: &VideoLabels,
        start: usize,
        len: usize,
        stride: usize,
        initial: TemporalState,
    ) -> Result<Self> {
        let end = (start + len).min(video.num_frames());
        if start >= end {
            return Err(Error::InvalidArgument(format!("clip start {start} beyond video {}", video.id())));
        }
        let len = end - start;
        let lambda = model.denoiser.config().window;
        let anchors: Vec<usize> = (0..len).step_by(stride.max(1)).collect();
        let mut windows = Vec::with_capacity(anchors.len() * model.denoiser.config().sample_len());
        for &a in &anchors {
            windows.extend(build_target_window(&labels.signal, start + a, lambda)?.to_channel_major());
        }
        Ok(Self {
            frames: video.observations[start..end].to_vec(),
            labels: labels.task.slice(model.channels(), start, len),
            anchors,
            windows,
            initial,
        })
    }
}

/// Nodes of the joint objective on one tape.
pub struct ClipGraph {
    pub bound: Bound,
    pub features: Var,
    pub task: Option<Var>,
    pub ddpm: Option<Var>,
    pub total: Var,
    pub last: StateVars,
}

/// Diffusion timesteps and noise for each anchor of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipNoise {
    pub ks: Vec<usize>,
    pub eps: Vec<f64>,
}

impl ClipNoise {
    pub fn draw<R: Rng>(model: &CoModel, anchors: usize, rng: &mut R) -> Self {
        let (ks, eps) = draw_noise(anchors, model.denoiser.config().sample_len(), &model.schedule, rng);
        Self { ks, eps }
    }
}

/// Encodes the clip once and builds `w_T · L_task + w_D · L_DDPM` on `tape`.
/// Both terms read the same feature node, so both reach the encoder.
pub fn build_clip_graph(
    model: &CoModel,
    tape: &mut Tape,
    batch: &ClipBatch,
    noise: Option<&ClipNoise>,
    weights: (f64, f64),
    with_task: bool,
) -> Result<ClipGraph> {
    if !with_task && noise.is_none() {
        return Err(Error::Config("objective has no terms".into()));
    }
    let bound = model.store.bind(tape);
    let x = tape.constant(frames_tensor(&batch.frames));
    let s = StateVars::constant(tape, &batch.initial);
    let (features, last) = model.encoder.encode_clip_var(tape, &bound, x, s);
    let task = if with_task {
        let out = model.head.forward_var(tape, &bound, features);
        Some(model.head.loss_var(tape, out, &batch.labels)?)
    } else {
        None
    };
    let ddpm = match noise {
        Some(n) => {
            let cond = tape.gather_rows(features, &batch.anchors);
            Some(ddpm_loss_var(&model.denoiser, tape, &bound, &batch.windows, cond, &n.ks, &n.eps, &model.schedule)?)
        }
        None => None,
    };
    let total = match (task, ddpm) {
        (Some(a), Some(b)) => {
            let a = tape.scale(a, weights.0);
            let b = tape.scale(b, weights.1);
            tape.add(a, b)
        }
        (Some(a), None) => tape.scale(a, weights.0),
        (None, Some(b)) => tape.scale(b, weights.1),
        (None, None) => unreachable!(),
    };
    Ok(ClipGraph { bound, features, task, ddpm, total, last })
}

/// One optimizer update on `batch`. On a non-finite loss the parameters are
/// left untouched and an error is returned.
pub fn train_step<R: Rng>(
    model: &mut CoModel,
    optimizer: &mut AdamW,
    batch: &ClipBatch,
    config: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<(LossBreakdown, TemporalState)> {
    let noise = config.with_ddpm.then(|| ClipNoise::draw(model, batch.anchors.len(), rng));
    let mut tape = Tape::new();
    let g = build_clip_graph(
        model,
        &mut tape,
        batch,
        noise.as_ref(),
        (config.task_weight, config.ddpm_weight),
        config.with_task,
    )?;
    let losses = LossBreakdown {
        task: g.task.map(|v| tape.value(v).item()),
        ddpm: g.ddpm.map(|v| tape.value(v).item()),
        total: tape.value(g.total).item(),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", losses.total)));
    }
    let grads = tape.backward(g.total);
    let grads = g.bound.grads(&model.store, &grads);
    optimizer.update(&mut model.store, &grads, lr)?;
    Ok((losses, g.last.read(&tape)))
}

/// Training videos with precomputed supervision.
pub struct TrainData<'a> {
    pub videos: Vec<&'a Video>,
    pub labels: Vec<VideoLabels>,
}

impl<'a> TrainData<'a> {
    pub fn new(model: &CoModel, videos: Vec<&'a Video>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::InvalidArgument("no training videos".into()));
        }
        let labels = videos.iter().map(|v| model.labels(&v.timeline)).collect::<Result<_>>()?;
        Ok(Self { videos, labels })
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: CoModel,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    pub log: Vec<LogEntry>,
}

impl Trainer {
    pub fn new(config: TrainConfig, meta: &DatasetMeta) -> Result<Self> {
        config.validate()?;
        let model = CoModel::new(config.model_config(meta)?, config.seed)?;
        let optimizer = AdamW::new(&model.store, config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self { config, model, optimizer, rng, epoch: 0, step: 0, log: Vec::new() })
    }

    pub fn steps_per_epoch(&self, data: &TrainData) -> usize {
        match self.config.task {
            TaskKind::Anticipation => match self.config.iterations_per_epoch {
                0 => data.videos.len(),
                n => n,
            },
            TaskKind::Recognition => data.videos.iter().map(|v| v.num_frames().div_ceil(self.config.clip_len)).sum(),
        }
    }

    fn lr(&self, data: &TrainData) -> f64 {
        let total = self.steps_per_epoch(data) * self.config.epochs;
        lr_schedule(self.step, total, self.config.lr, self.config.warmup)
    }

    fn update(&mut self, batch: &ClipBatch, data: &TrainData) -> Result<(LossBreakdown, TemporalState)> {
        let lr = self.lr(data);
        let (losses, state) = train_step(&mut self.model, &mut self.optimizer, batch, &self.config, lr, &mut self.rng)?;
        self.log.push(LogEntry::Step {
            epoch: self.epoch,
            step: self.step,
            lr,
            task: losses.task,
            ddpm: losses.ddpm,
            total: losses.total,
        });
        self.step += 1;
        Ok((losses, state))
    }

    /// One pass of the configured protocol; returns the mean total loss.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<f64> {
        let mut totals = Vec::new();
        let (len, stride) = (self.config.clip_len, self.config.anchor_stride);
        let zeros = TemporalState::zeros(self.model.encoder.feature_dim());
        match self.config.task {
            TaskKind::Anticipation => {
                for _ in 0..self.steps_per_epoch(data) {
                    let vi = self.rng.gen_range(0..data.videos.len());
                    let video = data.videos[vi];
                    let n = video.num_frames();
                    let start = if n > len { self.rng.gen_range(0..=n - len) } else { 0 };
                    let initial = if self.config.burn_in && start > 0 {
                        self.model.final_state(&video.observations[..start])?
                    } else {
                        zeros.clone()
                    };
                    let batch = ClipBatch::from_video(&self.model, video, &data.labels[vi], start, len, stride, initial)?;
                    totals.push(self.update(&batch, data)?.0.total);
                }
            }
            TaskKind::Recognition => {
                let mut order: Vec<usize> = (0..data.videos.len()).collect();
                order.shuffle(&mut self.rng);
                for vi in order {
                    let video = data.videos[vi];
                    let mut state = zeros.clone();
                    for start in (0..video.num_frames()).step_by(len) {
                        let initial = if self.config.carry_state { state.clone() } else { zeros.clone() };
                        let batch = ClipBatch::from_video(&self.model, video, &data.labels[vi], start, len, stride, initial)?;
                        let (losses, next) = self.update(&batch, data)?;
                        totals.push(losses.total);
                        state = next;
                    }
                }
            }
        }
        self.epoch += 1;
        Ok(totals.iter().sum::<f64>() / totals.len().max(1) as f64)
    }

    /// Runs until `config.epochs`, validating after each epoch when the
    /// dataset has the validation split. `on_epoch` sees the trainer after
    /// every epoch.
    pub fn fit<F>(&mut self, dataset: &Dataset, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        let videos = dataset.split(&self.config.train_split)?;
        if videos.is_empty() {
            return Err(Error::InvalidArgument(format!("split `{}` is empty", self.config.train_split)));
        }
        let data = TrainData::new(&self.model, videos)?;
        let val = if dataset.has_split(&self.config.val_split) {
            Some(TrainData::new(&self.model, dataset.split(&self.config.val_split)?)?)
        } else {
            None
        };
        while self.epoch < self.config.epochs {
            let mean_total = self.run_epoch(&data)?;
            let (val_task, val_ddpm) = match &val {
                Some(v) if !v.videos.is_empty() => self.validate(v)?,
                _ => (None, None),
            };
            self.log.push(LogEntry::Epoch { epoch: self.epoch - 1, mean_total, val_task, val_ddpm });
            on_epoch(self)?;
        }
        Ok(())
    }

    /// Mean task loss over whole validation videos and the denoising loss on
    /// strided anchors with noise seeded by the epoch.
    pub fn validate(&self, data: &TrainData) -> Result<(Option<f64>, Option<f64>)> {
        let mut task = Vec::new();
        let mut ddpm = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        rng.set_stream(self.epoch as u64);
        let stride = self.config.anchor_stride.max(8);
        for (video, labels) in data.videos.iter().zip(&data.labels) {
            let batch = ClipBatch::from_video(
                &self.model,
                video,
                labels,
                0,
                video.num_frames(),
                stride,
                TemporalState::zeros(self.model.encoder.feature_dim()),
            )?;
            let noise = self.config.with_ddpm.then(|| ClipNoise::draw(&self.model, batch.anchors.len(), &mut rng));
            let mut tape = Tape::new();
            let g = build_clip_graph(&self.model, &mut tape, &batch, noise.as_ref(), (1.0, 1.0), self.config.with_task)?;
            if let Some(t) = g.task {
                task.push(tape.value(t).item());
            }
            if let Some(d) = g.ddpm {
                ddpm.push(tape.value(d).item());
            }
        }
        let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok((avg(&task), avg(&ddpm)))
    }

    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n").collect()
    }
}
