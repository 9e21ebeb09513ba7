//! Evaluation of a trained model over a dataset split.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Video};
use crate::error::{Error, Result};
use crate::metrics::{anticipation_metrics, recognition_metrics, smooth_metric, AnticipationEval, RecognitionEval};
use crate::model::CoModel;
use crate::task::TaskKind;
use crate::workflow::{remaining_time_labels, Target};

/// Which branch produces the predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum Branch {
    Task,
    /// DDIM sampling of the denoiser at every `stride`-th frame.
    Diffusion { steps: usize, seed: u64, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: String,
    /// Horizons to report; each must not exceed the training horizon. Empty means the training horizon.
    pub horizons: Vec<f64>,
    pub branch: Branch,
    pub segment_aware_smooth: bool,
}

impl EvalOptions {
    pub fn task(split: &str) -> Self {
        Self { split: split.into(), horizons: Vec::new(), branch: Branch::Task, segment_aware_smooth: false }
    }
}

/// Predictions for one video at a set of frames. Anticipation values are in
/// time units `[channel][i]`; recognition values are phase ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub id: String,
    pub frames: Vec<usize>,
    pub anticipation: Vec<Vec<f64>>,
    pub phases: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon: f64,
    pub all: AnticipationEval,
    pub tools: Option<AnticipationEval>,
    pub phases: Option<AnticipationEval>,
    pub long_tail: Option<AnticipationEval>,
    pub dominant: Option<AnticipationEval>,
    pub smooth_tools: Option<f64>,
    pub smooth_phases: Option<f64>,
    /// Sum of the tool and phase Smooth values that exist.
    pub smooth: Option<f64>,
    pub segment_aware_smooth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub branch: Branch,
    pub split: String,
    pub videos: usize,
    pub frames: usize,
    pub anticipation: Vec<HorizonReport>,
    pub recognition: Option<RecognitionEval>,
    /// Denoiser evaluations performed during this evaluation.
    pub denoiser_invocations: usize,
    pub seconds: f64,
    pub frames_per_second: f64,
}

pub fn predict_video(model: &CoModel, video: &Video, branch: Branch) -> Result<VideoPrediction> {
    let n = video.num_frames();
    let (frames, anticipation, phases) = match branch {
        Branch::Task => {
            let frames: Vec<usize> = (0..n).collect();
            match model.kind() {
                TaskKind::Anticipation => (frames, model.anticipate(&video.observations)?, Vec::new()),
                TaskKind::Recognition => (frames, Vec::new(), model.recognize(&video.observations)?),
            }
        }
        Branch::Diffusion { steps, seed, stride } => {
            let frames: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
            let feats = model.features(&video.observations)?;
            match model.kind() {
                TaskKind::Anticipation => {
                    let a = model.d_anticipate(&feats, &frames, steps, seed)?;
                    (frames, a, Vec::new())
                }
                TaskKind::Recognition => {
                    let p = model.d_recognize(&feats, &frames, steps, seed)?;
                    (frames, Vec::new(), p)
                }
            }
        }
    };
    Ok(VideoPrediction { id: video.id().to_string(), frames, anticipation, phases })
}

/// Ground-truth remaining time at horizon `h`, `[channel][i]` at the given frames.
pub fn anticipation_truth(model: &CoModel, video: &Video, frames: &[usize], h: f64) -> Result<Vec<Vec<f64>>> {
    model
        .config
        .targets
        .iter()
        .map(|&t| {
            let labels = remaining_time_labels(&video.timeline, t, h, model.config.frames_per_unit)?;
            Ok(frames.iter().map(|&f| labels[f].remaining).collect())
        })
        .collect()
}

fn pooled(preds: &[&VideoPrediction], truths: &[Vec<Vec<f64>>], channels: &[usize], h: f64) -> Result<Option<AnticipationEval>> {
    if preds.is_empty() || channels.is_empty() {
        return Ok(None);
    }
    let mut p = vec![Vec::new(); channels.len()];
    let mut y = vec![Vec::new(); channels.len()];
    for (pred, truth) in preds.iter().zip(truths) {
        for (i, &c) in channels.iter().enumerate() {
            p[i].extend(pred.anticipation[c].iter().map(|v| v.min(h)));
            y[i].extend_from_slice(&truth[c]);
        }
    }
    anticipation_metrics(&p, &y, h).map(Some)
}

fn smooth_group(
    preds: &[&VideoPrediction],
    truths: &[Vec<Vec<f64>>],
    channels: &[usize],
    h: f64,
    segment_aware: bool,
) -> Result<Option<f64>> {
    let mut per_channel = Vec::new();
    for &c in channels {
        let mut values = Vec::new();
        for (pred, truth) in preds.iter().zip(truths) {
            let p: Vec<f64> = pred.anticipation[c].iter().map(|v| v.min(h)).collect();
            if let Some(s) = smooth_metric(&p, &truth[c], h, segment_aware)? {
                values.push(s);
            }
        }
        if !values.is_empty() {
            per_channel.push(values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    Ok((!per_channel.is_empty()).then(|| per_channel.iter().sum::<f64>() / per_channel.len() as f64))
}

pub fn evaluate(model: &CoModel, dataset: &Dataset, options: &EvalOptions) -> Result<EvalReport> {
    let videos = dataset.split(&options.split)?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{}` is empty", options.split)));
    }
    let calls_before = model.denoiser.invocations();
    let started = Instant::now();
    let preds = videos.iter().map(|v| predict_video(model, v, options.branch)).collect::<Result<Vec<_>>>()?;
    let seconds = started.elapsed().as_secs_f64();
    let denoiser_invocations = model.denoiser.invocations() - calls_before;
    let frames: usize = preds.iter().map(|p| p.frames.len()).sum();

    let mut anticipation = Vec::new();
    let mut recognition = None;
    match model.kind() {
        TaskKind::Anticipation => {
            let train_h = model.config.horizon;
            let horizons = if options.horizons.is_empty() { vec![train_h] } else { options.horizons.clone() };
            let targets = &model.config.targets;
            let tools: Vec<usize> = (0..targets.len()).filter(|&c| matches!(targets[c], Target::Tool(_))).collect();
            let phases: Vec<usize> = (0..targets.len()).filter(|&c| matches!(targets[c], Target::Phase(_))).collect();
            let all: Vec<usize> = (0..targets.len()).collect();
            for &h in &horizons {
                if !(h > 0.0 && h <= train_h) {
                    return Err(Error::InvalidArgument(format!(
                        "evaluation horizon {h} must lie in (0, {train_h}]"
                    )));
                }
                let truths = videos
                    .iter()
                    .zip(&preds)
                    .map(|(v, p)| anticipation_truth(model, v, &p.frames, h))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&VideoPrediction> = preds.iter().collect();
                let stratum = |long: bool| -> Result<Option<AnticipationEval>> {
                    let idx: Vec<usize> = (0..videos.len())
                        .filter(|&i| dataset.manifest.is_long_tail(videos[i].id()) == long)
                        .collect();
                    let p: Vec<&VideoPrediction> = idx.iter().map(|&i| &preds[i]).collect();
                    let t: Vec<Vec<Vec<f64>>> = idx.iter().map(|&i| truths[i].clone()).collect();
                    pooled(&p, &t, &all, h)
                };
                let seg = options.segment_aware_smooth;
                let smooth_tools = smooth_group(&refs, &truths, &tools, h, seg)?;
                let smooth_phases = smooth_group(&refs, &truths, &phases, h, seg)?;
                let smooth = match (smooth_tools, smooth_phases) {
                    (None, None) => None,
                    (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
                };
                anticipation.push(HorizonReport {
                    horizon: h,
                    all: pooled(&refs, &truths, &all, h)?.expect("non-empty split"),
                    tools: pooled(&refs, &truths, &tools, h)?,
                    phases: pooled(&refs, &truths, &phases, h)?,
                    long_tail: stratum(true)?,
                    dominant: stratum(false)?,
                    smooth_tools,
                    smooth_phases,
                    smooth,
                    segment_aware_smooth: seg,
                });
            }
        }
        TaskKind::Recognition => {
            let p: Vec<Vec<usize>> = preds.iter().map(|p| p.phases.clone()).collect();
            let y: Vec<Vec<usize>> = videos
                .iter()
                .zip(&preds)
                .map(|(v, p)| p.frames.iter().map(|&f| v.timeline.phase_of()[f]).collect())
                .collect();
            recognition = Some(recognition_metrics(&p, &y, model.channels())?);
        }
    }
    Ok(EvalReport {
        task: model.kind(),
        branch: options.branch,
        split: options.split.clone(),
        videos: videos.len(),
        frames,
        anticipation,
        recognition,
        denoiser_invocations,
        seconds,
        frames_per_second: if seconds > 0.0 { frames as f64 / seconds } else { f64::INFINITY },
    })
}

/// Writes `frame,channel,pred,label` rows. Recognition uses channel `phase`.
pub fn write_prediction_csv<W: Write>(model: &CoModel, video: &Video, pred: &VideoPrediction, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frame", "channel", "pred", "label"])?;
    match model.kind() {
        TaskKind::Anticipation => {
            let truth = anticipation_truth(model, video, &pred.frames, model.config.horizon)?;
            for (i, &f) in pred.frames.iter().enumerate() {
                for (c, target) in model.config.targets.iter().enumerate() {
                    out.write_record([
                        f.to_string(),
                        target.to_string(),
                        pred.anticipation[c][i].to_string(),
                        truth[c][i].to_string(),
                    ])?;
                }
            }
        }
        TaskKind::Recognition => {
            for (i, &f) in pred.frames.iter().enumerate() {
                out.write_record([
                    f.to_string(),
                    "phase".to_string(),
                    pred.phases[i].to_string(),
                    video.timeline.phase_of()[f].to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// One parsed prediction CSV row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PredictionRow {
    pub frame: usize,
    pub channel: String,
    pub pred: f64,
    pub label: f64,
}

pub fn read_prediction_csv<R: std::io::Read>(r: R) -> Result<Vec<PredictionRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|row| row.map_err(Error::from)).collect()
}
