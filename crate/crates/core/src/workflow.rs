//! Procedure timelines and the labels derived from them.
//!
//! Timelines are sampled at one frame per second. Anticipation labels
//! measure the time until the next onset of a target event, clamped at a
//! horizon `h`; recognition labels are the current phase. Both can be
//! mapped onto the `[-1, 1]` signal range denoised by the diffusion branch.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per minute at the 1 FPS sampling convention.
pub const FRAMES_PER_MINUTE: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowTimeline {
    video_id: String,
    num_phases: usize,
    phase_of: Vec<usize>,
    /// `tool_active[tool][frame]`
    tool_active: Vec<Vec<bool>>,
}

impl WorkflowTimeline {
    pub fn new(
        video_id: impl Into<String>,
        num_phases: usize,
        phase_of: Vec<usize>,
        tool_active: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if phase_of.is_empty() {
            return Err(Error::data(video_id, "timeline has no frames"));
        }
        if let Some(&p) = phase_of.iter().find(|&&p| p >= num_phases) {
            return Err(Error::UnknownPhase { phase: p, vocabulary: num_phases });
        }
        for (i, tool) in tool_active.iter().enumerate() {
            if tool.len() != phase_of.len() {
                return Err(Error::data(
                    video_id,
                    format!("tool {i} has {} frames, phases have {}", tool.len(), phase_of.len()),
                ));
            }
        }
        Ok(Self { video_id, num_phases, phase_of, tool_active })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn with_video_id(mut self, id: &str) -> Self {
        self.video_id = id.to_string();
        self
    }

    pub fn num_frames(&self) -> usize {
        self.phase_of.len()
    }

    pub fn num_phases(&self) -> usize {
        self.num_phases
    }

    pub fn num_tools(&self) -> usize {
        self.tool_active.len()
    }

    pub fn phase_of(&self) -> &[usize] {
        &self.phase_of
    }

    pub fn tool_active(&self, tool: usize) -> &[bool] {
        &self.tool_active[tool]
    }

    pub fn tools_at(&self, t: usize) -> Vec<bool> {
        self.tool_active.iter().map(|tool| tool[t]).collect()
    }

    /// Whether `target` is active at frame `t`.
    pub fn is_active(&self, target: Target, t: usize) -> Result<bool> {
        self.check_target(target)?;
        Ok(match target {
            Target::Tool(i) => self.tool_active[i][t],
            Target::Phase(p) => self.phase_of[t] == p,
        })
    }

    fn check_target(&self, target: Target) -> Result<()> {
        let ok = match target {
            Target::Tool(i) => i < self.num_tools(),
            Target::Phase(p) => p < self.num_phases,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnknownTarget(target.to_string()))
        }
    }

    /// Writes the `frame,phase_id,tool_0,...` CSV layout.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["frame".to_string(), "phase_id".to_string()];
        header.extend((0..self.num_tools()).map(|i| format!("tool_{i}")));
        out.write_record(&header)?;
        for t in 0..self.num_frames() {
            let mut rec = vec![t.to_string(), self.phase_of[t].to_string()];
            rec.extend(self.tool_active.iter().map(|tool| u8::from(tool[t]).to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(video_id: &str, num_phases: usize, r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 2 || &header[0] != "frame" || &header[1] != "phase_id" {
            return Err(Error::data(video_id, "timeline header must start with frame,phase_id"));
        }
        let num_tools = header.len() - 2;
        for (i, name) in header.iter().skip(2).enumerate() {
            if name != format!("tool_{i}") {
                return Err(Error::data(video_id, format!("unexpected column `{name}`")));
            }
        }
        let mut phases = Vec::new();
        let mut tools = vec![Vec::new(); num_tools];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::data(video_id, format!("row {row}: {e}")))?;
            let parse = |col: usize| -> Result<usize> {
                rec[col]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::data(video_id, format!("row {row}: bad integer `{}`", &rec[col])))
            };
            if parse(0)? != row {
                return Err(Error::data(video_id, format!("row {row}: frame index out of sequence")));
            }
            let phase = parse(1)?;
            if phase >= num_phases {
                return Err(Error::data(video_id, format!("row {row}: unknown phase id {phase}")));
            }
            phases.push(phase);
            for (i, tool) in tools.iter_mut().enumerate() {
                match parse(i + 2)? {
                    0 => tool.push(false),
                    1 => tool.push(true),
                    v => return Err(Error::data(video_id, format!("row {row}: tool flag {v} is not 0/1"))),
                }
            }
        }
        Self::new(video_id, num_phases, phases, tools)
    }
}

/// Event whose onset is anticipated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Tool(usize),
    Phase(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Tool(i) => write!(f, "tool_{i}"),
            Target::Phase(p) => write!(f, "phase_{p}"),
        }
    }
}

/// One channel per tool followed by one channel per phase.
pub fn all_targets(num_tools: usize, num_phases: usize) -> Vec<Target> {
    (0..num_tools)
        .map(Target::Tool)
        .chain((0..num_phases).map(Target::Phase))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Presence {
    Present,
    InHorizon,
    OutOfHorizon,
}

impl Presence {
    pub fn class_index(self) -> usize {
        match self {
            Presence::Present => 0,
            Presence::InHorizon => 1,
            Presence::OutOfHorizon => 2,
        }
    }

    fn of(remaining: f64, h: f64) -> Self {
        if remaining == 0.0 {
            Presence::Present
        } else if remaining == h {
            Presence::OutOfHorizon
        } else {
            Presence::InHorizon
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnticipationLabel {
    pub remaining: f64,
    pub presence: Presence,
    pub horizon: f64,
}

/// Remaining time (in units of `frames_per_unit` frames) until the next
/// onset of `target`, clamped at `h`. Zero while the event is active; `h`
/// after its final occurrence.
pub fn remaining_time_labels(
    timeline: &WorkflowTimeline,
    target: Target,
    h: f64,
    frames_per_unit: f64,
) -> Result<Vec<AnticipationLabel>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {h}")));
    }
    if !(frames_per_unit > 0.0) {
        return Err(Error::InvalidArgument("frames_per_unit must be positive".into()));
    }
    timeline.check_target(target)?;
    let n = timeline.num_frames();
    let mut out = vec![None; n];
    // Backward scan: distance in frames to the nearest active frame at or after t.
    let mut next_active: Option<usize> = None;
    for t in (0..n).rev() {
        if timeline.is_active(target, t)? {
            next_active = Some(t);
        }
        let remaining = match next_active {
            Some(a) => ((a - t) as f64 / frames_per_unit).min(h),
            None => h,
        };
        out[t] = Some(AnticipationLabel {
            remaining,
            presence: Presence::of(remaining, h),
            horizon: h,
        });
    }
    Ok(out.into_iter().map(|l| l.expect("filled")).collect())
}

pub fn presence_labels(remaining: &[f64], h: f64) -> Result<Vec<Presence>> {
    remaining
        .iter()
        .map(|&r| {
            if (0.0..=h).contains(&r) {
                Ok(Presence::of(r, h))
            } else {
                Err(Error::LabelOutOfRange { value: r, horizon: h })
            }
        })
        .collect()
}

/// Maps remaining time in `[0, h]` onto `[-1, 1]`.
pub fn encode_remaining(remaining: f64, h: f64) -> f64 {
    2.0 * (remaining / h) - 1.0
}

/// Inverse of [`encode_remaining`] after clamping the signal to `[-1, 1]`.
pub fn decode_remaining(signal: f64, h: f64) -> f64 {
    (signal.clamp(-1.0, 1.0) + 1.0) * 0.5 * h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLabel {
    pub phase_id: usize,
    pub num_phases: usize,
}

impl PhaseLabel {
    pub fn new(phase_id: usize, num_phases: usize) -> Result<Self> {
        if phase_id >= num_phases {
            return Err(Error::UnknownPhase { phase: phase_id, vocabulary: num_phases });
        }
        Ok(Self { phase_id, num_phases })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.num_phases).map(|p| if p == self.phase_id { 1.0 } else { 0.0 }).collect()
    }

    /// Signed one-hot: `+1` on the phase, `-1` elsewhere.
    pub fn encode(&self) -> Vec<f64> {
        self.one_hot().into_iter().map(|v| 2.0 * v - 1.0).collect()
    }

    /// Phase with the largest clamped signal.
    pub fn decode(signal: &[f64]) -> Result<Self> {
        if signal.is_empty() {
            return Err(Error::InvalidArgument("empty phase signal".into()));
        }
        let phase_id = signal
            .iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
            .0;
        Self::new(phase_id, signal.len())
    }
}

/// `λ` rows of encoded labels ending at (and including) frame `anchor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelWindow {
    /// `values[i][c]` is channel `c` at frame `anchor + 1 + i - λ`, clamped at 0.
    pub values: Vec<Vec<f64>>,
    pub anchor: usize,
}

impl LabelWindow {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Frame index referenced by row `i`.
    pub fn frame_of_row(&self, i: usize) -> usize {
        (self.anchor + 1 + i).saturating_sub(self.len())
    }

    /// Channel-major flattening `(C, λ)`, the layout consumed by the denoiser.
    pub fn to_channel_major(&self) -> Vec<f64> {
        let (len, ch) = (self.len(), self.channels());
        let mut out = vec![0.0; len * ch];
        for (i, row) in self.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                out[c * len + i] = *v;
            }
        }
        out
    }

    pub fn from_channel_major(data: &[f64], channels: usize, anchor: usize) -> Self {
        let len = data.len() / channels.max(1);
        let values = (0..len)
            .map(|i| (0..channels).map(|c| data[c * len + i]).collect())
            .collect();
        Self { values, anchor }
    }
}

/// Window of `lambda` encoded labels ending at `t`, repeat-padding frame 0.
pub fn build_target_window(labels: &[Vec<f64>], t: usize, lambda: usize) -> Result<LabelWindow> {
    if t >= labels.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor frame {t} beyond sequence of {} frames",
            labels.len()
        )));
    }
    if lambda == 0 {
        return Err(Error::InvalidArgument("window length must be at least 1".into()));
    }
    let values = (0..lambda)
        .map(|i| labels[(t + 1 + i).saturating_sub(lambda)].clone())
        .collect();
    Ok(LabelWindow { values, anchor: t })
}

/// Per-frame anticipation labels for several targets: `[channel][frame]`.
pub fn anticipation_matrix(
    timeline: &WorkflowTimeline,
    targets: &[Target],
    h: f64,
    frames_per_unit: f64,
) -> Result<Vec<Vec<AnticipationLabel>>> {
    targets
        .iter()
        .map(|&t| remaining_time_labels(timeline, t, h, frames_per_unit))
        .collect()
}
